//! Synthetic event-sequence generators with known Bayes structure, plus a
//! JSONL loader.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Seeds, StreamRng};

/// Ordered `(event, time)` pairs with non-decreasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<usize>,
    pub times: Vec<f64>,
}

impl EventSequence {
    pub fn new(events: Vec<usize>, times: Vec<f64>) -> Result<Self> {
        let seq = Self { events, times };
        seq.check(None)?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks lengths, time ordering and (optionally) the vocabulary bound.
    pub fn check(&self, vocab: Option<usize>) -> Result<()> {
        if self.events.len() != self.times.len() {
            return Err(Error::input(format!(
                "{} events but {} times",
                self.events.len(),
                self.times.len()
            )));
        }
        if self.events.is_empty() {
            return Err(Error::input("empty sequence"));
        }
        if let Some(i) = self
            .times
            .iter()
            .position(|t| !(t.is_finite() && *t >= 0.0))
        {
            return Err(Error::input(format!("time {i} is negative or not finite")));
        }
        if let Some(i) = self.times.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::input(format!(
                "times not sorted at position {}",
                i + 1
            )));
        }
        if let Some(v) = vocab {
            if let Some(&e) = self.events.iter().find(|&&e| e >= v) {
                return Err(Error::input(format!(
                    "event id {e} outside vocabulary of {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab_size: usize,
    pub sequences: Vec<EventSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of prediction targets (every position after the first).
    pub fn num_transitions(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.len().saturating_sub(1))
            .sum()
    }

    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            vocab_size: self.vocab_size,
            sequences: self.sequences.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Next event follows `(prev+1) mod V` after a short gap and `(7·prev+3) mod V`
/// after a long one, so the label is a deterministic function of the gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRuleTask {
    pub vocab: usize,
    pub p_short: f64,
    pub mean_short: f64,
    pub mean_long: f64,
    pub threshold: f64,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for GapRuleTask {
    fn default() -> Self {
        Self {
            vocab: 20,
            p_short: 0.6,
            mean_short: 0.5,
            mean_long: 5.0,
            threshold: 1.0,
            seq_len: 64,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GapRuleTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config("gap-rule vocab must be at least 2"));
        }
        if gcd(7, self.vocab) != 1 {
            return Err(Error::config("gap-rule vocab must be coprime to 7"));
        }
        if !(0.0..=1.0).contains(&self.p_short) {
            return Err(Error::config("p_short must lie in [0, 1]"));
        }
        if !(self.mean_short > 0.0 && self.mean_long > 0.0 && self.threshold >= 0.0) {
            return Err(Error::config(
                "gap means must be positive and threshold non-negative",
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::config("sequence length must be at least 2"));
        }
        Ok(())
    }

    pub fn short_rule(&self, prev: usize) -> usize {
        (prev + 1) % self.vocab
    }

    pub fn long_rule(&self, prev: usize) -> usize {
        (7 * prev + 3) % self.vocab
    }

    pub fn label(&self, prev: usize, gap: f64) -> usize {
        if gap < self.threshold {
            self.short_rule(prev)
        } else {
            self.long_rule(prev)
        }
    }

    /// `P(gap < θ)` under the exponential mixture.
    pub fn short_branch_probability(&self) -> f64 {
        let cdf = |mean: f64| 1.0 - (-self.threshold / mean).exp();
        self.p_short * cdf(self.mean_short) + (1.0 - self.p_short) * cdf(self.mean_long)
    }

    pub fn sample_gap(&self, rng: &mut StreamRng) -> f64 {
        let mean = if rng.random::<f64>() < self.p_short {
            self.mean_short
        } else {
            self.mean_long
        };
        let exp = Exp::new(1.0 / mean).expect("positive rate");
        // keep timestamps strictly increasing
        exp.sample(rng).max(f64::MIN_POSITIVE)
    }

    fn sequence(&self, rng: &mut StreamRng) -> EventSequence {
        let mut events = Vec::with_capacity(self.seq_len);
        let mut times = Vec::with_capacity(self.seq_len);
        events.push(rng.random_range(0..self.vocab));
        times.push(0.0);
        for i in 1..self.seq_len {
            let gap = self.sample_gap(rng);
            events.push(self.label(events[i - 1], gap));
            times.push(times[i - 1] + gap);
        }
        EventSequence { events, times }
    }
}

/// Events come from one of two regimes that alternate every `period` time
/// units; regime `r` draws from its own half of the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicAttentionTask {
    pub vocab: usize,
    pub period: f64,
    pub mean_gap: f64,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for PeriodicAttentionTask {
    fn default() -> Self {
        Self {
            vocab: 20,
            period: 10.0,
            mean_gap: 2.0,
            seq_len: 32,
            n_train: 500,
            n_valid: 50,
            n_test: 50,
        }
    }
}

impl PeriodicAttentionTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || !self.vocab.is_multiple_of(2) {
            return Err(Error::config("periodic task vocab must be even and >= 2"));
        }
        if !(self.period > 0.0 && self.mean_gap > 0.0) {
            return Err(Error::config("period and mean gap must be positive"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("sequence length must be at least 2"));
        }
        Ok(())
    }

    pub fn regime(&self, t: f64) -> usize {
        ((t / self.period).floor() as i64).rem_euclid(2) as usize
    }

    /// Within-regime weights `∝ 1/(rank+1)`.
    fn weights(&self) -> Vec<f64> {
        (0..self.vocab / 2).map(|r| 1.0 / (r + 1) as f64).collect()
    }

    fn sequence(&self, rng: &mut StreamRng) -> EventSequence {
        let pick = WeightedIndex::new(self.weights()).expect("positive weights");
        let exp = Exp::new(1.0 / self.mean_gap).expect("positive rate");
        let half = self.vocab / 2;
        let mut t = rng.random::<f64>() * 2.0 * self.period;
        let mut events = Vec::with_capacity(self.seq_len);
        let mut times = Vec::with_capacity(self.seq_len);
        for i in 0..self.seq_len {
            if i > 0 {
                t += exp.sample(rng).max(f64::MIN_POSITIVE);
            }
            events.push(self.regime(t) * half + pick.sample(rng));
            times.push(t);
        }
        EventSequence { events, times }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Task {
    GapRule(GapRuleTask),
    PeriodicAttention(PeriodicAttentionTask),
}

impl Task {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gap-rule" => Ok(Task::GapRule(GapRuleTask::default())),
            "periodic" | "periodic-attention" => {
                Ok(Task::PeriodicAttention(PeriodicAttentionTask::default()))
            }
            other => Err(Error::input(format!("unknown task '{other}'"))),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Task::GapRule(t) => t.vocab,
            Task::PeriodicAttention(t) => t.vocab,
        }
    }

    fn counts(&self) -> (usize, usize, usize) {
        match self {
            Task::GapRule(t) => (t.n_train, t.n_valid, t.n_test),
            Task::PeriodicAttention(t) => (t.n_train, t.n_valid, t.n_test),
        }
    }

    /// Shrinks every split, keeping the generator otherwise unchanged.
    pub fn with_counts(mut self, train: usize, valid: usize, test: usize) -> Self {
        match &mut self {
            Task::GapRule(t) => (t.n_train, t.n_valid, t.n_test) = (train, valid, test),
            Task::PeriodicAttention(t) => (t.n_train, t.n_valid, t.n_test) = (train, valid, test),
        }
        self
    }
}

/// Deterministic dataset for `(task, seed)`. Sequence `i` is drawn from its
/// own stream and the split is decided by index alone, so splits are disjoint
/// and a sequence does not change when the split sizes do.
pub fn generate(task: &Task, seed: u64) -> Result<Splits> {
    match task {
        Task::GapRule(t) => t.validate()?,
        Task::PeriodicAttention(t) => t.validate()?,
    }
    let seeds = Seeds::new(seed);
    let (n_train, n_valid, n_test) = task.counts();
    let make = |split: &str, n: usize| Dataset {
        vocab_size: task.vocab(),
        sequences: (0..n)
            .map(|i| {
                let mut rng = seeds.stream(&format!("data/{split}/{i}"));
                match task {
                    Task::GapRule(t) => t.sequence(&mut rng),
                    Task::PeriodicAttention(t) => t.sequence(&mut rng),
                }
            })
            .collect(),
    };
    Ok(Splits {
        train: make("train", n_train),
        valid: make("valid", n_valid),
        test: make("test", n_test),
    })
}

/// Best achievable next-event accuracy with and without access to gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesRates {
    pub with_gaps: f64,
    /// `max(p, 1−p)` with `p = P(gap < θ)`: the ceiling when the two branch
    /// rules always disagree.
    pub without_gaps_branch: f64,
    /// Exact ceiling, crediting previous events for which both rules agree.
    pub without_gaps: f64,
    pub short_branch_probability: f64,
}

pub fn bayes_rates(task: &Task) -> Result<BayesRates> {
    let Task::GapRule(t) = task else {
        return Err(Error::input(
            "Bayes rates are only defined for the gap-rule task",
        ));
    };
    t.validate()?;
    let p = t.short_branch_probability();
    let branch = p.max(1.0 - p);
    // Both rules are bijections, so the chain is doubly stochastic and the
    // previous event is uniform at every step once the first one is.
    let agree = (0..t.vocab)
        .filter(|&e| t.short_rule(e) == t.long_rule(e))
        .count() as f64
        / t.vocab as f64;
    Ok(BayesRates {
        with_gaps: 1.0,
        without_gaps_branch: branch,
        without_gaps: agree + (1.0 - agree) * branch,
        short_branch_probability: p,
    })
}

#[derive(Deserialize)]
struct Record {
    events: Vec<i64>,
    times: Vec<f64>,
}

/// Reads one sequence per line: `{"events": [...], "times": [...]}`.
/// Blank lines are skipped. With `vocab = None` the vocabulary is inferred as
/// `max id + 1`.
pub fn load_jsonl(path: &Path, vocab: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut sequences = Vec::new();
    let mut max_id = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let invalid = |msg: String| Error::Validation {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(&e) = rec.events.iter().find(|&&e| e < 0) {
            return Err(invalid(format!("negative event id {e}")));
        }
        let seq = EventSequence {
            events: rec.events.iter().map(|&e| e as usize).collect(),
            times: rec.times,
        };
        seq.check(vocab).map_err(|e| match e {
            Error::Input(msg) => invalid(msg),
            other => other,
        })?;
        max_id = max_id.max(*seq.events.iter().max().unwrap_or(&0));
        sequences.push(seq);
    }
    if sequences.is_empty() {
        warn!("{}: no sequences", path.display());
    }
    let vocab_size = vocab.unwrap_or(if sequences.is_empty() { 0 } else { max_id + 1 });
    Ok(Dataset {
        vocab_size,
        sequences,
    })
}

pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in &data.sequences {
        serde_json::to_writer(&mut out, seq).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Task {
        Task::by_name("gap-rule").unwrap().with_counts(30, 5, 5)
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small(), 11).unwrap();
        let b = generate(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_do_not_move_sequences() {
        let a = generate(&small(), 3).unwrap();
        let b = generate(&small().with_counts(10, 5, 5), 3).unwrap();
        assert_eq!(a.train.sequences[..10], b.train.sequences[..]);
        assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn gap_rule_labels_follow_rule() {
        let Task::GapRule(rule) = small() else {
            unreachable!()
        };
        let splits = generate(&small(), 5).unwrap();
        for s in splits.train.sequences.iter().chain(&splits.test.sequences) {
            assert_eq!(s.len(), 64);
            s.check(Some(20)).unwrap();
            for i in 1..s.len() {
                let gap = s.times[i] - s.times[i - 1];
                assert!(gap > 0.0);
                assert_eq!(s.events[i], rule.label(s.events[i - 1], gap));
            }
        }
    }

    #[test]
    fn empirical_short_gap_rate() {
        let t = GapRuleTask::default();
        let mut rng = Seeds::new(99).stream("gaps");
        let n = 100_000;
        let hits = (0..n).filter(|_| t.sample_gap(&mut rng) < 1.0).count();
        let p_hat = hits as f64 / n as f64;
        let p = 0.6 * (1.0 - (-2.0f64).exp()) + 0.4 * (1.0 - (-0.2f64).exp());
        assert!((p - 0.5913).abs() < 1e-4);
        assert!((p_hat - 0.5913).abs() < 0.01);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((p_hat - p).abs() < 3.0 * se, "{p_hat} vs {p}");
    }

    #[test]
    fn bayes_rate_values() {
        let r = bayes_rates(&Task::GapRule(GapRuleTask::default())).unwrap();
        assert_eq!(r.with_gaps, 1.0);
        assert!((r.without_gaps_branch - 0.5913).abs() < 1e-4);
        // prev ∈ {3, 13} maps to the same event under both rules
        assert!((r.without_gaps - (0.1 + 0.9 * r.without_gaps_branch)).abs() < 1e-12);

        for theta in [1e-9, 1e9] {
            let t = GapRuleTask {
                threshold: theta,
                ..GapRuleTask::default()
            };
            let r = bayes_rates(&Task::GapRule(t)).unwrap();
            assert!((r.without_gaps_branch - 1.0).abs() < 1e-6);
            assert!((r.without_gaps - 1.0).abs() < 1e-6);
        }
        assert!(bayes_rates(&Task::by_name("periodic").unwrap()).is_err());
    }

    #[test]
    fn empirical_accuracy_of_majority_predictor() {
        // oracle: predict the short-branch rule for every transition
        let splits = generate(
            &Task::GapRule(GapRuleTask::default()).with_counts(400, 0, 0),
            8,
        )
        .unwrap();
        let t = GapRuleTask::default();
        let (mut hit, mut n) = (0usize, 0usize);
        for s in &splits.train.sequences {
            for i in 1..s.len() {
                hit += (s.events[i] == t.short_rule(s.events[i - 1])) as usize;
                n += 1;
            }
        }
        let acc = hit as f64 / n as f64;
        let want = bayes_rates(&Task::GapRule(t)).unwrap().without_gaps;
        assert!((acc - want).abs() < 0.015, "{acc} vs {want}");
    }

    #[test]
    fn periodic_events_follow_regime() {
        let task = Task::by_name("periodic").unwrap().with_counts(20, 2, 2);
        let Task::PeriodicAttention(p) = &task else {
            unreachable!()
        };
        let splits = generate(&task, 1).unwrap();
        for s in &splits.train.sequences {
            s.check(Some(20)).unwrap();
            for (e, t) in s.events.iter().zip(&s.times) {
                assert_eq!(e / 10, p.regime(*t));
            }
        }
        assert_eq!(p.regime(9.99), 0);
        assert_eq!(p.regime(10.0), 1);
        assert_eq!(p.regime(20.5), 0);
    }

    #[test]
    fn jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.jsonl");
        std::fs::write(&good, "{\"events\":[1,2],\"times\":[0.0,1.5]}\n\n").unwrap();
        let d = load_jsonl(&good, None).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.sequences[0].len(), 2);
        assert_eq!(d.vocab_size, 3);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            "{\"events\":[1],\"times\":[0.0]}\n{\"events\":[1,2],\"times\":[2.0,1.0]}\n",
        )
        .unwrap();
        match load_jsonl(&bad, None) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let junk = dir.path().join("junk.jsonl");
        std::fs::write(&junk, "{\"events\":[1],\"times\":[0.0]}\nnot json\n").unwrap();
        assert!(matches!(
            load_jsonl(&junk, None),
            Err(Error::Parse { line: 2, .. })
        ));

        let oov = dir.path().join("oov.jsonl");
        std::fs::write(&oov, "{\"events\":[25],\"times\":[0.0]}\n").unwrap();
        assert!(matches!(
            load_jsonl(&oov, Some(20)),
            Err(Error::Validation { line: 1, .. })
        ));

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty, Some(20)).unwrap().is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let splits = generate(&small(), 2).unwrap();
        write_jsonl(&path, &splits.train).unwrap();
        assert_eq!(load_jsonl(&path, Some(20)).unwrap(), splits.train);
    }
}
