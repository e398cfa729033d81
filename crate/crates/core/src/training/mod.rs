//! Adam, next-event losses, evaluation metrics, checkpoints, and the
//! early-stopped training loop.

mod adam;
mod checkpoint;
mod gradcheck;
mod metrics;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, Moments};
pub use checkpoint::{config_hash, Checkpoint};
pub use gradcheck::{gradient_check, GradCheck};
pub use metrics::{ndcg_at, rank_of, MetricAccumulator, MetricReport};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data_synth::Dataset;
use crate::error::{Error, Result};
use crate::params::{Bindings, NamedGrads};
use crate::rng::{Seeds, StreamRng, StreamState};
use crate::sequence_model::{gap_range, Model, ModelConfig, Query};

/// Vocabularies above this size train with sampled cross-entropy.
pub const FULL_SOFTMAX_MAX_VOCAB: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitor {
    Accuracy,
    Ndcg10,
}

impl Monitor {
    pub fn read(self, r: &MetricReport) -> f64 {
        match self {
            Monitor::Accuracy => r.accuracy,
            Monitor::Ndcg10 => r.ndcg_at_10,
        }
    }
}

/// Optimizer and loop settings. `beta1` and `epsilon` are conventional
/// defaults; only the learning rate and `beta2` come from the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 30,
            patience: 10,
            monitor: Monitor::Accuracy,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !(open(self.learning_rate) && open(self.beta1) && open(self.beta2) && open(self.epsilon))
        {
            return Err(Error::config(
                "learning_rate, beta1, beta2 and epsilon must lie in (0, 1)",
            ));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config(
                "patience, batch_size and max_epochs must be >= 1",
            ));
        }
        Ok(())
    }
}

/// A prediction target: position `pos ≥ 1` of sequence `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub seq: usize,
    pub pos: usize,
}

/// Every position after the first, in order.
pub fn targets(data: &Dataset) -> Vec<Target> {
    data.sequences
        .iter()
        .enumerate()
        .flat_map(|(seq, s)| (1..s.len()).map(move |pos| Target { seq, pos }))
        .collect()
}

fn queries<'a>(data: &'a Dataset, batch: &[Target]) -> Vec<Query<'a>> {
    batch
        .iter()
        .map(|t| Query::next_of(&data.sequences[t.seq], t.pos))
        .collect()
}

/// Which candidates the cross-entropy normalizes over.
pub enum Negatives<'r> {
    /// Every event in the vocabulary.
    Full,
    /// `n` uniform draws without replacement, excluding the true event.
    Sampled { n: usize, rng: &'r mut StreamRng },
}

/// Mean cross-entropy of `truth` given representations `last` (`B × event_dim`).
pub fn cross_entropy(
    model: &Model,
    tape: &mut Tape,
    bound: &Bindings,
    last: Var,
    truth: &[usize],
    negatives: Negatives,
) -> Result<Var> {
    let logp = match negatives {
        Negatives::Full => {
            let logits = model.logits_on_tape(tape, bound, last)?;
            let ls = tape.log_softmax_rows(logits);
            tape.pick_per_row(ls, truth)?
        }
        Negatives::Sampled { n, rng } => {
            let v = model.config().vocab_size;
            if n == 0 || n >= v {
                return Err(Error::config(format!("need 1 <= negatives < {v}, got {n}")));
            }
            let width = n + 1;
            let mut cand = Vec::with_capacity(truth.len() * width);
            for &t in truth {
                cand.push(t);
                cand.extend(index::sample(rng, v - 1, n).into_iter().map(|j| {
                    if j >= t {
                        j + 1
                    } else {
                        j
                    }
                }));
            }
            let z = bound.get("event.z")?;
            let zc = tape.gather_rows(z, &cand)?;
            let rows: Vec<usize> = (0..truth.len())
                .flat_map(|b| std::iter::repeat_n(b, width))
                .collect();
            let rr = tape.gather_rows(last, &rows)?;
            let prod = tape.mul(zc, rr)?;
            let scores = tape.sum_cols(prod);
            let scores = tape.reshape(scores, vec![truth.len(), width])?;
            let ls = tape.log_softmax_rows(scores);
            tape.pick_per_row(ls, &vec![0; truth.len()])?
        }
    };
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Records the masked next-event loss of a batch: every target is predicted
/// from the events strictly before it, with lags taken to its own time.
pub fn masked_next_event_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bindings,
    data: &Dataset,
    batch: &[Target],
    rng: &mut StreamRng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let qs = queries(data, batch);
    let rep = model.represent(tape, bound, &qs, Some(&mut *rng))?;
    let truth: Vec<usize> = batch
        .iter()
        .map(|t| data.sequences[t.seq].events[t.pos])
        .collect();
    let cfg = model.config();
    let neg = if cfg.vocab_size > FULL_SOFTMAX_MAX_VOCAB {
        Negatives::Sampled {
            n: cfg.negative_samples,
            rng,
        }
    } else {
        Negatives::Full
    };
    cross_entropy(model, tape, bound, rep.last, &truth, neg)
}

const EVAL_BATCH: usize = 512;

/// Ranking metrics and full-softmax loss over every target of `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricReport> {
    let all = targets(data);
    if all.is_empty() {
        return Err(Error::input("evaluation set has no targets"));
    }
    let mut acc = MetricAccumulator::default();
    for chunk in all.chunks(EVAL_BATCH) {
        let preds = model.predict_batch(&queries(data, chunk))?;
        for (t, p) in chunk.iter().zip(&preds) {
            let truth = data.sequences[t.seq].events[t.pos];
            let max = p.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            acc.push(rank_of(&p.logits, truth), lse - p.logits[truth]);
        }
    }
    Ok(acc.finish())
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub seconds: f64,
}

pub fn write_epoch_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,valid_metric,seconds")?;
    for e in log {
        writeln!(
            f,
            "{},{:?},{:?},{:.3}",
            e.epoch, e.train_loss, e.valid_metric, e.seconds
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Mutable training state: model, optimizer moments and the training RNG.
pub struct Trainer {
    model: Model,
    optim: OptimConfig,
    adam: AdamState,
    rng: StreamRng,
    epoch: usize,
    best_metric: Option<f64>,
    wait: usize,
}

impl Trainer {
    pub fn new(model: Model, optim: OptimConfig, seeds: &Seeds) -> Result<Self> {
        optim.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            optim,
            adam,
            rng: seeds.stream("train"),
            epoch: 0,
            best_metric: None,
            wait: 0,
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.optim_cfg.validate()?;
        Ok(Self {
            model: c.model()?,
            optim: c.optim_cfg.clone(),
            adam: c.adam.clone(),
            rng: c.rng.restore(),
            epoch: c.epoch,
            best_metric: c.best_metric,
            wait: c.wait,
        })
    }

    pub fn checkpoint(&self, metric: Option<f64>) -> Checkpoint {
        Checkpoint {
            model_cfg: self.model.config().clone(),
            optim_cfg: self.optim.clone(),
            epoch: self.epoch,
            metric,
            best_metric: self.best_metric,
            wait: self.wait,
            rng: StreamState::capture(&self.rng),
            params: self.model.params().clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Loss and gradients of one batch, without updating anything.
    pub fn loss_and_grads(
        &mut self,
        data: &Dataset,
        batch: &[Target],
    ) -> Result<(f64, NamedGrads)> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let loss =
            masked_next_event_loss(&self.model, &mut tape, &bound, data, batch, &mut self.rng)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("loss became {lv}")));
        }
        tape.backward(loss)?;
        let grads = self.model.params().gradients(&tape, &bound)?;
        Ok((lv, grads))
    }

    /// One optimizer step on `batch`; returns the batch loss before the step.
    pub fn step(&mut self, data: &Dataset, batch: &[Target]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(data, batch)?;
        adam_step(self.model.params_mut(), &grads, &mut self.adam, &self.optim)?;
        Ok(loss)
    }

    /// Shuffles the targets and runs one pass; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let mut all = targets(data);
        if all.is_empty() {
            return Err(Error::input("training set has no targets"));
        }
        all.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut n = 0;
        for batch in all.chunks(self.optim.batch_size) {
            total += self.step(data, batch)?;
            n += 1;
        }
        self.epoch += 1;
        Ok(total / n as f64)
    }

    /// Records a validation value; returns whether it is a new best.
    fn observe(&mut self, metric: f64) -> bool {
        if self.best_metric.is_none_or(|b| metric > b) {
            self.best_metric = Some(metric);
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation value (or the last good state
    /// when training aborted before any validation).
    pub best: Checkpoint,
    pub valid: MetricReport,
    pub test: MetricReport,
    pub log: Vec<EpochLog>,
    /// Diagnostic when training stopped on a numerical failure.
    pub aborted: Option<String>,
}

/// Fills the period range from the training gaps when the config leaves it open.
pub fn resolve_time_scale(cfg: &ModelConfig, train: &Dataset) -> ModelConfig {
    let mut cfg = cfg.clone();
    if cfg.tau_min.is_none() || cfg.tau_max.is_none() {
        let (lo, hi) = gap_range(&train.sequences).unwrap_or((1.0, 2.0));
        cfg.tau_min.get_or_insert(lo);
        cfg.tau_max.get_or_insert(hi);
    }
    cfg
}

/// Early-stopped training. Stops after `patience` epochs without a new best
/// monitored validation value, or at `max_epochs`; test metrics come from
/// the best checkpoint. `on_epoch` sees every log line as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    optim: &OptimConfig,
    train_set: &Dataset,
    valid_set: &Dataset,
    test_set: &Dataset,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint),
) -> Result<TrainOutcome> {
    let seeds = Seeds::new(seed);
    let cfg = resolve_time_scale(model_cfg, train_set);
    let model = Model::init(&cfg, &seeds)?;
    let mut trainer = Trainer::new(model, optim.clone(), &seeds)?;
    let mut best = trainer.checkpoint(None);
    let mut log = Vec::new();
    let mut aborted = None;
    while trainer.epoch < optim.max_epochs {
        let start = Instant::now();
        let loss = match trainer.run_epoch(train_set) {
            Ok(l) => l,
            Err(Error::Numerical(msg)) => {
                warn!("training aborted in epoch {}: {msg}", trainer.epoch + 1);
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let report = evaluate(trainer.model(), valid_set)?;
        let metric = optim.monitor.read(&report);
        let improved = trainer.observe(metric);
        let line = EpochLog {
            epoch: trainer.epoch,
            train_loss: loss,
            valid_metric: metric,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {:>3}  loss {:.4}  valid {:.4}  {:.1}s{}",
            line.epoch,
            line.train_loss,
            line.valid_metric,
            line.seconds,
            if improved { "  *" } else { "" }
        );
        let current = trainer.checkpoint(Some(metric));
        if improved {
            best = current.clone();
        }
        on_epoch(&line, &current);
        log.push(line);
        if trainer.wait >= optim.patience {
            info!("no improvement for {} epochs, stopping", trainer.wait);
            break;
        }
    }
    let best_model = best.model()?;
    Ok(TrainOutcome {
        valid: evaluate(&best_model, valid_set)?,
        test: evaluate(&best_model, test_set)?,
        best,
        log,
        aborted,
    })
}

/// `n` uniform-logit rows as a tensor, handy for loss sanity checks.
pub fn uniform_logits(rows: usize, vocab: usize) -> Result<Tensor> {
    Tensor::zeros(vec![rows, vocab])
}
