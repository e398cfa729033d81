//! Masked self-attention next-event predictor.
//!
//! Each input row is an event embedding concatenated with a time
//! representation: either `Φ(t̃_i)` of the lag `t̃_i = t_target − t_i`, or a
//! learned positional vector for the ablation baseline. An interaction layer
//! projects the rows to the model width, attention blocks mix them causally,
//! and the last position is scored against the event table.
//!
//! Every prediction target gets its own window of the last `L` events, so a
//! batch is a stack of `B` left-padded `L`-row windows. The final block only
//! queries the last row of each window.

use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data_synth::EventSequence;
use crate::embedding::{init_frequencies_geometric, EmbedderSpec, TimeEmbedding};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamSet};
use crate::rng::{Seeds, StreamRng};

/// How times enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedderKind {
    #[serde(rename = "mercer")]
    Mercer,
    #[serde(rename = "bochner-normal")]
    BochnerNormal,
    #[serde(rename = "bochner-invcdf")]
    BochnerInvCdf,
    #[serde(rename = "bochner-nonparam")]
    BochnerNonParam,
    #[serde(rename = "posenc")]
    PosEnc,
}

impl EmbedderKind {
    pub const ALL: [EmbedderKind; 5] = [
        EmbedderKind::Mercer,
        EmbedderKind::BochnerNormal,
        EmbedderKind::BochnerInvCdf,
        EmbedderKind::BochnerNonParam,
        EmbedderKind::PosEnc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbedderKind::Mercer => "mercer",
            EmbedderKind::BochnerNormal => "bochner-normal",
            EmbedderKind::BochnerInvCdf => "bochner-invcdf",
            EmbedderKind::BochnerNonParam => "bochner-nonparam",
            EmbedderKind::PosEnc => "posenc",
        }
    }
}

impl FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbedderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown embedder '{s}'")))
    }
}

impl std::fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    /// `[Z, Z_T] W₀ + b₀`
    Linear,
    /// `ReLU([Z, Z_T] W₀ + b₀) W₁ + b₁`
    MlpRelu,
}

/// Model hyperparameters. Serialized as a flat TOML table with these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Event embedding width; also the model width, since the output head
    /// shares the event table.
    pub event_dim: usize,
    pub embedder: EmbedderKind,
    /// Bochner sample count, or number of Mercer base frequencies. The
    /// positional baseline uses `2d` dimensions to match Bochner width.
    pub d: usize,
    /// Mercer Fourier degree (harmonics per base frequency).
    pub k: usize,
    pub intercept: bool,
    /// Share one coefficient between the cosine and sine of each harmonic.
    pub tied: bool,
    pub train_freqs: bool,
    /// Period range for geometric frequency init; filled from the training
    /// gaps when unset.
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub normal_mu: f64,
    pub normal_sigma: f64,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub interaction: Interaction,
    pub hidden: usize,
    pub max_seq_len: usize,
    pub negative_samples: usize,
    pub residual: bool,
    pub dropout: f64,
    /// Standard deviation of the event table at init.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            event_dim: 24,
            embedder: EmbedderKind::Mercer,
            d: 8,
            k: 5,
            intercept: true,
            tied: false,
            train_freqs: false,
            tau_min: None,
            tau_max: None,
            normal_mu: 0.0,
            normal_sigma: 1.0,
            num_blocks: 1,
            num_heads: 1,
            interaction: Interaction::MlpRelu,
            hidden: 48,
            max_seq_len: 4,
            negative_samples: 100,
            residual: true,
            dropout: 0.0,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.event_dim == 0 || self.hidden == 0 {
            return bad("event_dim and hidden must be positive");
        }
        if !(1..=3).contains(&self.num_blocks) {
            return bad("num_blocks must be 1, 2 or 3");
        }
        if self.num_heads == 0 || !self.event_dim.is_multiple_of(self.num_heads) {
            return bad("num_heads must divide event_dim");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if self.d == 0 {
            return bad("d must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.vocab_size > 1000
            && (self.negative_samples == 0 || self.negative_samples >= self.vocab_size)
        {
            return bad("negative_samples must lie in [1, vocab_size)");
        }
        if let (Some(a), Some(b)) = (self.tau_min, self.tau_max) {
            if !(a > 0.0 && a < b) {
                return bad("need 0 < tau_min < tau_max");
            }
        }
        if let Some(spec) = self.embedder_spec() {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn embedder_spec(&self) -> Option<EmbedderSpec> {
        let d = self.d;
        match self.embedder {
            EmbedderKind::Mercer => Some(EmbedderSpec::Mercer {
                n_freq: d,
                jmax: self.k,
                intercept: self.intercept,
                tied: self.tied,
                train_freqs: self.train_freqs,
            }),
            EmbedderKind::BochnerNormal => Some(EmbedderSpec::BochnerNormal { d }),
            EmbedderKind::BochnerInvCdf => Some(EmbedderSpec::BochnerInvCdf { d }),
            EmbedderKind::BochnerNonParam => Some(EmbedderSpec::BochnerNonParam { d }),
            EmbedderKind::PosEnc => None,
        }
    }

    pub fn time_dim(&self) -> usize {
        self.embedder_spec().map_or(2 * self.d, |s| s.dim())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// `t̃_i = target − t_i`.
pub fn lag_transform(times: &[f64], target_time: f64) -> Result<Vec<f64>> {
    if let Some(&last) = times.last() {
        if target_time < last {
            return Err(Error::input(format!(
                "target time {target_time} precedes last event time {last}"
            )));
        }
    }
    Ok(times.iter().map(|t| target_time - t).collect())
}

/// One prediction: the events observed so far and the time being asked about.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub events: &'a [usize],
    pub times: &'a [f64],
    pub target_time: f64,
}

impl<'a> Query<'a> {
    pub fn new(seq: &'a EventSequence, target_time: f64) -> Self {
        Self {
            events: &seq.events,
            times: &seq.times,
            target_time,
        }
    }

    /// Predict event `i` of `seq` from the events before it.
    pub fn next_of(seq: &'a EventSequence, i: usize) -> Self {
        Self {
            events: &seq.events[..i],
            times: &seq.times[..i],
            target_time: seq.times[i],
        }
    }
}

/// Output of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Final-block, head-averaged attention of the last position over the
    /// window (oldest first).
    pub attention: Vec<f64>,
}

/// Tape handles produced by [`Model::represent`].
pub struct Represented {
    /// `B × event_dim` representation of each query's last position.
    pub last: Var,
    /// `B × L` final-block attention (padding columns are exactly 0).
    pub attention: Var,
    /// Number of real (non-padding) rows per window.
    pub lens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
}

fn uniform(rng: &mut StreamRng, fan_in: usize, rows: usize, cols: usize) -> Result<Tensor> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
    )
}

fn normal(rng: &mut StreamRng, std: f64, rows: usize, cols: usize) -> Result<Tensor> {
    let n = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| n.sample(rng)).collect(),
    )
}

impl Model {
    /// Fresh parameters drawn from `seeds` (streams `init/*`).
    pub fn init(cfg: &ModelConfig, seeds: &Seeds) -> Result<Self> {
        cfg.validate()?;
        let (v, de, h) = (cfg.vocab_size, cfg.event_dim, cfg.hidden);
        let din = de + cfg.time_dim();
        let mut params = ParamSet::new();

        let mut rng = seeds.stream("init/event");
        params.insert("event.z", normal(&mut rng, cfg.init_scale, v, de)?, true);

        let mut rng = seeds.stream("init/time");
        let time = match cfg.embedder {
            EmbedderKind::PosEnc => {
                params.insert(
                    "pos.p",
                    normal(&mut rng, 0.1, cfg.max_seq_len, cfg.time_dim())?,
                    true,
                );
                None
            }
            EmbedderKind::BochnerNormal => Some(TimeEmbedding::bochner_normal(
                cfg.d,
                cfg.normal_mu,
                cfg.normal_sigma,
                &mut rng,
            )?),
            EmbedderKind::BochnerInvCdf => Some(TimeEmbedding::bochner_inv_cdf(cfg.d, &mut rng)?),
            EmbedderKind::BochnerNonParam => {
                let init = init_frequencies_geometric(tau_min(cfg)?, tau_max(cfg)?, cfg.d)?;
                Some(TimeEmbedding::bochner_nonparam(init.frequencies)?)
            }
            EmbedderKind::Mercer => {
                let init = init_frequencies_geometric(tau_min(cfg)?, tau_max(cfg)?, cfg.d)?;
                // unit self-kernel at init, like the Bochner families
                let per = cfg.k + usize::from(cfg.intercept);
                let c = 1.0 / ((cfg.d * per) as f64).sqrt();
                Some(TimeEmbedding::mercer(
                    init.frequencies,
                    cfg.k,
                    cfg.intercept,
                    cfg.tied,
                    cfg.train_freqs,
                    c.sqrt(),
                )?)
            }
        };
        if let Some(t) = time {
            params.extend(t.into_params());
        }

        let mut rng = seeds.stream("init/interaction");
        match cfg.interaction {
            Interaction::Linear => {
                params.insert("inter.w0", uniform(&mut rng, din, din, de)?, true);
                params.insert("inter.b0", Tensor::zeros(vec![1, de])?, true);
            }
            Interaction::MlpRelu => {
                params.insert("inter.w0", uniform(&mut rng, din, din, h)?, true);
                params.insert("inter.b0", Tensor::zeros(vec![1, h])?, true);
                params.insert("inter.w1", uniform(&mut rng, h, h, de)?, true);
                params.insert("inter.b1", Tensor::zeros(vec![1, de])?, true);
            }
        }

        for b in 0..cfg.num_blocks {
            let mut rng = seeds.stream(&format!("init/block{b}"));
            for w in ["q", "k", "v"] {
                params.insert(
                    format!("block{b}.w{w}"),
                    uniform(&mut rng, de, de, de)?,
                    true,
                );
                params.insert(format!("block{b}.b{w}"), Tensor::zeros(vec![1, de])?, true);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Rebuilds a model from saved arrays, checking every expected array is
    /// present with the right shape.
    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut probe = cfg.clone();
        probe.tau_min = Some(probe.tau_min.unwrap_or(1.0));
        probe.tau_max = Some(probe.tau_max.unwrap_or(2.0));
        let reference = Model::init(&probe, &Seeds::new(0))?;
        for p in reference.params.iter() {
            let got = params
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {}", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {} has shape {:?}, config expects {:?}",
                    p.name,
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(
                "checkpoint holds arrays the config does not use".into(),
            ));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// The time embedder with its current parameters (`None` for the baseline).
    pub fn time_embedding(&self) -> Result<Option<TimeEmbedding>> {
        let Some(spec) = self.cfg.embedder_spec() else {
            return Ok(None);
        };
        let mut ps = ParamSet::new();
        for p in self.params.iter().filter(|p| p.name.starts_with("time.")) {
            ps.insert(p.name.clone(), p.value.clone(), p.trainable);
        }
        TimeEmbedding::from_parts(spec, ps).map(Some)
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        if q.events.is_empty() {
            return Err(Error::input("query has no events"));
        }
        if q.events.len() != q.times.len() {
            return Err(Error::input("events and times differ in length"));
        }
        if let Some(&e) = q.events.iter().find(|&&e| e >= self.cfg.vocab_size) {
            return Err(Error::input(format!(
                "unknown event id {e} (vocabulary {})",
                self.cfg.vocab_size
            )));
        }
        if !q.target_time.is_finite() {
            return Err(Error::input("target time must be finite"));
        }
        if q.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::input("times must be non-decreasing"));
        }
        lag_transform(q.times, q.target_time)?;
        Ok(())
    }

    /// Additive attention mask: `0` where row may look, `-∞` elsewhere.
    /// Real rows see real rows at or before them; padding rows see only
    /// themselves so no softmax row is empty.
    fn mask(&self, lens: &[usize], last_only: bool) -> Result<Tensor> {
        let l = self.cfg.max_seq_len;
        let rows_per = if last_only { 1 } else { l };
        let mut m = vec![f64::NEG_INFINITY; lens.len() * rows_per * l];
        for (b, &len) in lens.iter().enumerate() {
            let pad = l - len;
            for r in 0..rows_per {
                let i = if last_only { l - 1 } else { r };
                let row = &mut m[(b * rows_per + r) * l..(b * rows_per + r + 1) * l];
                if i < pad {
                    row[i] = 0.0;
                } else {
                    row[pad..=i].iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Tensor::matrix(lens.len() * rows_per, l, m)
    }

    /// Scaled dot-product attention over `blocks` stacked windows of `L` rows,
    /// with the residual connection when enabled. With `last_only`, only the
    /// last row of every window is queried. Returns the output rows and the
    /// head-averaged attention weights.
    fn attention(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        block: usize,
        h: Var,
        lens: &[usize],
        last_only: bool,
    ) -> Result<(Var, Var)> {
        let l = self.cfg.max_seq_len;
        let nb = lens.len();
        let hq = if last_only {
            let idx: Vec<usize> = (0..nb).map(|b| b * l + l - 1).collect();
            tape.gather_rows(h, &idx)?
        } else {
            h
        };
        let proj = |tape: &mut Tape, x: Var, w: &str| -> Result<Var> {
            let y = tape.matmul(x, bound.get(&format!("block{block}.w{w}"))?)?;
            tape.add_row(y, bound.get(&format!("block{block}.b{w}"))?)
        };
        let q = proj(tape, hq, "q")?;
        let k = proj(tape, h, "k")?;
        let v = proj(tape, h, "v")?;
        let mask = tape.constant(self.mask(lens, last_only)?);
        let heads = self.cfg.num_heads;
        let dh = self.cfg.event_dim / heads;
        let mut outs = Vec::with_capacity(heads);
        let mut att: Option<Var> = None;
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                (
                    tape.slice_cols(q, a, b)?,
                    tape.slice_cols(k, a, b)?,
                    tape.slice_cols(v, a, b)?,
                )
            };
            let s = tape.block_matmul_nt(qh, kh, nb)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let s = tape.add(s, mask)?;
            let p = tape.softmax_rows(s);
            outs.push(tape.block_matmul(p, vh, nb)?);
            att = Some(match att {
                None => p,
                Some(a) => tape.add(a, p)?,
            });
        }
        let att = tape.scale(att.expect("at least one head"), 1.0 / heads as f64);
        let mut out = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        if self.cfg.residual {
            out = tape.add(out, hq)?;
        }
        Ok((out, att))
    }

    /// Records the model on `tape` for a batch of queries. `dropout_rng`
    /// switches on training-mode dropout after the interaction layer.
    pub fn represent(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        queries: &[Query],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Represented> {
        if queries.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let l = self.cfg.max_seq_len;
        let mut ids = Vec::with_capacity(queries.len() * l);
        let mut lags = Vec::with_capacity(queries.len() * l);
        let mut lens = Vec::with_capacity(queries.len());
        for q in queries {
            self.check_query(q)?;
            let start = q.events.len().saturating_sub(l);
            let len = q.events.len() - start;
            ids.extend(std::iter::repeat_n(0, l - len));
            lags.extend(std::iter::repeat_n(0.0, l - len));
            ids.extend_from_slice(&q.events[start..]);
            lags.extend(q.times[start..].iter().map(|t| q.target_time - t));
            lens.push(len);
        }

        let z = bound.get("event.z")?;
        let ev = tape.gather_rows(z, &ids)?;
        let time = match self.cfg.embedder_spec() {
            None => {
                let slots: Vec<usize> = (0..queries.len()).flat_map(|_| 0..l).collect();
                tape.gather_rows(bound.get("pos.p")?, &slots)?
            }
            Some(spec) => {
                let t = tape.constant(Tensor::column(lags)?);
                TimeEmbedding::spec_view(spec).embed_on_tape(tape, bound, t)?
            }
        };
        let h0 = tape.concat_cols(&[ev, time])?;

        let u = tape.matmul(h0, bound.get("inter.w0")?)?;
        let u = tape.add_row(u, bound.get("inter.b0")?)?;
        let mut h = match self.cfg.interaction {
            Interaction::Linear => u,
            Interaction::MlpRelu => {
                let a = tape.relu(u);
                let o = tape.matmul(a, bound.get("inter.w1")?)?;
                let o = tape.add_row(o, bound.get("inter.b1")?)?;
                if self.cfg.residual {
                    tape.add(o, ev)?
                } else {
                    o
                }
            }
        };
        if let Some(rng) = dropout_rng {
            let p = self.cfg.dropout;
            if p > 0.0 {
                let (m, n) = tape.value(h).dims2();
                let keep: Vec<f64> = (0..m * n)
                    .map(|_| {
                        if rng.random::<f64>() < p {
                            0.0
                        } else {
                            1.0 / (1.0 - p)
                        }
                    })
                    .collect();
                let keep = tape.constant(Tensor::matrix(m, n, keep)?);
                h = tape.mul(h, keep)?;
            }
        }

        let nb = self.cfg.num_blocks;
        for b in 0..nb - 1 {
            h = self.attention(tape, bound, b, h, &lens, false)?.0;
        }
        let (last, attention) = self.attention(tape, bound, nb - 1, h, &lens, true)?;
        Ok(Represented {
            last,
            attention,
            lens,
        })
    }

    /// `B × V` scores of every event against the representations.
    pub fn logits_on_tape(&self, tape: &mut Tape, bound: &Bindings, last: Var) -> Result<Var> {
        let z = bound.get("event.z")?;
        let zt = tape.transpose(z);
        tape.matmul(last, zt)
    }

    /// Logits and attention for a batch, with frozen parameters.
    pub fn predict_batch(&self, queries: &[Query]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let rep = self.represent(&mut tape, &bound, queries, None)?;
        let logits = self.logits_on_tape(&mut tape, &bound, rep.last)?;
        let (lv, av) = (tape.value(logits), tape.value(rep.attention));
        let l = self.cfg.max_seq_len;
        Ok(rep
            .lens
            .iter()
            .enumerate()
            .map(|(b, &len)| Prediction {
                logits: lv.row_slice(b).to_vec(),
                attention: av.row_slice(b)[l - len..].to_vec(),
            })
            .collect())
    }

    /// Scores for the event following `seq`, asked at `candidate_target_time`.
    pub fn forward(&self, seq: &EventSequence, candidate_target_time: f64) -> Result<Prediction> {
        let q = Query::new(seq, candidate_target_time);
        Ok(self.predict_batch(&[q])?.remove(0))
    }

    /// Attention of the last position over the window, one row per target
    /// time. Columns are the last `min(len, L)` events, oldest first.
    pub fn export_attention(&self, seq: &EventSequence, target_times: &[f64]) -> Result<Tensor> {
        if target_times.is_empty() {
            return Err(Error::input("no target times"));
        }
        if target_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::input("target times must be ascending"));
        }
        let queries: Vec<Query> = target_times.iter().map(|&t| Query::new(seq, t)).collect();
        let preds = self.predict_batch(&queries)?;
        let cols = preds[0].attention.len();
        Tensor::matrix(
            preds.len(),
            cols,
            preds.into_iter().flat_map(|p| p.attention).collect(),
        )
    }

    /// One attention block applied to a single `q × event_dim` sequence with
    /// a causal mask; returns the output rows and the `q × q` weights.
    pub fn attention_block(&self, block: usize, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let (q, w) = h.dims2();
        if q > self.cfg.max_seq_len {
            return Err(Error::input(format!(
                "sequence of {q} rows exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        if w != self.cfg.event_dim || block >= self.cfg.num_blocks {
            return Err(Error::Dimension {
                op: "attention_block",
                lhs: h.shape().to_vec(),
                rhs: vec![q, self.cfg.event_dim],
            });
        }
        // left-pad to a full window and drop the padding afterwards
        let l = self.cfg.max_seq_len;
        let mut data = vec![0.0; (l - q) * w];
        data.extend_from_slice(h.data());
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let hv = tape.constant(Tensor::matrix(l, w, data)?);
        let (out, att) = self.attention(&mut tape, &bound, block, hv, &[q], false)?;
        let out = tape.slice_rows(out, l - q, l)?;
        let att = tape.slice_rows(att, l - q, l)?;
        let att = tape.slice_cols(att, l - q, l)?;
        Ok((tape.value(out).clone(), tape.value(att).clone()))
    }
}

fn tau_min(cfg: &ModelConfig) -> Result<f64> {
    cfg.tau_min
        .ok_or_else(|| Error::config("tau_min is required to initialise frequencies"))
}

fn tau_max(cfg: &ModelConfig) -> Result<f64> {
    cfg.tau_max
        .ok_or_else(|| Error::config("tau_max is required to initialise frequencies"))
}

/// Smallest and largest positive gap between consecutive events.
pub fn gap_range<'a>(seqs: impl IntoIterator<Item = &'a EventSequence>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for s in seqs {
        for w in s.times.windows(2) {
            let g = w[1] - w[0];
            if g > 0.0 {
                lo = lo.min(g);
                hi = hi.max(g);
            }
        }
    }
    if lo.is_finite() && hi > lo {
        Some((lo, hi))
    } else {
        warn!("no usable gaps to set the period range");
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: EmbedderKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            event_dim: 8,
            embedder: kind,
            d: 3,
            k: 2,
            hidden: 6,
            max_seq_len: 4,
            tau_min: Some(0.5),
            tau_max: Some(20.0),
            init_scale: 0.5,
            ..ModelConfig::default()
        }
    }

    fn seq() -> EventSequence {
        EventSequence::new(vec![1, 3, 0, 4, 2], vec![0.0, 0.4, 1.9, 2.0, 5.5]).unwrap()
    }

    #[test]
    fn lag_examples() {
        assert_eq!(
            lag_transform(&[1.0, 2.0, 5.0], 5.0).unwrap(),
            vec![4.0, 3.0, 0.0]
        );
        assert!(lag_transform(&[1.0, 2.0, 5.0], 4.0).is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = cfg(EmbedderKind::BochnerInvCdf);
        let text = c.to_toml_string().unwrap();
        assert!(text.contains("embedder = \"bochner-invcdf\""));
        assert_eq!(ModelConfig::from_toml_str(&text).unwrap(), c);
        assert!(ModelConfig::from_toml_str("num_heads = 5\n").is_err());
        assert!(ModelConfig::from_toml_str("bogus = 1\n").is_err());
        let partial = ModelConfig::from_toml_str("embedder = \"posenc\"\nd = 4\n").unwrap();
        assert_eq!(partial.embedder, EmbedderKind::PosEnc);
        assert_eq!(partial.time_dim(), 8);
    }

    #[test]
    fn forward_is_deterministic() {
        for kind in EmbedderKind::ALL {
            let m1 = Model::init(&cfg(kind), &Seeds::new(4)).unwrap();
            let m2 = Model::init(&cfg(kind), &Seeds::new(4)).unwrap();
            let a = m1.forward(&seq(), 6.0).unwrap();
            let b = m2.forward(&seq(), 6.0).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.logits.len(), 5);
            assert!((a.attention.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert_eq!(a.attention.len(), 4);
        }
    }

    #[test]
    fn unknown_event_rejected() {
        let m = Model::init(&cfg(EmbedderKind::Mercer), &Seeds::new(1)).unwrap();
        let bad = EventSequence {
            events: vec![1, 9],
            times: vec![0.0, 1.0],
        };
        assert!(matches!(m.forward(&bad, 2.0), Err(Error::Input(_))));
        assert!(matches!(m.forward(&seq(), 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn positional_baseline_ignores_time_values() {
        let m = Model::init(&cfg(EmbedderKind::PosEnc), &Seeds::new(2)).unwrap();
        let s = seq();
        let scaled = EventSequence {
            events: s.events.clone(),
            times: s.times.iter().map(|t| 10.0 * t).collect(),
        };
        assert_eq!(
            m.forward(&s, 6.0).unwrap(),
            m.forward(&scaled, 60.0).unwrap()
        );
    }

    #[test]
    fn time_models_depend_on_target_time() {
        for kind in EmbedderKind::ALL
            .into_iter()
            .filter(|k| *k != EmbedderKind::PosEnc)
        {
            let m = Model::init(&cfg(kind), &Seeds::new(2)).unwrap();
            let a = m.forward(&seq(), 5.6).unwrap().logits;
            let b = m.forward(&seq(), 9.0).unwrap().logits;
            assert_ne!(a, b, "{kind}");
        }
    }

    #[test]
    fn single_event_attention_is_one() {
        let m = Model::init(&cfg(EmbedderKind::BochnerNonParam), &Seeds::new(3)).unwrap();
        let s = EventSequence::new(vec![2], vec![1.0]).unwrap();
        let att = m.export_attention(&s, &[1.0, 2.0, 30.0]).unwrap();
        assert_eq!(att.shape(), &[3, 1]);
        assert!(att.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
        let att = m.export_attention(&seq(), &[5.5, 6.0, 9.0, 40.0]).unwrap();
        for r in 0..4 {
            assert!((att.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert!(m.export_attention(&seq(), &[9.0, 6.0]).is_err());
    }

    #[test]
    fn attention_block_examples() {
        let mut c = cfg(EmbedderKind::Mercer);
        c.residual = false;
        let m = Model::init(&c, &Seeds::new(5)).unwrap();
        // one row: softmax over one key is 1, output is the value projection
        let h = Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (out, att) = m.attention_block(0, &h).unwrap();
        assert_eq!(att.data(), &[1.0]);
        let wv = m.params().value("block0.wv").unwrap();
        let bv = m.params().value("block0.bv").unwrap();
        for j in 0..8 {
            let want: f64 = (0..8).map(|i| h.data()[i] * wv.get(i, j)).sum::<f64>() + bv.data()[j];
            assert!((out.data()[j] - want).abs() < 1e-12);
        }

        // identical rows: row i spreads 1/(i+1) over visible positions
        let h = Tensor::matrix(3, 8, [0.3; 24].to_vec()).unwrap();
        let (_, att) = m.attention_block(0, &h).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((att.get(i, j) - want).abs() < 1e-15);
            }
        }

        // perturbing a later row leaves earlier rows alone
        let base =
            Tensor::matrix(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut moved = base.clone();
        moved.data_mut()[16..].iter_mut().for_each(|x| *x += 5.0);
        let (o1, _) = m.attention_block(0, &base).unwrap();
        let (o2, _) = m.attention_block(0, &moved).unwrap();
        for i in 0..16 {
            assert!((o1.data()[i] - o2.data()[i]).abs() <= 1e-12);
        }
        let too_long = Tensor::matrix(5, 8, vec![0.0; 40]).unwrap();
        assert!(matches!(
            m.attention_block(0, &too_long),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn windows_left_truncate() {
        let mut c = cfg(EmbedderKind::Mercer);
        c.max_seq_len = 2;
        let m = Model::init(&c, &Seeds::new(8)).unwrap();
        let long = seq();
        let short =
            EventSequence::new(long.events[3..].to_vec(), long.times[3..].to_vec()).unwrap();
        assert_eq!(
            m.forward(&long, 7.0).unwrap(),
            m.forward(&short, 7.0).unwrap()
        );
    }

    #[test]
    fn from_parts_checks_shapes() {
        let c = cfg(EmbedderKind::Mercer);
        let m = Model::init(&c, &Seeds::new(1)).unwrap();
        assert!(Model::from_parts(c.clone(), m.params().clone()).is_ok());
        let mut other = c.clone();
        other.event_dim = 4;
        assert!(matches!(
            Model::from_parts(other, m.params().clone()),
            Err(Error::Checkpoint(_))
        ));
    }
}
