//! Functional time embeddings.
//!
//! Four families map a time scalar `t` to a vector `Φ(t)` whose inner
//! products define a translation-invariant kernel of the time difference:
//!
//! * `BochnerNormal`: random Fourier features with frequencies
//!   `ω_i = μ + σ ε_i`, `ε_i ~ N(0, 1)` frozen at construction.
//! * `BochnerInvCdf`: frequencies `ω_i = g_θ(u_i)`, a small ReLU network
//!   applied to frozen uniform draws.
//! * `BochnerNonParam`: the frequencies themselves are free parameters.
//! * `Mercer`: truncated Fourier series of `n_freq` periodic kernels, each block
//!   `[√c₀, √c₁cos(πωt), √c₂sin(πωt), …, √c cos(Jπωt), √c sin(Jπωt)]`.
//!
//! Bochner families use `d` frequency samples and produce `2d` features
//! ordered `[cos ω₁t, sin ω₁t, cos ω₂t, …]`, scaled by `√(1/d)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, NamedGrads, ParamSet};

pub const INV_CDF_HIDDEN: usize = 32;

/// Which family, with its structural hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum EmbedderSpec {
    BochnerNormal {
        d: usize,
    },
    BochnerInvCdf {
        d: usize,
    },
    BochnerNonParam {
        d: usize,
    },
    Mercer {
        n_freq: usize,
        jmax: usize,
        intercept: bool,
        tied: bool,
        train_freqs: bool,
    },
}

impl EmbedderSpec {
    pub fn dim(&self) -> usize {
        match *self {
            EmbedderSpec::BochnerNormal { d }
            | EmbedderSpec::BochnerInvCdf { d }
            | EmbedderSpec::BochnerNonParam { d } => 2 * d,
            EmbedderSpec::Mercer {
                n_freq,
                jmax,
                intercept,
                ..
            } => n_freq * (2 * jmax + usize::from(intercept)),
        }
    }

    pub fn is_bochner(&self) -> bool {
        !matches!(self, EmbedderSpec::Mercer { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EmbedderSpec::BochnerNormal { d }
            | EmbedderSpec::BochnerInvCdf { d }
            | EmbedderSpec::BochnerNonParam { d } => {
                if d == 0 {
                    return Err(Error::config("Bochner sample count d must be >= 1"));
                }
            }
            EmbedderSpec::Mercer {
                n_freq,
                jmax,
                intercept,
                ..
            } => {
                if n_freq == 0 {
                    return Err(Error::config("Mercer needs n_freq >= 1 base frequencies"));
                }
                if jmax == 0 && !intercept {
                    return Err(Error::config("Mercer with jmax = 0 needs the intercept"));
                }
            }
        }
        Ok(())
    }
}

/// Periods and frequencies for geometric frequency initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricInit {
    pub periods: Vec<f64>,
    pub frequencies: Vec<f64>,
    /// The span `tau_max - tau_min` was `<= 1` and log-spaced periods were used.
    pub degenerate: bool,
}

/// `τ_i = τ_min + (τ_max − τ_min)^{i/n}` for `i = 1..=n`, evaluated as written.
pub fn geometric_periods(tau_min: f64, tau_max: f64, n: usize) -> Result<Vec<f64>> {
    check_period_range(tau_min, tau_max, n)?;
    let span = tau_max - tau_min;
    Ok((1..=n)
        .map(|i| tau_min + span.powf(i as f64 / n as f64))
        .collect())
}

fn check_period_range(tau_min: f64, tau_max: f64, n: usize) -> Result<()> {
    if !(tau_min.is_finite() && tau_max.is_finite()) || tau_min <= 0.0 {
        return Err(Error::config(format!(
            "periods must be finite and positive, got [{tau_min}, {tau_max}]"
        )));
    }
    if tau_min >= tau_max {
        return Err(Error::config(format!(
            "tau_min ({tau_min}) must be below tau_max ({tau_max})"
        )));
    }
    if n == 0 {
        return Err(Error::config("need at least one frequency"));
    }
    Ok(())
}

/// Geometric period sequence covering `[tau_min, tau_max]`, as frequencies `1/τ`.
///
/// When the span is at most 1 the power formula collapses (every period lands
/// near `tau_min + 1`), so log-spaced periods `τ_min (τ_max/τ_min)^{i/n}` are
/// used instead and a warning is logged.
pub fn init_frequencies_geometric(tau_min: f64, tau_max: f64, n: usize) -> Result<GeometricInit> {
    check_period_range(tau_min, tau_max, n)?;
    let degenerate = tau_max - tau_min <= 1.0;
    let periods = if degenerate {
        log::warn!(
            "period span {tau_min}..{tau_max} is <= 1; geometric formula degenerates, using log spacing"
        );
        let ratio = tau_max / tau_min;
        (1..=n)
            .map(|i| tau_min * ratio.powf(i as f64 / n as f64))
            .collect()
    } else {
        geometric_periods(tau_min, tau_max, n)?
    };
    let frequencies = periods.iter().map(|p| 1.0 / p).collect();
    Ok(GeometricInit {
        periods,
        frequencies,
        degenerate,
    })
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y − 1), stable for large y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// A time embedder: family spec plus its parameter arrays (names prefixed `time.`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    spec: EmbedderSpec,
    params: ParamSet,
}

impl TimeEmbedding {
    /// Normal spectral density, `σ > 0` kept positive through a softplus.
    pub fn bochner_normal(d: usize, mu: f64, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let spec = EmbedderSpec::BochnerNormal { d };
        spec.validate()?;
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::config(format!(
                "need finite mu and sigma > 0, got {mu}, {sigma}"
            )));
        }
        let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let mut params = ParamSet::new();
        params.insert("time.mu", Tensor::scalar(mu), true);
        params.insert(
            "time.sigma_raw",
            Tensor::scalar(inverse_softplus(sigma)),
            true,
        );
        params.insert("time.eps", Tensor::row(eps)?, false);
        Ok(Self { spec, params })
    }

    /// Learned inverse CDF `g_θ`: a 1→32→32→1 ReLU network with uniform init.
    pub fn bochner_inv_cdf(d: usize, rng: &mut impl Rng) -> Result<Self> {
        let spec = EmbedderSpec::BochnerInvCdf { d };
        spec.validate()?;
        let u: Vec<f64> = (0..d)
            .map(|_| rng.random_range(f64::EPSILON..1.0))
            .collect();
        let h = INV_CDF_HIDDEN;
        let mut uniform = |fan_in: usize, n: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        };
        let mut params = ParamSet::new();
        params.insert("time.u", Tensor::column(u)?, false);
        params.insert("time.g.w1", Tensor::matrix(1, h, uniform(1, h))?, true);
        params.insert("time.g.b1", Tensor::row(uniform(1, h))?, true);
        params.insert("time.g.w2", Tensor::matrix(h, h, uniform(h, h * h))?, true);
        params.insert("time.g.b2", Tensor::row(uniform(h, h))?, true);
        params.insert("time.g.w3", Tensor::matrix(h, 1, uniform(h, h))?, true);
        params.insert("time.g.b3", Tensor::row(uniform(h, 1))?, true);
        Ok(Self { spec, params })
    }

    /// Free frequencies `ω̃`.
    pub fn bochner_nonparam(omegas: Vec<f64>) -> Result<Self> {
        let spec = EmbedderSpec::BochnerNonParam { d: omegas.len() };
        spec.validate()?;
        if omegas.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("frequencies must be finite"));
        }
        let mut params = ParamSet::new();
        params.insert("time.omega", Tensor::row(omegas)?, true);
        Ok(Self { spec, params })
    }

    /// Truncated Mercer embedding over base frequencies `freqs` (ω = 1/τ).
    ///
    /// Every stored coefficient starts at `coeff_sqrt`; the effective Fourier
    /// coefficient is its square. With `tied`, the cosine and sine of the same
    /// harmonic share one coefficient, which makes the kernel exactly
    /// translation invariant.
    pub fn mercer(
        freqs: Vec<f64>,
        jmax: usize,
        intercept: bool,
        tied: bool,
        train_freqs: bool,
        coeff_sqrt: f64,
    ) -> Result<Self> {
        let spec = EmbedderSpec::Mercer {
            n_freq: freqs.len(),
            jmax,
            intercept,
            tied,
            train_freqs,
        };
        spec.validate()?;
        if freqs.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("frequencies must be finite"));
        }
        let n_coef = if tied {
            freqs.len() * (jmax + usize::from(intercept))
        } else {
            spec.dim()
        };
        let mut params = ParamSet::new();
        params.insert("time.freq", Tensor::row(freqs)?, train_freqs);
        params.insert("time.coef", Tensor::row(vec![coeff_sqrt; n_coef])?, true);
        Ok(Self { spec, params })
    }

    /// Rebuilds an embedder from a spec and previously saved arrays.
    pub fn from_parts(spec: EmbedderSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let emb = Self { spec, params };
        // a dry run validates array shapes against the spec
        emb.embed(0.0)?;
        Ok(emb)
    }

    /// Spec-only handle for evaluating on a tape whose bindings come from
    /// a larger parameter set.
    pub(crate) fn spec_view(spec: EmbedderSpec) -> Self {
        Self {
            spec,
            params: ParamSet::new(),
        }
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Current frequencies of a Bochner family (`None` for Mercer).
    pub fn bochner_frequencies(&self) -> Result<Option<Vec<f64>>> {
        if !self.spec.is_bochner() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let w = self.bochner_omega_row(&mut tape, &bound)?;
        Ok(Some(tape.value(w).data().to_vec()))
    }

    fn bochner_omega_row(&self, tape: &mut Tape, bound: &Bindings) -> Result<Var> {
        match self.spec {
            EmbedderSpec::BochnerNormal { d } => {
                let mu = bound.get("time.mu")?;
                let raw = bound.get("time.sigma_raw")?;
                let eps = bound.get("time.eps")?;
                let sigma = tape.softplus(raw);
                let ones = tape.constant(Tensor::row(vec![1.0; d])?);
                let loc = tape.matmul(mu, ones)?;
                let spread = tape.matmul(sigma, eps)?;
                tape.add(loc, spread)
            }
            EmbedderSpec::BochnerInvCdf { .. } => {
                let u = bound.get("time.u")?;
                let h1 = tape.matmul(u, bound.get("time.g.w1")?)?;
                let h1 = tape.add_row(h1, bound.get("time.g.b1")?)?;
                let h1 = tape.relu(h1);
                let h2 = tape.matmul(h1, bound.get("time.g.w2")?)?;
                let h2 = tape.add_row(h2, bound.get("time.g.b2")?)?;
                let h2 = tape.relu(h2);
                let o = tape.matmul(h2, bound.get("time.g.w3")?)?;
                let o = tape.add_row(o, bound.get("time.g.b3")?)?;
                Ok(tape.transpose(o))
            }
            EmbedderSpec::BochnerNonParam { .. } => bound.get("time.omega"),
            EmbedderSpec::Mercer { .. } => Err(Error::Contract("not a Bochner family".into())),
        }
    }

    /// Records `Φ(t)` for a column of times `t` (`R×1`) and returns the `R×dim` features.
    pub fn embed_on_tape(&self, tape: &mut Tape, bound: &Bindings, t: Var) -> Result<Var> {
        let (rows, cols) = tape.value(t).dims2();
        if cols != 1 {
            return Err(Error::Dimension {
                op: "embed",
                lhs: tape.value(t).shape().to_vec(),
                rhs: vec![rows, 1],
            });
        }
        match self.spec {
            EmbedderSpec::Mercer {
                n_freq,
                jmax,
                intercept,
                tied,
                ..
            } => self.mercer_on_tape(tape, bound, t, rows, n_freq, jmax, intercept, tied),
            _ => {
                let omega = self.bochner_omega_row(tape, bound)?;
                let d = tape.value(omega).len();
                let angles = tape.matmul(t, omega)?;
                let c = tape.cos(angles);
                let s = tape.sin(angles);
                let cs = tape.concat_cols(&[c, s])?;
                let order: Vec<usize> = (0..d).flat_map(|i| [i, d + i]).collect();
                let phi = tape.gather_cols(cs, &order)?;
                Ok(tape.scale(phi, (1.0 / d as f64).sqrt()))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mercer_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        t: Var,
        rows: usize,
        n_freq: usize,
        jmax: usize,
        intercept: bool,
        tied: bool,
    ) -> Result<Var> {
        let freq = bound.get("time.freq")?;
        let coef = bound.get("time.coef")?;
        let ic = usize::from(intercept);
        let block = 2 * jmax + ic;

        let mut parts = Vec::new();
        if intercept {
            parts.push(tape.constant(Tensor::filled(vec![rows, n_freq], 1.0)?));
        }
        if jmax > 0 {
            // harmonic matrix: column b*jmax + (m-1) carries mπ for base frequency b
            let mut harm = vec![0.0; n_freq * n_freq * jmax];
            for b in 0..n_freq {
                for m in 1..=jmax {
                    harm[b * (n_freq * jmax) + b * jmax + (m - 1)] = PI * m as f64;
                }
            }
            let harm = tape.constant(Tensor::matrix(n_freq, n_freq * jmax, harm)?);
            let scaled = tape.matmul(freq, harm)?;
            let angles = tape.matmul(t, scaled)?;
            parts.push(tape.cos(angles));
            parts.push(tape.sin(angles));
        }
        let raw = tape.concat_cols(&parts)?;

        // reorder [ones | cos | sin] into per-frequency blocks
        let cos_off = ic * n_freq;
        let sin_off = cos_off + n_freq * jmax;
        let mut order = Vec::with_capacity(n_freq * block);
        for b in 0..n_freq {
            if intercept {
                order.push(b);
            }
            for m in 0..jmax {
                order.push(cos_off + b * jmax + m);
                order.push(sin_off + b * jmax + m);
            }
        }
        let phi = tape.gather_cols(raw, &order)?;

        let coef_row = if tied {
            let per = jmax + ic;
            let mut tie = Vec::with_capacity(n_freq * block);
            for b in 0..n_freq {
                if intercept {
                    tie.push(b * per);
                }
                for m in 0..jmax {
                    tie.push(b * per + ic + m);
                    tie.push(b * per + ic + m);
                }
            }
            tape.gather_cols(coef, &tie)?
        } else {
            coef
        };
        tape.mul_row(phi, coef_row)
    }

    fn check_times(ts: &[f64]) -> Result<()> {
        if ts.is_empty() {
            return Err(Error::input("empty time grid"));
        }
        if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
            return Err(Error::input(format!("time must be finite, got {t}")));
        }
        Ok(())
    }

    /// `Φ(t)` for a single time.
    pub fn embed(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.embed_many(&[t])?.into_data())
    }

    /// `|ts| × dim` feature matrix, row `i` = `Φ(ts[i])`.
    pub fn embed_many(&self, ts: &[f64]) -> Result<Tensor> {
        Self::check_times(ts)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let t = tape.constant(Tensor::column(ts.to_vec())?);
        let phi = self.embed_on_tape(&mut tape, &bound, t)?;
        Ok(tape.value(phi).clone())
    }

    /// `⟨Φ(t1), Φ(t2)⟩`.
    pub fn kernel_estimate(&self, t1: f64, t2: f64) -> Result<f64> {
        let phi = self.embed_many(&[t1, t2])?;
        Ok(dot(phi.row_slice(0), phi.row_slice(1)))
    }

    /// Kernel estimate together with its gradient w.r.t. every trainable
    /// array and w.r.t. `(t1, t2)`.
    pub fn kernel_estimate_with_grads(
        &self,
        t1: f64,
        t2: f64,
    ) -> Result<(f64, NamedGrads, [f64; 2])> {
        Self::check_times(&[t1, t2])?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let t = tape.leaf(Tensor::column(vec![t1, t2])?.with_grad(true));
        let phi = self.embed_on_tape(&mut tape, &bound, t)?;
        let a = tape.slice_rows(phi, 0, 1)?;
        let b = tape.slice_rows(phi, 1, 2)?;
        let p = tape.mul(a, b)?;
        let k = tape.sum(p);
        tape.backward(k)?;
        let grads = self.params.gradients(&tape, &bound)?;
        let gt = tape.grad(t).expect("time leaf tracked");
        Ok((tape.value(k).data()[0], grads, [gt[0], gt[1]]))
    }

    /// Feature matrix over a grid, for visualisation.
    pub fn export_phi_matrix(&self, grid: &[f64]) -> Result<Tensor> {
        self.embed_many(grid)
    }

    /// Gram matrix `K[i][j] = ⟨Φ(grid[i]), Φ(grid[j])⟩`.
    pub fn export_gram(&self, grid: &[f64]) -> Result<Tensor> {
        let phi = self.embed_many(grid)?;
        Ok(gram_of(&phi))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Φ Φᵀ`, filled symmetrically so the result is exactly symmetric.
pub(crate) fn gram_of(phi: &Tensor) -> Tensor {
    let (n, _) = phi.dims2();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(phi.row_slice(i), phi.row_slice(j));
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    Tensor::matrix(n, n, g).expect("square gram")
}
