//! Ground-truth kernels and the numerical checks built on them.
//!
//! * the Monte-Carlo uniform-approximation bound and an empirical study of
//!   random-feature convergence against an analytic kernel,
//! * Fourier-basis eigenfunction residuals of periodic kernels, by quadrature,
//! * sup-norm decay of truncated Fourier series.

mod eigen;

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::embedding::{dot, TimeEmbedding};
use crate::error::{Error, Result};
use crate::rng::{Seeds, StreamRng};

pub use eigen::{min_eigenvalue, symmetric_eigenvalues};

type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;
type Sampler = Box<dyn Fn(&mut StreamRng) -> f64 + Send + Sync>;

/// Analytic translation-invariant kernel `ψ(t1 − t2)` with its spectral density.
pub struct KernelSpec {
    name: String,
    psi: ScalarFn,
    sampler: Sampler,
    sigma_p2: f64,
    t_max: f64,
}

impl std::fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSpec")
            .field("name", &self.name)
            .field("sigma_p2", &self.sigma_p2)
            .field("t_max", &self.t_max)
            .finish()
    }
}

impl KernelSpec {
    pub fn new(
        name: impl Into<String>,
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sampler: impl Fn(&mut StreamRng) -> f64 + Send + Sync + 'static,
        sigma_p2: f64,
        t_max: f64,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            psi: Box::new(psi),
            sampler: Box::new(sampler),
            sigma_p2,
            t_max,
        };
        if (spec.psi(0.0) - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("{}: psi(0) must be 1", spec.name)));
        }
        for i in 0..=100 {
            let t = spec.t_max * i as f64 / 100.0;
            if (spec.psi(t) - spec.psi(-t)).abs() > 1e-12 {
                return Err(Error::Spec(format!(
                    "{}: psi is not even at {t}",
                    spec.name
                )));
            }
        }
        Ok(spec)
    }

    /// `ψ(Δ) = exp(−σ²Δ²/2)` with spectral density `N(0, σ²)`.
    pub fn gaussian(sigma: f64, t_max: f64) -> Result<Self> {
        if !(sigma > 0.0 && t_max > 0.0) {
            return Err(Error::input(
                "gaussian kernel needs sigma > 0 and t_max > 0",
            ));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Spec(e.to_string()))?;
        Self::new(
            "gaussian",
            move |d| (-0.5 * sigma * sigma * d * d).exp(),
            move |rng| normal.sample(rng),
            sigma * sigma,
            t_max,
        )
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Self::gaussian(1.0, 4.0),
            other => Err(Error::input(format!("unknown kernel '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn psi(&self, t: f64) -> f64 {
        (self.psi)(t)
    }

    pub fn sample_frequency(&self, rng: &mut StreamRng) -> f64 {
        (self.sampler)(rng)
    }

    pub fn sigma_p2(&self) -> f64 {
        self.sigma_p2
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// `Gram[i][j] = ψ(grid[i] − grid[j])`.
    pub fn gram(&self, grid: &[f64]) -> Result<Tensor> {
        if grid.is_empty() {
            return Err(Error::input("empty grid"));
        }
        let n = grid.len();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = self.psi(grid[i] - grid[j]);
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        Tensor::matrix(n, n, g)
    }
}

/// Value of the uniform-approximation bound, raw and clamped to a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Claim1Bound {
    pub raw: f64,
    pub clamped: f64,
}

/// `4 √σ_p² √(t_max/ε) exp(−d ε²/32)`: an upper bound on the probability that
/// a `d`-sample random Fourier feature kernel deviates from the true kernel by
/// at least `ε` anywhere on `[0, t_max]`.
pub fn claim1_bound(sigma_p2: f64, t_max: f64, eps: f64, d: f64) -> Result<Claim1Bound> {
    for (name, v) in [
        ("sigma_p2", sigma_p2),
        ("t_max", t_max),
        ("eps", eps),
        ("d", d),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::input(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let raw = 4.0 * sigma_p2.sqrt() * (t_max / eps).sqrt() * (-d * eps * eps / 32.0).exp();
    Ok(Claim1Bound {
        raw,
        clamped: raw.min(1.0),
    })
}

/// One row of the Monte-Carlo approximation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub d: usize,
    pub mean_sup_error: f64,
    pub max_sup_error: f64,
}

/// Sup-norm error `sup_Δ |K̂_d(Δ) − ψ(Δ)|` over `Δ ∈ {0, step, …} ∩ [0, t_max]`,
/// where `K̂_d` comes from a Bochner feature map with `d` frequencies drawn
/// from the kernel's spectral density.
pub fn mc_sup_error(
    spec: &KernelSpec,
    d: usize,
    rng: &mut StreamRng,
    grid_step: f64,
) -> Result<f64> {
    let omegas: Vec<f64> = (0..d).map(|_| spec.sample_frequency(rng)).collect();
    let emb = TimeEmbedding::bochner_nonparam(omegas)?;
    let grid = delta_grid(spec.t_max(), grid_step)?;
    let phi = emb.embed_many(&grid)?;
    let origin = phi.row_slice(0).to_vec();
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &delta)| (dot(phi.row_slice(i), &origin) - spec.psi(delta)).abs())
        .fold(0.0, f64::max))
}

fn delta_grid(t_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && t_max > 0.0) {
        return Err(Error::input("grid step and t_max must be positive"));
    }
    let n = (t_max / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

/// Sup-error statistics per `d`, averaged over `seeds` independent draws.
pub fn mc_approximation_study(
    spec: &KernelSpec,
    d_list: &[usize],
    seeds: usize,
    base_seed: u64,
    grid_step: f64,
) -> Result<Vec<McRow>> {
    if d_list.is_empty() {
        return Err(Error::input("d list is empty"));
    }
    if d_list.windows(2).any(|w| w[0] >= w[1]) || d_list[0] == 0 {
        return Err(Error::input(
            "d list must be positive and strictly ascending",
        ));
    }
    if seeds == 0 {
        return Err(Error::input("need at least one seed"));
    }
    let root = Seeds::new(base_seed);
    d_list
        .iter()
        .map(|&d| {
            let errs = (0..seeds)
                .map(|s| {
                    let mut rng = root.child(&format!("mc/{d}/{s}")).stream("spectral");
                    mc_sup_error(spec, d, &mut rng, grid_step)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(McRow {
                d,
                mean_sup_error: errs.iter().sum::<f64>() / seeds as f64,
                max_sup_error: errs.iter().cloned().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Even, 2-periodic kernel profile `ψ` on `[−1, 1]` with known Fourier
/// cosine coefficients `ψ(t) = a₀/2 + Σ a_j cos(πjt)`.
pub struct PeriodicKernelSpec {
    name: String,
    psi: ScalarFn,
    coeff: Box<dyn Fn(usize) -> f64 + Send + Sync>,
    /// Points in `[−1, 1]` where `ψ` (extended periodically) is not smooth.
    kinks: Vec<f64>,
    lipschitz: f64,
}

impl std::fmt::Debug for PeriodicKernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicKernelSpec")
            .field("name", &self.name)
            .field("kinks", &self.kinks)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl PeriodicKernelSpec {
    pub fn new(
        name: impl Into<String>,
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        coeff: impl Fn(usize) -> f64 + Send + Sync + 'static,
        kinks: Vec<f64>,
        lipschitz: f64,
    ) -> Self {
        Self {
            name: name.into(),
            psi: Box::new(psi),
            coeff: Box::new(coeff),
            kinks,
            lipschitz,
        }
    }

    /// Triangle wave `1 − |t|`: `a₀ = 1`, `a_j = 4/(π²j²)` for odd `j`, 0 for even.
    pub fn triangle() -> Self {
        Self::new(
            "triangle",
            |t| 1.0 - t.abs(),
            |j| match j {
                0 => 1.0,
                j if j % 2 == 1 => 4.0 / (PI * PI * (j * j) as f64),
                _ => 0.0,
            },
            vec![-1.0, 0.0, 1.0],
            1.0,
        )
    }

    /// `cos(πt)`: a single harmonic with `a₁ = 1`.
    pub fn cosine() -> Self {
        Self::new(
            "cosine",
            |t| (PI * t).cos(),
            |j| if j == 1 { 1.0 } else { 0.0 },
            vec![],
            PI,
        )
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "triangle" => Ok(Self::triangle()),
            "cosine" => Ok(Self::cosine()),
            other => Err(Error::input(format!("unknown periodic kernel '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn fourier_coeff(&self, j: usize) -> f64 {
        (self.coeff)(j)
    }

    /// `ψ` extended to the real line with period 2.
    pub fn psi(&self, t: f64) -> f64 {
        let r = (t + 1.0).rem_euclid(2.0) - 1.0;
        (self.psi)(r)
    }

    /// Partial Fourier sum `S_d(t)`.
    pub fn partial_sum(&self, d: usize, t: f64) -> f64 {
        self.fourier_coeff(0) / 2.0
            + (1..=d)
                .map(|j| self.fourier_coeff(j) * (PI * j as f64 * t).cos())
                .sum::<f64>()
    }

    fn check_even(&self) -> Result<()> {
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            if ((self.psi)(t) - (self.psi)(-t)).abs() > 1e-12 {
                return Err(Error::Spec(format!(
                    "{}: psi is not even at {t}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Composite Simpson rule on `[a, b]` with `n` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n.max(2) };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Simpson on `[a, b]` split at `breaks`, spreading about `n` subintervals
/// over the pieces in proportion to their length.
pub fn simpson_piecewise(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], n: usize) -> f64 {
    let mut pts: Vec<f64> = breaks
        .iter()
        .cloned()
        .filter(|&x| x > a + 1e-14 && x < b - 1e-14)
        .collect();
    pts.push(a);
    pts.push(b);
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.dedup_by(|x, y| (*x - *y).abs() < 1e-14);
    let total = b - a;
    pts.windows(2)
        .map(|w| {
            let share = ((w[1] - w[0]) / total * n as f64).round() as usize;
            simpson(&f, w[0], w[1], share.max(2))
        })
        .sum()
}

/// Kink locations of `t2 ↦ ψ(t1 − t2)` inside `[−1, 1]`.
fn shifted_kinks(pspec: &PeriodicKernelSpec, t1: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for &k in &pspec.kinks {
        for shift in [-4.0, -2.0, 0.0, 2.0, 4.0] {
            let x = t1 - k + shift;
            if (-1.0..=1.0).contains(&x) {
                out.push(x);
            }
        }
    }
    out
}

/// `c_j = ∫₋₁¹ ψ(u) cos(πju) du`, by piecewise Simpson.
pub fn eigenvalue(pspec: &PeriodicKernelSpec, j: usize, quad_points: usize) -> f64 {
    let w = PI * j as f64;
    simpson_piecewise(
        |u| pspec.psi(u) * (w * u).cos(),
        -1.0,
        1.0,
        &pspec.kinks,
        quad_points,
    )
}

/// Residual of the Fourier-basis eigen-identity for the kernel operator
/// `f ↦ ∫₋₁¹ ψ(t₁ − t₂) f(t₂) dt₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenResidual {
    pub j: usize,
    pub eigenvalue: f64,
    pub cos_residual: f64,
    pub sin_residual: f64,
}

impl EigenResidual {
    pub fn max(&self) -> f64 {
        self.cos_residual.max(self.sin_residual)
    }
}

/// Max over a 64-point grid of `|T(φ)(t₁) − c_j φ(t₁)|` for `φ = cos(πj·)` and
/// `φ = sin(πj·)`.
pub fn eigenfunction_residual(
    pspec: &PeriodicKernelSpec,
    j: usize,
    quad_points: usize,
) -> Result<EigenResidual> {
    if j == 0 {
        return Err(Error::input("basis index j must be >= 1"));
    }
    if quad_points < 512 {
        return Err(Error::input(format!(
            "need at least 512 quadrature points, got {quad_points}"
        )));
    }
    pspec.check_even()?;
    let c = eigenvalue(pspec, j, quad_points);
    let w = PI * j as f64;
    let mut cos_res: f64 = 0.0;
    let mut sin_res: f64 = 0.0;
    for i in 0..64 {
        let t1 = -1.0 + 2.0 * i as f64 / 63.0;
        let breaks = shifted_kinks(pspec, t1);
        let tc = simpson_piecewise(
            |t2| pspec.psi(t1 - t2) * (w * t2).cos(),
            -1.0,
            1.0,
            &breaks,
            quad_points,
        );
        let ts = simpson_piecewise(
            |t2| pspec.psi(t1 - t2) * (w * t2).sin(),
            -1.0,
            1.0,
            &breaks,
            quad_points,
        );
        cos_res = cos_res.max((tc - c * (w * t1).cos()).abs());
        sin_res = sin_res.max((ts - c * (w * t1).sin()).abs());
    }
    Ok(EigenResidual {
        j,
        eigenvalue: c,
        cos_residual: cos_res,
        sin_residual: sin_res,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub d: usize,
    pub sup_error: f64,
    /// `ℓ ln(d)/d`, the shape of the uniform convergence rate (constant omitted).
    pub rate_shape: f64,
}

/// `sup_t |ψ(t) − S_d(t)|` on the grid `−1, −1 + 10⁻³, …, 1`.
pub fn truncation_decay(pspec: &PeriodicKernelSpec, d_list: &[usize]) -> Vec<DecayRow> {
    let grid: Vec<f64> = (0..=2000).map(|i| -1.0 + i as f64 * 1e-3).collect();
    d_list
        .iter()
        .map(|&d| {
            let sup = grid
                .iter()
                .map(|&t| (pspec.psi(t) - pspec.partial_sum(d, t)).abs())
                .fold(0.0, f64::max);
            DecayRow {
                d,
                sup_error: sup,
                rate_shape: pspec.lipschitz() * (d as f64).ln() / d as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claim1_examples() {
        let b = claim1_bound(1.0, 1.0, 0.5, 512.0).unwrap();
        assert!((b.raw - 0.10361).abs() < 1e-4, "{}", b.raw);
        assert!((b.raw - 4.0 * 2f64.sqrt() * (-4.0f64).exp()).abs() < 1e-15);

        let tiny = claim1_bound(1.0, 1.0, 0.5, 1e-12).unwrap();
        assert!((tiny.raw - 4.0 * 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(tiny.clamped, 1.0);

        for d in [1.0, 64.0, 700.0] {
            let r = claim1_bound(2.0, 3.0, 0.3, 2.0 * d).unwrap().raw
                / claim1_bound(2.0, 3.0, 0.3, d).unwrap().raw;
            let want = (-d * 0.09 / 32.0).exp();
            assert!((r - want).abs() <= 1e-14 * want);
        }
        assert!(claim1_bound(0.0, 1.0, 0.5, 1.0).is_err());
        assert!(claim1_bound(1.0, -1.0, 0.5, 1.0).is_err());
        assert!(claim1_bound(1.0, 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn claim1_matches_log_space_evaluation() {
        for &(s2, t, e, d) in &[
            (1.0, 1.0, 0.5, 512.0),
            (3.7, 12.0, 0.05, 10_000.0),
            (0.2, 0.4, 1.5, 9.0),
        ] {
            let raw = claim1_bound(s2, t, e, d).unwrap().raw;
            let log =
                4f64.ln() + 0.5 * f64::ln(s2) + 0.5 * (f64::ln(t) - f64::ln(e)) - d * e * e / 32.0;
            assert!((raw - log.exp()).abs() <= 1e-12 * raw);
        }
    }

    #[test]
    fn claim1_monotone() {
        let base = claim1_bound(1.0, 1.0, 0.5, 100.0).unwrap().raw;
        assert!(claim1_bound(1.0, 1.0, 0.5, 101.0).unwrap().raw < base);
        assert!(claim1_bound(1.0, 1.1, 0.5, 100.0).unwrap().raw > base);
        assert!(claim1_bound(1.1, 1.0, 0.5, 100.0).unwrap().raw > base);
    }

    #[test]
    fn mc_error_zero_at_origin_and_shrinks() {
        let spec = KernelSpec::gaussian(1.0, 4.0).unwrap();
        let mut rng = Seeds::new(1).stream("x");
        let omegas: Vec<f64> = (0..16).map(|_| spec.sample_frequency(&mut rng)).collect();
        let emb = TimeEmbedding::bochner_nonparam(omegas).unwrap();
        assert!((emb.kernel_estimate(0.0, 0.0).unwrap() - spec.psi(0.0)).abs() < 1e-12);
        let rows = mc_approximation_study(&spec, &[16, 1024], 5, 3, 0.05).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].mean_sup_error < rows[0].mean_sup_error);
        assert!(mc_approximation_study(&spec, &[], 5, 3, 0.05).is_err());
        assert!(mc_approximation_study(&spec, &[64, 16], 5, 3, 0.05).is_err());
    }

    #[test]
    fn delta_grid_covers_endpoint() {
        let g = delta_grid(4.0, 0.05).unwrap();
        assert_eq!(g.len(), 81);
        assert!((g[80] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_spec_rejects_bad_psi() {
        let odd = KernelSpec::new("odd", |t| 1.0 + t, |_| 0.0, 1.0, 1.0);
        assert!(matches!(odd, Err(Error::Spec(_))));
        assert!(KernelSpec::by_name("laplace").is_err());
    }

    #[test]
    fn simpson_exact_for_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 2.0, 4);
        assert!((v - (15.0 / 4.0 - 3.0 + 3.0)).abs() < 1e-13);
    }

    #[test]
    fn cosine_kernel_eigen_identity() {
        let r = eigenfunction_residual(&PeriodicKernelSpec::cosine(), 1, 1024).unwrap();
        assert!((r.eigenvalue - 1.0).abs() < 1e-10);
        assert!(r.max() < 1e-8, "{r:?}");
    }

    #[test]
    fn triangle_eigenvalues() {
        let tri = PeriodicKernelSpec::triangle();
        let r1 = eigenfunction_residual(&tri, 1, 1024).unwrap();
        assert!((r1.eigenvalue - 4.0 / (PI * PI)).abs() < 1e-6);
        assert!((r1.eigenvalue - 0.40528).abs() < 1e-5);
        assert!(r1.max() < 1e-6, "{r1:?}");
        let r2 = eigenfunction_residual(&tri, 2, 1024).unwrap();
        assert!(r2.eigenvalue.abs() < 1e-6);
        assert!(r2.max() < 1e-6, "{r2:?}");
    }

    #[test]
    fn residual_preconditions() {
        let tri = PeriodicKernelSpec::triangle();
        assert!(eigenfunction_residual(&tri, 0, 1024).is_err());
        assert!(eigenfunction_residual(&tri, 1, 256).is_err());
        let skew = PeriodicKernelSpec::new("skew", |t| 1.0 - 0.5 * t, |_| 0.0, vec![], 1.0);
        assert!(matches!(
            eigenfunction_residual(&skew, 1, 1024),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn residual_shrinks_with_more_nodes() {
        for pspec in [PeriodicKernelSpec::triangle(), PeriodicKernelSpec::cosine()] {
            for j in 1..=3 {
                let mut prev = eigenfunction_residual(&pspec, j, 512).unwrap().max();
                for n in [1024, 2048] {
                    let r = eigenfunction_residual(&pspec, j, n).unwrap().max();
                    assert!(
                        r <= prev + 1e-12,
                        "{} j={j} n={n}: {r} > {prev}",
                        pspec.name()
                    );
                    prev = r;
                }
            }
        }
    }

    #[test]
    fn series_matches_psi_at_zero() {
        let cos = PeriodicKernelSpec::cosine();
        assert!((cos.partial_sum(1, 0.0) - 1.0).abs() < 1e-10);
        // triangle: odd-harmonic tail after degree d is below 2/(π² d)
        let tri = PeriodicKernelSpec::triangle();
        let d = 200_001;
        assert!((tri.partial_sum(d, 0.0) - 1.0).abs() < 2.0 / (PI * PI * d as f64));
    }

    #[test]
    fn triangle_truncation_decay() {
        let rows = truncation_decay(&PeriodicKernelSpec::triangle(), &[1, 3, 7, 15, 31]);
        assert!((rows[0].sup_error - (1.0 - 0.5 - 4.0 / (PI * PI))).abs() < 1e-12);
        assert!((rows[0].sup_error - 0.0947).abs() < 1e-3);
        assert!(rows.windows(2).all(|w| w[1].sup_error < w[0].sup_error));
        let tri = PeriodicKernelSpec::triangle();
        assert!((tri.partial_sum(31, 0.0) - 1.0).abs() < 0.02);
    }

    #[test]
    fn analytic_grams_are_psd() {
        let spec = KernelSpec::gaussian(1.0, 4.0).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| i as f64 * 4.0 / 63.0).collect();
        let g = spec.gram(&grid).unwrap();
        assert!(min_eigenvalue(&g).unwrap() >= -1e-8);
        let tri = PeriodicKernelSpec::triangle();
        let grid: Vec<f64> = (0..40).map(|i| -1.0 + i as f64 * 0.05).collect();
        let n = grid.len();
        let data: Vec<f64> = (0..n * n)
            .map(|x| tri.psi(grid[x / n] - grid[x % n]))
            .collect();
        let g = Tensor::matrix(n, n, data).unwrap();
        assert!(min_eigenvalue(&g).unwrap() >= -1e-8);
    }
}
