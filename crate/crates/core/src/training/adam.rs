use serde::{Deserialize, Serialize};

use super::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// First and second moment estimates, one pair per trainable array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let moments = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Moments {
                name: p.name.clone(),
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            })
            .collect();
        Self { step: 0, moments }
    }
}

/// One bias-corrected Adam update. `grads` pairs each trainable array name
/// with its gradient; a non-finite gradient aborts before anything changes.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[(String, Vec<f64>)],
    state: &mut AdamState,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != state.moments.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} optimizer slots",
            grads.len(),
            state.moments.len()
        )));
    }
    for ((name, g), mo) in grads.iter().zip(&state.moments) {
        if *name != mo.name || g.len() != mo.m.len() {
            return Err(Error::Contract(format!(
                "gradient {name} (len {}) does not match optimizer slot {} (len {})",
                g.len(),
                mo.name,
                mo.m.len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} in parameter {name} at index {i}",
                g[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((name, g), mo) in grads.iter().zip(state.moments.iter_mut()) {
        let p = params.value_mut(name)?;
        if p.len() != g.len() {
            return Err(Error::Contract(format!("parameter {name} changed shape")));
        }
        for (((w, gi), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(mo.m.iter_mut())
            .zip(mo.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn one(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(v), true);
        ps
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimConfig::default();
        let mut ps = one(0.5);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[("w".into(), vec![1.0])], &mut st, &cfg).unwrap();
        let w = ps.value("w").unwrap().data()[0];
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
        assert!((w - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.499).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = OptimConfig::default();
        let mut ps = one(2.0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[("w".into(), vec![0.3])], &mut st, &cfg).unwrap();
        let before = ps.clone();
        let (m0, v0) = (st.moments[0].m[0], st.moments[0].v[0]);
        let mut zero_st = st.clone();
        let mut fresh = one(2.0);
        let mut fresh_st = AdamState::new(&fresh);
        adam_step(&mut fresh, &[("w".into(), vec![0.0])], &mut fresh_st, &cfg).unwrap();
        assert_eq!(fresh.value("w").unwrap().data()[0], 2.0);
        adam_step(&mut ps, &[("w".into(), vec![0.0])], &mut zero_st, &cfg).unwrap();
        assert!((zero_st.moments[0].m[0] - 0.9 * m0).abs() < 1e-18);
        assert!((zero_st.moments[0].v[0] - 0.98 * v0).abs() < 1e-18);
        // momentum still carries the parameter
        assert!(ps.value("w").unwrap().data()[0] < before.value("w").unwrap().data()[0]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let cfg = OptimConfig::default();
        let mut ps = one(1.0);
        let mut st = AdamState::new(&ps);
        let err = adam_step(&mut ps, &[("w".into(), vec![f64::NAN])], &mut st, &cfg).unwrap_err();
        assert!(
            matches!(&err, Error::Numerical(m) if m.contains("parameter w")),
            "{err}"
        );
        assert_eq!(st.step, 0);
        assert_eq!(ps.value("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let cfg = OptimConfig::default();
        let mut ps = one(1.0);
        let mut st = AdamState::new(&ps);
        assert!(adam_step(&mut ps, &[("w".into(), vec![1.0, 2.0])], &mut st, &cfg).is_err());
        assert!(adam_step(&mut ps, &[("x".into(), vec![1.0])], &mut st, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn update_is_odd(w in -5.0f64..5.0, gs in prop::collection::vec(-3.0f64..3.0, 1..6)) {
            let cfg = OptimConfig::default();
            let (mut a, mut b) = (one(w), one(-w));
            let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
            for g in gs {
                adam_step(&mut a, &[("w".into(), vec![g])], &mut sa, &cfg).unwrap();
                adam_step(&mut b, &[("w".into(), vec![-g])], &mut sb, &cfg).unwrap();
            }
            prop_assert_eq!(a.value("w").unwrap().data()[0], -b.value("w").unwrap().data()[0]);
        }
    }
}
