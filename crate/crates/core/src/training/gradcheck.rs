use crate::autodiff::Tape;
use crate::data_synth::Dataset;
use crate::error::Result;
use crate::rng::Seeds;
use crate::sequence_model::Model;

use super::{masked_next_event_loss, Target};

/// Worst finite-difference disagreement within one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

fn batch_loss(model: &Model, data: &Dataset, batch: &[Target]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind_frozen(&mut tape);
    let mut rng = Seeds::new(0).stream("gradcheck");
    let l = masked_next_event_loss(model, &mut tape, &bound, data, batch, &mut rng)?;
    Ok(tape.value(l).data()[0])
}

/// Compares tape gradients of the batch loss against central differences
/// with step `h`, entry by entry, for every trainable array. The model
/// should have dropout off.
pub fn gradient_check(
    model: &Model,
    data: &Dataset,
    batch: &[Target],
    h: f64,
) -> Result<Vec<GradCheck>> {
    let analytic = {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let mut rng = Seeds::new(0).stream("gradcheck");
        let l = masked_next_event_loss(model, &mut tape, &bound, data, batch, &mut rng)?;
        tape.backward(l)?;
        model.params().gradients(&tape, &bound)?
    };
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let mut worst = 0.0f64;
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.params().value(&name)?.data()[i];
            probe.params_mut().value_mut(&name)?.data_mut()[i] = orig + h;
            let up = batch_loss(&probe, data, batch)?;
            probe.params_mut().value_mut(&name)?.data_mut()[i] = orig - h;
            let down = batch_loss(&probe, data, batch)?;
            probe.params_mut().value_mut(&name)?.data_mut()[i] = orig;
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR));
        }
        out.push(GradCheck {
            name,
            entries: grad.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
