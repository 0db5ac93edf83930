//! Central finite-difference check of analytic gradients.

use super::network::{backward, forward_nll};
use super::params::ModelParameters;
use crate::corpus::Batch;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn mean_loss(params: &ModelParameters, batch: &Batch, dropout: Option<u64>) -> Result<f64> {
    let rec = forward_nll(params, batch, dropout)?;
    Ok(rec.total_nll / rec.total_target_tokens() as f64)
}

/// Compares every analytic gradient entry against
/// `(L(θ + h) − L(θ − h)) / 2h` on the token-mean batch loss.
pub fn check_gradients(
    params: &ModelParameters,
    batch: &Batch,
    dropout: Option<u64>,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let record = forward_nll(params, batch, dropout)?;
    let grads = backward(params, &record)?;
    let analytic: Vec<f64> = grads
        .tensors
        .named()
        .iter()
        .flat_map(|(_, t)| t.data.iter().copied())
        .collect();

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut flat = 0usize;
    let shapes: Vec<usize> = params
        .tensors()
        .named()
        .iter()
        .map(|(_, t)| t.len())
        .collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let original = probe.tensors().named()[ti].1.data[k];
            probe.tensors_mut().tensors_mut()[ti].data[k] = original + step;
            let up = mean_loss(&probe, batch, dropout)?;
            probe.tensors_mut().tensors_mut()[ti].data[k] = original - step;
            let down = mean_loss(&probe, batch, dropout)?;
            probe.tensors_mut().tensors_mut()[ti].data[k] = original;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[flat], numeric, floor));
            flat += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked: flat,
    })
}
