//! Finite-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{Batch, Model, ParamGroup};

/// Denominator floor for tensors whose gradient is identically zero.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub group: ParamGroup,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, NORM_FLOOR)` over
    /// checked entries.
    pub rel_error: f64,
    pub abs_error: f64,
    pub max_abs_grad: f64,
}

/// Analytic gradients of every parameter tensor (all trainable).
pub fn analytic_gradients(model: &Model<f64>, batch: &Batch, lambda: f64) -> Result<Vec<Vec<f64>>, ModelError> {
    let trainable = vec![true; model.params().len()];
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    model.loss_and_grad(batch, lambda, &trainable, Some(&mut grads), None)?;
    Ok(grads)
}

/// Compares analytic gradients against central differences on up to
/// `per_tensor` evenly spaced entries of every tensor.
pub fn gradient_check(
    model: &Model<f64>,
    batch: &Batch,
    lambda: f64,
    per_tensor: usize,
    eps: f64,
) -> Result<Vec<TensorCheck>, ModelError> {
    let grads = analytic_gradients(model, batch, lambda)?;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (i, spec) in model.param_specs().iter().enumerate() {
        let n = spec.numel();
        let count = per_tensor.min(n).max(1);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for s in 0..count {
            let j = s * n / count;
            let orig = probe.params()[i][j];
            probe.params_mut()[i][j] = orig + eps;
            let up = probe.loss(batch, lambda)?.total;
            probe.params_mut()[i][j] = orig - eps;
            let down = probe.loss(batch, lambda)?.total;
            probe.params_mut()[i][j] = orig;
            let num = (up - down) / (2.0 * eps);
            let ana = grads[i][j];
            diff += (ana - num).powi(2);
            na += ana * ana;
            nn += num * num;
        }
        let denom = na.sqrt() + nn.sqrt();
        out.push(TensorCheck {
            name: spec.name.clone(),
            group: spec.group,
            checked: count,
            rel_error: diff.sqrt() / denom.max(NORM_FLOOR),
            abs_error: diff.sqrt(),
            max_abs_grad: grads[i].iter().fold(0.0, |m, g| m.max(g.abs())),
        });
    }
    Ok(out)
}

/// Largest elementwise `|g(0.5) − (0.5·g(1) + 0.5·g(0))|`.
pub fn lambda_linearity_error(model: &Model<f64>, batch: &Batch) -> Result<f64, ModelError> {
    let g_half = analytic_gradients(model, batch, 0.5)?;
    let g_one = analytic_gradients(model, batch, 1.0)?;
    let g_zero = analytic_gradients(model, batch, 0.0)?;
    let mut worst = 0.0f64;
    for ((h, a), b) in g_half.iter().zip(&g_one).zip(&g_zero) {
        for ((&h, &a), &b) in h.iter().zip(a).zip(b) {
            worst = worst.max((h - (0.5 * a + 0.5 * b)).abs());
        }
    }
    Ok(worst)
}
