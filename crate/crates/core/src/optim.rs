//! Noam learning-rate schedule, Adam, gradient clipping and parameter
//! averaging.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Result, TensorError};
use crate::model::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(TensorError::Config("noam_lr: step must be at least 1".into()));
    }
    if warmup == 0 {
        return Err(TensorError::Config("noam_lr: warmup must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    let decay = Float::powf(s, -0.5);
    let ramp = s * Float::powf(w, -1.5);
    Ok(scale * Float::powf(d_model as f64, -0.5) * decay.min(ramp))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Transformer-style betas (0.9, 0.98) and eps 1e-9.
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParameterSet<F>) -> Self {
        let zeros = |t: &Tensor<F>| Tensor::zeros(t.shape());
        Self {
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. `grads` must hold one gradient per
/// parameter; a `None` entry fails with the parameter's name.
pub fn adam_step<F: Scalar>(
    params: &mut ParameterSet<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(TensorError::Config(format!(
            "adam: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        match g {
            None => {
                return Err(TensorError::Config(format!(
                    "adam: missing gradient for {}",
                    params.name(crate::model::ParamId(i))
                )))
            }
            Some(g) if g.shape() != params.tensors()[i].shape() => {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: params.tensors()[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let c1 = F::from_f64(1.0 - Float::powi(cfg.beta1, t));
    let c2 = F::from_f64(1.0 - Float::powi(cfg.beta2, t));
    let lr = F::from_f64(lr);
    let eps = F::from_f64(cfg.eps);
    let one = F::one();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above").data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all present gradients.
pub fn global_norm<F: Scalar>(grads: &[Option<Tensor<F>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Elementwise arithmetic mean of parameter sets with identical layouts.
pub fn average_parameters<F: Scalar>(sets: &[ParameterSet<F>]) -> Result<ParameterSet<F>> {
    let first = sets
        .first()
        .ok_or_else(|| TensorError::Config("average: no checkpoints".into()))?;
    for other in &sets[1..] {
        first.check_compatible(other)?;
    }
    let mut out = first.clone();
    let k = sets.len() as f64;
    let mut column = Vec::with_capacity(sets.len());
    for (i, t) in out.tensors_mut().iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(sets.iter().map(|s| s.tensors()[i].data()[j].as_f64()));
            // Sorting makes the sum independent of checkpoint order.
            column.sort_by(f64::total_cmp);
            *v = if column[0] == column[column.len() - 1] {
                sets[0].tensors()[i].data()[j]
            } else {
                F::from_f64(column.iter().sum::<f64>() / k)
            };
        }
    }
    Ok(out)
}
