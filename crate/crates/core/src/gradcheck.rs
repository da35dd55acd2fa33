//! Central-difference gradient checking.
//!
//! The analytic side runs one backward pass; the numeric side only ever
//! evaluates forward values, so the two routes share nothing but the
//! forward definitions.

use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::model::{AlloSt, ParamId, ParameterSet, Session, Source};
use crate::tensor::Tensor;

/// Below this combined magnitude a gradient is treated as structurally
/// zero (for example a key bias, which softmax cancels) and must match
/// within [`ABS_TOLERANCE`] instead of relatively.
pub const NOISE_FLOOR: f64 = 1e-7;
pub const ABS_TOLERANCE: f64 = 1e-9;

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Maximum relative error between the backward-pass gradient of the scalar
/// function `f` at `x` and its central-difference estimate with `step`,
/// over every element of `x`.
pub fn finite_diff_check<'a, F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'a, f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, step, &all)
}

/// Like [`finite_diff_check`] but only probes the listed flat indices.
pub fn finite_diff_check_at<'a, F>(f: F, x: &Tensor<f64>, step: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<'a, f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let out = f(&mut g, xv)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::NotScalar(g.shape(out).to_vec()));
        }
        let grads = g.backward(out)?;
        grads.get_or_zeros(xv)
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(probe, false);
        let out = f(&mut g, xv)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Relative error with the [`NOISE_FLOOR`] rule applied; an absolute
/// mismatch below the floor reports as 1.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() + numeric.abs() < NOISE_FLOOR {
        if (analytic - numeric).abs() <= ABS_TOLERANCE {
            0.0
        } else {
            1.0
        }
    } else {
        relative_error(analytic, numeric)
    }
}

/// Worst [`gradient_error`] of the full training loss with respect to the
/// probed `(parameter, flat index)` pairs. Evaluation mode, so dropout is
/// off; label smoothing stays on.
pub fn model_gradient_check(
    model: &AlloSt,
    params: &ParameterSet<f64>,
    src: &Source<'_, f64>,
    target: &[usize],
    probes: &[(ParamId, usize)],
    step: f64,
) -> Result<f64> {
    let analytic = {
        let mut s = Session::new(params);
        let (loss, _) = model.loss(&mut s, src, target)?;
        let mut grads = s.graph.backward(loss)?;
        s.param_grads(&mut grads)
    };
    let eval = |p: &ParameterSet<f64>| -> Result<f64> {
        let mut s = Session::new(p);
        let (loss, _) = model.loss(&mut s, src, target)?;
        Ok(s.graph.value(loss).item())
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for &(id, i) in probes {
        let base = params.tensor(id).data()[i];
        probe.tensor_mut(id).data_mut()[i] = base + step;
        let up = eval(&probe)?;
        probe.tensor_mut(id).data_mut()[i] = base - step;
        let down = eval(&probe)?;
        probe.tensor_mut(id).data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
        worst = worst.max(gradient_error(a, numeric));
    }
    Ok(worst)
}
