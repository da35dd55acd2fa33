//! Finite-difference checks for every differentiable graph operation and
//! for the full model loss. Shared by the core tests and the acceptance run.

use allost_core::gradcheck::{finite_diff_check, model_gradient_check};
use allost_core::graph::{Graph, Var};
use allost_core::model::{AlloSt, FusionMode, ModelConfig, ParamId, ParameterSet, Source};
use allost_core::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element
/// contributes a distinct amount to the scalar.
fn readout(g: &mut Graph<'_, f64>, y: Var, salt: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, f64);

/// Worst relative error per operation, for one seed.
pub fn op_errors(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let salt = seed ^ 0x9e37;
    let x46 = random(&[4, 6], &mut rng);
    let c46 = random(&[4, 6], &mut rng);
    let b63 = random(&[6, 3], &mut rng);
    let a34 = random(&[3, 4], &mut rng);
    let b56 = random(&[5, 6], &mut rng);
    let row = random(&[6], &mut rng);
    let gain = random(&[6], &mut rng);
    let kernel = random(&[3, 6], &mut rng);
    let table = random(&[7, 6], &mut rng);
    let long = random(&[9, 6], &mut rng);
    let mask: Vec<bool> = (0..24).map(|i| i % 6 == 0 || rng.random_bool(0.6)).collect();
    let keep = [true, false, true, true];
    let ids = [3usize, 0, 6, 3, 2];
    let targets = [2usize, 5, 0, 1];
    let mut out: Vec<Case> = Vec::new();

    macro_rules! check {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let err = finite_diff_check(
                |$g: &mut Graph<'_, f64>, $v: Var| -> Result<Var, TensorError> {
                    let y: Var = $body;
                    readout($g, y, salt)
                },
                &$x,
                STEP,
            )
            .unwrap();
            out.push(($name, err));
        }};
    }

    check!("matmul.lhs", x46, |g, v| {
        let b = g.constant(b63.clone());
        g.matmul(v, b)?
    });
    check!("matmul.rhs", x46, |g, v| {
        let a = g.constant(a34.clone());
        g.matmul(a, v)?
    });
    check!("matmul_nt.lhs", x46, |g, v| {
        let b = g.constant(b56.clone());
        g.matmul_nt(v, b)?
    });
    check!("matmul_nt.rhs", b56, |g, v| {
        let a = g.constant(x46.clone());
        g.matmul_nt(a, v)?
    });
    check!("add", x46, |g, v| {
        let c = g.constant(c46.clone());
        g.add(v, c)?
    });
    check!("add_row.x", x46, |g, v| {
        let r = g.constant(row.clone());
        g.add_row(v, r)?
    });
    check!("add_row.bias", row, |g, v| {
        let x = g.constant(x46.clone());
        g.add_row(x, v)?
    });
    check!("mul", x46, |g, v| {
        let c = g.constant(c46.clone());
        g.mul(v, c)?
    });
    check!("mul.square", x46, |g, v| g.mul(v, v)?);
    check!("scale", x46, |g, v| g.scale(v, -1.7));
    check!("mask_rows", x46, |g, v| g.mask_rows(v, &keep)?);
    check!("relu", x46, |g, v| g.relu(v));
    check!("swish", x46, |g, v| g.swish(v));
    check!("sigmoid", x46, |g, v| g.sigmoid(v));
    check!("glu", x46, |g, v| g.glu(v)?);
    check!("softmax", x46, |g, v| g.softmax(v, None)?);
    check!("softmax.masked", x46, |g, v| g.softmax(v, Some(&mask))?);
    check!("layer_norm.x", x46, |g, v| {
        let (a, b) = (g.constant(gain.clone()), g.constant(row.clone()));
        g.layer_norm(v, a, b, 1e-5)?
    });
    check!("layer_norm.gain", gain, |g, v| {
        let (x, b) = (g.constant(x46.clone()), g.constant(row.clone()));
        g.layer_norm(x, v, b, 1e-5)?
    });
    check!("layer_norm.bias", row, |g, v| {
        let (x, a) = (g.constant(x46.clone()), g.constant(gain.clone()));
        g.layer_norm(x, a, v, 1e-5)?
    });
    check!("depthwise_conv1d.x", x46, |g, v| {
        let k = g.constant(kernel.clone());
        g.depthwise_conv1d(v, k)?
    });
    check!("depthwise_conv1d.kernel", kernel, |g, v| {
        let x = g.constant(long.clone());
        g.depthwise_conv1d(x, v)?
    });
    check!("embedding", table, |g, v| g.embedding(v, &ids)?);
    check!("slice_cols", x46, |g, v| g.slice_cols(v, 1, 3)?);
    check!("concat_cols", x46, |g, v| {
        let c = g.constant(c46.clone());
        g.concat_cols(&[v, c, v])?
    });
    check!("dropout", x46, |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(salt);
        g.dropout(v, 0.3, &mut r)?
    });
    check!("frame_stack", long, |g, v| g.frame_stack(v, 3, 2)?);

    // Reductions and the loss already produce scalars.
    let scalar = |f: &dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var, TensorError>, x: &Tensor<f64>| {
        finite_diff_check(f, x, STEP).unwrap()
    };
    out.push(("sum", scalar(&|g, v| {
        let y = g.mul(v, v)?;
        Ok(g.sum(y))
    }, &x46)));
    out.push(("mean", scalar(&|g, v| {
        let y = g.mul(v, v)?;
        Ok(g.mean(y))
    }, &x46)));
    out.push(("cross_entropy", scalar(&|g, v| g.cross_entropy(v, &targets, 0.1, 0), &x46)));
    out.push(("cross_entropy.unsmoothed", scalar(&|g, v| g.cross_entropy(v, &targets, 0.0, 0), &x46)));
    out
}

pub fn tiny_config(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        acoustic_layers: 1,
        phone_layers: 1,
        decoder_layers: 1,
        conv_kernel: 3,
        dropout: 0.0,
        label_smoothing: 0.1,
        fusion_mode: fusion,
        acoustic_feature_dim: 6,
        phone_vocab: 12,
        target_vocab: 14,
        subsample_factor: 4,
    }
}

/// Worst error of the full loss over two random entries of every
/// parameter. The fusion mode cycles with the seed.
pub fn model_error(seed: u64) -> f64 {
    let fusion = FusionMode::ALL[seed as usize % 4];
    let model = AlloSt::new(tiny_config(fusion)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParameterSet<f64> = model.init_params(&mut rng);
    let t = rng.random_range(5..14);
    let x = random(&[t, 6], &mut rng);
    let phones: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(4..12)).collect();
    let target: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(4..14)).collect();
    let probes: Vec<(ParamId, usize)> = (0..params.len())
        .flat_map(|i| {
            let n = params.tensors()[i].numel();
            [(ParamId(i), rng.random_range(0..n)), (ParamId(i), rng.random_range(0..n))]
        })
        .collect();
    let src = Source::new(&x, Some(&phones[..]));
    model_gradient_check(&model, &params, &src, &target, &probes, 1e-5).unwrap()
}
