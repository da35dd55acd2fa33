//! Building blocks: parameter layout, the forward session, attention,
//! feed-forward and conformer blocks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParameterSet};
use crate::error::Result;
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Records parameter names, shapes and initializers while a model is laid out.
#[derive(Debug, Default)]
pub(crate) struct Builder {
    pub specs: Vec<ParamSpec>,
}

impl Builder {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.param(
                alloc::format!("{prefix}.w"),
                &[d_in, d_out],
                Init::Xavier {
                    fan_in: d_in,
                    fan_out: d_out,
                },
            ),
            b: self.param(alloc::format!("{prefix}.b"), &[d_out], Init::Zeros),
        }
    }

    pub fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.param(alloc::format!("{prefix}.g"), &[d], Init::Ones),
            bias: self.param(alloc::format!("{prefix}.b"), &[d], Init::Zeros),
        }
    }

    pub fn attention(&mut self, prefix: &str, d: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&alloc::format!("{prefix}.wq"), d, d),
            k: self.linear(&alloc::format!("{prefix}.wk"), d, d),
            v: self.linear(&alloc::format!("{prefix}.wv"), d, d),
            o: self.linear(&alloc::format!("{prefix}.wo"), d, d),
            heads,
        }
    }
}

pub(crate) fn init_tensor<F: Scalar>(spec: &ParamSpec, rng: &mut dyn RngCore) -> Tensor<F> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<F> = match spec.init {
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n)
                .map(|_| F::from_f64(rng.random_range(-a..a)))
                .collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
        }
        Init::Zeros => vec![F::zero(); n],
        Init::Ones => vec![F::one(); n],
    };
    Tensor::new(&spec.shape, data).expect("spec shape")
}

/// One forward evaluation: a fresh tape plus lazily bound parameters.
///
/// Dropout is active only when the session was built with
/// [`Session::training`].
pub struct Session<'p, 'r, F: Scalar> {
    pub graph: Graph<'p, F>,
    params: &'p ParameterSet<F>,
    bound: Vec<Option<Var>>,
    dropout: F,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'p, 'r, F: Scalar> Session<'p, 'r, F> {
    /// Evaluation mode: no dropout.
    pub fn new(params: &'p ParameterSet<F>) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            dropout: F::zero(),
            rng: None,
        }
    }

    pub fn training(params: &'p ParameterSet<F>, dropout: f64, rng: &'r mut dyn RngCore) -> Self {
        Self {
            dropout: F::from_f64(dropout),
            rng: Some(rng),
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParameterSet<F> {
        self.params
    }

    /// Tape handle of parameter `id`, borrowing it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.params.tensor(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Routes parameter `id` to an existing tape value, e.g. a perturbed
    /// copy during gradient checks.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub(crate) fn drop(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > F::zero() => self.graph.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }

    /// Per-parameter gradients aligned with the parameter set. Parameters
    /// that were never used, or received no gradient, are `None`.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, '_, F>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, '_, F>, x: Var) -> Result<Var> {
        let g = s.p(self.gain);
        let b = s.p(self.bias);
        s.graph.layer_norm(x, g, b, F::from_f64(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// `mask` is row-major `[Tq, Tk]`, true where attention is allowed.
    pub fn forward<F: Scalar>(
        &self,
        s: &mut Session<'_, '_, F>,
        query: Var,
        memory: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let d = s.graph.value(query).last_dim();
        let dk = d / self.heads;
        let q = self.q.forward(s, query)?;
        let q = s.graph.scale(q, F::one() / F::from_usize(dk).sqrt());
        let k = self.k.forward(s, memory)?;
        let v = self.v.forward(s, memory)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.graph.slice_cols(q, h * dk, dk)?,
                    s.graph.slice_cols(k, h * dk, dk)?,
                    s.graph.slice_cols(v, h * dk, dk)?,
                )
            };
            let scores = s.graph.matmul_nt(qh, kh)?;
            let weights = s.graph.softmax(scores, Some(mask))?;
            outs.push(s.graph.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        self.o.forward(s, joined)
    }
}

/// `[Tq, Tk]` mask letting every query see every valid key.
pub(crate) fn key_mask(queries: usize, keys: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(queries * keys.len());
    for _ in 0..queries {
        m.extend_from_slice(keys);
    }
    m
}

/// `[T, T]` mask: query `i` sees valid keys `j <= i`.
pub(crate) fn causal_mask(keys: &[bool]) -> Vec<bool> {
    let t = keys.len();
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = keys[j];
        }
    }
    m
}

/// Sinusoidal position table `[len, d]`.
pub(crate) fn positional_encoding<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / Float::powf(10000.0f64, exponent);
            let v = if i % 2 == 0 {
                Float::sin(angle)
            } else {
                Float::cos(angle)
            };
            data[pos * d + i] = F::from_f64(v);
        }
    }
    Tensor::new(&[len, d], data).expect("pe shape")
}

/// Position-wise feed-forward with pre-norm, used twice per conformer block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MacaronFeedForward {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

impl MacaronFeedForward {
    fn forward<F: Scalar>(&self, s: &mut Session<'_, '_, F>, x: Var) -> Result<Var> {
        let y = self.norm.forward(s, x)?;
        let y = self.up.forward(s, y)?;
        let y = s.graph.swish(y);
        self.down.forward(s, y)
    }
}

/// Pointwise-GLU, depthwise convolution, norm, swish, pointwise.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvModule {
    pub norm: Norm,
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub conv_norm: Norm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    fn forward<F: Scalar>(&self, s: &mut Session<'_, '_, F>, x: Var, mask: &[bool]) -> Result<Var> {
        let y = self.norm.forward(s, x)?;
        let y = self.pointwise_in.forward(s, y)?;
        let y = s.graph.glu(y)?;
        // Padded frames must read as zeros to the convolution.
        let y = s.graph.mask_rows(y, mask)?;
        let k = s.p(self.depthwise);
        let y = s.graph.depthwise_conv1d(y, k)?;
        let b = s.p(self.depthwise_bias);
        let y = s.graph.add_row(y, b)?;
        let y = self.conv_norm.forward(s, y)?;
        let y = s.graph.swish(y);
        self.pointwise_out.forward(s, y)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConformerBlock {
    pub ff1: MacaronFeedForward,
    pub attn_norm: Norm,
    pub attn: Attention,
    pub conv: ConvModule,
    pub ff2: MacaronFeedForward,
    pub final_norm: Norm,
}

impl ConformerBlock {
    pub fn build(b: &mut Builder, prefix: &str, d: usize, heads: usize, ffn: usize, kernel: usize) -> Self {
        let ff = |b: &mut Builder, name: &str| MacaronFeedForward {
            norm: b.norm(&alloc::format!("{prefix}.{name}.ln"), d),
            up: b.linear(&alloc::format!("{prefix}.{name}.w1"), d, ffn),
            down: b.linear(&alloc::format!("{prefix}.{name}.w2"), ffn, d),
        };
        let ff1 = ff(b, "ff1");
        let attn_norm = b.norm(&alloc::format!("{prefix}.attn.ln"), d);
        let attn = b.attention(&alloc::format!("{prefix}.attn"), d, heads);
        let conv = ConvModule {
            norm: b.norm(&alloc::format!("{prefix}.conv.ln"), d),
            pointwise_in: b.linear(&alloc::format!("{prefix}.conv.pw1"), d, 2 * d),
            depthwise: b.param(
                alloc::format!("{prefix}.conv.dw.k"),
                &[kernel, d],
                Init::Xavier {
                    fan_in: kernel,
                    fan_out: kernel,
                },
            ),
            depthwise_bias: b.param(alloc::format!("{prefix}.conv.dw.b"), &[d], Init::Zeros),
            conv_norm: b.norm(&alloc::format!("{prefix}.conv.dw_ln"), d),
            pointwise_out: b.linear(&alloc::format!("{prefix}.conv.pw2"), d, d),
        };
        let ff2 = ff(b, "ff2");
        let final_norm = b.norm(&alloc::format!("{prefix}.final_ln"), d);
        Self {
            ff1,
            attn_norm,
            attn,
            conv,
            ff2,
            final_norm,
        }
    }

    /// `mask` marks valid frames of `x[T, d]`.
    pub fn forward<F: Scalar>(&self, s: &mut Session<'_, '_, F>, x: Var, mask: &[bool]) -> Result<Var> {
        let half = F::from_f64(0.5);

        let y = self.ff1.forward(s, x)?;
        let y = s.drop(y)?;
        let y = s.graph.scale(y, half);
        let x = s.graph.add(x, y)?;

        let y = self.attn_norm.forward(s, x)?;
        let t = mask.len();
        let y = self.attn.forward(s, y, y, &key_mask(t, mask))?;
        let y = s.drop(y)?;
        let x = s.graph.add(x, y)?;

        let y = self.conv.forward(s, x, mask)?;
        let y = s.drop(y)?;
        let x = s.graph.add(x, y)?;

        let y = self.ff2.forward(s, x)?;
        let y = s.drop(y)?;
        let y = s.graph.scale(y, half);
        let x = s.graph.add(x, y)?;

        self.final_norm.forward(s, x)
    }
}
