//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends one node holding its
//! output value, the handles of its inputs and whatever it needs for the
//! backward pass. Node order is construction order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MaskRows(Var, Vec<bool>),
    Relu(Var),
    Swish(Var),
    Sigmoid(Var),
    Glu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: F,
        pad_id: usize,
        probs: Vec<F>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Dropout {
        x: Var,
        keep: Vec<F>,
    },
    FrameStack {
        x: Var,
        width: usize,
        stride: usize,
    },
    /// Test fixture: forward is identity, backward is deliberately wrong.
    #[doc(hidden)]
    BrokenIdentity(Var),
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    visits: usize,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Like [`get`](Self::get) but returns zeros when nothing flowed.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::new(&self.shapes[v.0], g).expect("gradient shape"))
    }

    /// Number of nodes the reverse sweep visited.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

/// Autodiff tape. Leaves may borrow tensors (model parameters) for `'p`.
pub struct Graph<'p, F: Scalar> {
    nodes: Vec<Node<'p, F>>,
    differentiated: bool,
}

impl<'p, F: Scalar> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'p Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf owning its value.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul_nt", a)?;
        let (n, k2) = self.rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[..., d] + bias[d]`, expanding over the leading dimensions.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let vb = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        if d > 0 {
            for row in data.chunks_exact_mut(d) {
                for (o, &b) in row.iter_mut().zip(vb) {
                    *o += b;
                }
            }
        }
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != keep.len() {
            return Err(shape_err("mask_rows", vx.shape(), &[keep.len()]));
        }
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        if d > 0 {
            for (row, &k) in data.chunks_exact_mut(d).zip(keep) {
                if !k {
                    row.iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskRows(x, keep.to_vec()), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(t, Op::Swish(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Gated linear unit over the last axis: `a · sigmoid(b)` for `x = a‖b`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d2 = vx.last_dim();
        if d2 % 2 != 0 {
            return Err(shape_err("glu", vx.shape(), &[d2 / 2 * 2]));
        }
        let d = d2 / 2;
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        let mut data = Vec::with_capacity(vx.numel() / 2);
        if d > 0 {
            for row in vx.data().chunks_exact(d2) {
                let (a, b) = row.split_at(d);
                data.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
            }
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Glu(x), rg))
    }

    /// Row-wise softmax over the last axis. Masked-out entries are exactly
    /// zero; each row needs at least one unmasked entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if let Some(m) = mask {
            if m.len() != vx.numel() {
                return Err(shape_err("softmax", vx.shape(), &[m.len()]));
            }
        }
        let mut data = vec![F::zero(); vx.numel()];
        if n > 0 {
            for (r, (row, out)) in vx
                .data()
                .chunks_exact(n)
                .zip(data.chunks_exact_mut(n))
                .enumerate()
            {
                let keep = |j: usize| mask.map_or(true, |m| m[r * n + j]);
                let mut max = F::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if keep(j) && v > max {
                        max = v;
                    }
                }
                if max == F::neg_infinity() {
                    return Err(TensorError::InvalidMask { row: r });
                }
                let mut total = F::zero();
                for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
                    if keep(j) {
                        *o = (v - max).exp();
                        total += *o;
                    }
                }
                let inv = F::one() / total;
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Normalizes each row of `x[..., d]` to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if d == 0 {
            return Err(shape_err("layer_norm", vx.shape(), &[1]));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", vx.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let df = F::from_usize(d);
        let mut xhat = vec![F::zero(); vx.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel convolution over time with zero "same" padding.
    /// `x[T,d]`, `kernel[w,d]`, `w` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t_len, d) = self.rank2("depthwise_conv1d", x)?;
        let (w, d2) = self.rank2("depthwise_conv1d", kernel)?;
        if w % 2 == 0 {
            return Err(TensorError::Config(alloc::format!(
                "depthwise_conv1d: kernel width {w} must be odd"
            )));
        }
        if d != d2 {
            return Err(shape_err("depthwise_conv1d", self.shape(x), self.shape(kernel)));
        }
        let half = w / 2;
        let vx = self.value(x).data();
        let vk = self.value(kernel).data();
        let mut out = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            let o = &mut out[t * d..(t + 1) * d];
            for j in 0..w {
                let src = t + j;
                if src < half || src - half >= t_len {
                    continue;
                }
                let xr = &vx[(src - half) * d..(src - half + 1) * d];
                let kr = &vk[j * d..(j + 1) * d];
                for c in 0..d {
                    o[c] += kr[c] * xr[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(&[t_len, d], out)?,
            Op::DepthwiseConv1d { x, kernel },
            rg,
        ))
    }

    /// Gathers rows of `table[V,d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2("embedding", table)?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(vt.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Label-smoothed cross entropy, averaged over positions whose target
    /// is not `pad_id`.
    ///
    /// The smoothed distribution puts `1 - s` on the target and
    /// `s / (V - 1)` on every other class; the loss is its KL divergence
    /// from `softmax(logits)`, so `s = 0` is plain negative log-likelihood.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: F,
        pad_id: usize,
    ) -> Result<Var> {
        let (t_len, v) = self.rank2("cross_entropy", logits)?;
        if targets.len() != t_len {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if smoothing < F::zero() || smoothing >= F::one() {
            return Err(TensorError::Config(alloc::format!(
                "label smoothing {:?} outside [0, 1)",
                smoothing
            )));
        }
        if smoothing > F::zero() && v < 2 {
            return Err(TensorError::Config("label smoothing needs at least two classes".into()));
        }
        let vl = self.value(logits).data();
        let mut probs = vec![F::zero(); t_len * v];
        let mut total = F::zero();
        let mut count = 0usize;
        let on = F::one() - smoothing;
        let off = if v > 1 {
            smoothing / F::from_usize(v - 1)
        } else {
            F::zero()
        };
        // Σ q log q of the smoothed target; constant per position.
        let entropy_term = {
            let mut e = F::zero();
            if on > F::zero() {
                e += on * on.ln();
            }
            if off > F::zero() {
                e += F::from_usize(v - 1) * off * off.ln();
            }
            e
        };
        for t in 0..t_len {
            let target = targets[t];
            if target == pad_id {
                continue;
            }
            if target >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: target,
                    size: v,
                });
            }
            let row = &vl[t * v..(t + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum_exp: F = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            let p = &mut probs[t * v..(t + 1) * v];
            let mut cross = F::zero();
            for j in 0..v {
                let logp = row[j] - log_z;
                p[j] = logp.exp();
                let q = if j == target { on } else { off };
                if q > F::zero() {
                    cross -= q * logp;
                }
            }
            total += cross + entropy_term;
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let loss = total / F::from_usize(count);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                pad_id,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = F::from_usize(vx.numel().max(1));
        let s = vx.sum() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", x)?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&vx[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_cols: no inputs".into()))?;
        let (r, _) = self.rank2("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rank2("concat_cols", p)?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let vp = self.value(p);
                let c = vp.last_dim();
                out.extend_from_slice(&vp.data()[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Inverted dropout. Each element is zeroed with probability `p` and
    /// survivors are scaled by `1 / (1 - p)`. `p == 0` returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: F, rng: &mut dyn RngCore) -> Result<Var> {
        if p < F::zero() || p >= F::one() {
            return Err(TensorError::Config(alloc::format!(
                "dropout rate {:?} outside [0, 1)",
                p
            )));
        }
        if p == F::zero() {
            return Ok(x);
        }
        let scale = F::one() / (F::one() - p);
        let pf = p.as_f64();
        let vx = self.value(x);
        let keep: Vec<F> = (0..vx.numel())
            .map(|_| {
                if rng.random::<f64>() < pf {
                    F::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data = vx.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, keep }, rg))
    }

    /// Strided frame stacking for time convolutions: output row `i` is the
    /// concatenation of input rows `stride*i - width/2 ..= stride*i + width/2`
    /// with zeros outside `0..T`. Output length is `ceil(T / stride)`.
    pub fn frame_stack(&mut self, x: Var, width: usize, stride: usize) -> Result<Var> {
        let (t_len, d) = self.rank2("frame_stack", x)?;
        if width % 2 == 0 || stride == 0 {
            return Err(TensorError::Config(alloc::format!(
                "frame_stack: width {width} must be odd and stride {stride} positive"
            )));
        }
        let out_len = t_len.div_ceil(stride);
        let half = width / 2;
        let vx = self.value(x).data();
        let mut out = vec![F::zero(); out_len * width * d];
        for i in 0..out_len {
            for j in 0..width {
                let src = i * stride + j;
                if src < half || src - half >= t_len {
                    continue;
                }
                let s = src - half;
                let dst = (i * width + j) * d;
                out[dst..dst + d].copy_from_slice(&vx[s * d..(s + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[out_len, width * d], out)?,
            Op::FrameStack { x, width, stride },
            rg,
        ))
    }

    #[doc(hidden)]
    pub fn broken_identity(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let rg = self.rg(x);
        self.push(t, Op::BrokenIdentity(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. A tape can be differentiated
    /// once; a second call fails with [`TensorError::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.differentiated {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.differentiated = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            visits += 1;
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let numel = nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![F::zero(); numel])
            }};
        }
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(*a) {
                    let vb = val(*b);
                    gemm_nt(m, n, k, g, vb, slot!(*a));
                }
                if wants(*b) {
                    let va = val(*a);
                    gemm_tn(m, k, n, va, g, slot!(*b));
                }
            }
            Op::MatMulNT(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[0];
                if wants(*a) {
                    let vb = val(*b);
                    gemm_nn(m, n, k, g, vb, slot!(*a));
                }
                if wants(*b) {
                    let va = val(*a);
                    gemm_tn(m, n, k, g, va, slot!(*b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                if wants(*b) {
                    let d = nodes[b.0].value.numel();
                    let sb = slot!(*b);
                    if d > 0 {
                        for row in g.chunks_exact(d) {
                            sb.iter_mut().zip(row).for_each(|(s, &r)| *s += r);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let vb = val(*b);
                    let sa = slot!(*a);
                    for ((s, &d), &y) in sa.iter_mut().zip(g).zip(vb) {
                        *s += d * y;
                    }
                }
                if wants(*b) {
                    let va = val(*a);
                    let sb = slot!(*b);
                    for ((s, &d), &x) in sb.iter_mut().zip(g).zip(va) {
                        *s += d * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                slot!(*x).iter_mut().zip(g).for_each(|(s, &d)| *s += d * c);
            }
            Op::MaskRows(x, keep) => {
                let d = nodes[x.0].value.last_dim();
                let sx = slot!(*x);
                if d > 0 {
                    for ((srow, grow), &k) in sx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(keep)
                    {
                        if k {
                            srow.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                let sx = slot!(*x);
                for ((s, &d), &xv) in sx.iter_mut().zip(g).zip(vx) {
                    if xv > F::zero() {
                        *s += d;
                    }
                }
            }
            Op::Swish(x) => {
                let vx = val(*x);
                let sx = slot!(*x);
                for ((s, &d), &xv) in sx.iter_mut().zip(g).zip(vx) {
                    let sg = sigmoid(xv);
                    *s += d * (sg + xv * sg * (F::one() - sg));
                }
            }
            Op::Sigmoid(x) => {
                let sx = slot!(*x);
                for ((s, &d), &y) in sx.iter_mut().zip(g).zip(out) {
                    *s += d * y * (F::one() - y);
                }
            }
            Op::Glu(x) => {
                let vx = val(*x);
                let d2 = nodes[x.0].value.last_dim();
                let d = d2 / 2;
                let sx = slot!(*x);
                if d > 0 {
                    for ((srow, xrow), grow) in sx
                        .chunks_exact_mut(d2)
                        .zip(vx.chunks_exact(d2))
                        .zip(g.chunks_exact(d))
                    {
                        for j in 0..d {
                            let a = xrow[j];
                            let sg = sigmoid(xrow[d + j]);
                            srow[j] += grow[j] * sg;
                            srow[d + j] += grow[j] * a * sg * (F::one() - sg);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = nodes[x.0].value.last_dim();
                let sx = slot!(*x);
                if n > 0 {
                    for ((srow, yrow), grow) in sx
                        .chunks_exact_mut(n)
                        .zip(out.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: F = yrow.iter().zip(grow).map(|(&y, &d)| y * d).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = val(*gain);
                if wants(*gain) {
                    let sg = slot!(*gain);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            sg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let sb = slot!(*bias);
                    for grow in g.chunks_exact(d) {
                        sb.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                    }
                }
                if wants(*x) {
                    let df = F::from_usize(d);
                    let sx = slot!(*x);
                    let mut dh = vec![F::zero(); d];
                    for (r, ((srow, grow), hrow)) in sx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= df;
                        mean_dh_h /= df;
                        let rs = rstd[r];
                        for j in 0..d {
                            srow[j] += rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let sx = nodes[x.0].value.shape();
                let (t_len, d) = (sx[0], sx[1]);
                let w = nodes[kernel.0].value.shape()[0];
                let half = w / 2;
                let vx = val(*x);
                let vk = val(*kernel);
                if wants(*x) {
                    let gx = slot!(*x);
                    for t in 0..t_len {
                        let grow = &g[t * d..(t + 1) * d];
                        for j in 0..w {
                            let src = t + j;
                            if src < half || src - half >= t_len {
                                continue;
                            }
                            let s = src - half;
                            for c in 0..d {
                                gx[s * d + c] += vk[j * d + c] * grow[c];
                            }
                        }
                    }
                }
                if wants(*kernel) {
                    let gk = slot!(*kernel);
                    for t in 0..t_len {
                        let grow = &g[t * d..(t + 1) * d];
                        for j in 0..w {
                            let src = t + j;
                            if src < half || src - half >= t_len {
                                continue;
                            }
                            let s = src - half;
                            for c in 0..d {
                                gk[j * d + c] += vx[s * d + c] * grow[c];
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.last_dim();
                let st = slot!(*table);
                for (k, &id) in ids.iter().enumerate() {
                    let grow = &g[k * d..(k + 1) * d];
                    st[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, &v)| *s += v);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad_id,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.last_dim();
                let scale = g[0] / F::from_usize(*count);
                let on = F::one() - *smoothing;
                let off = if v > 1 {
                    *smoothing / F::from_usize(v - 1)
                } else {
                    F::zero()
                };
                let sl = slot!(*logits);
                for (t, &target) in targets.iter().enumerate() {
                    if target == *pad_id {
                        continue;
                    }
                    for j in 0..v {
                        let q = if j == target { on } else { off };
                        sl[t * v + j] += scale * (probs[t * v + j] - q);
                    }
                }
            }
            Op::Sum(x) => {
                let d = g[0];
                slot!(*x).iter_mut().for_each(|s| *s += d);
            }
            Op::Mean(x) => {
                let n = F::from_usize(nodes[x.0].value.numel().max(1));
                let d = g[0] / n;
                slot!(*x).iter_mut().for_each(|s| *s += d);
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.last_dim();
                let len = nodes[i].value.last_dim();
                let sx = slot!(*x);
                if len > 0 {
                    for (r, grow) in g.chunks_exact(len).enumerate() {
                        sx[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.last_dim();
                let rows = nodes[i].value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.last_dim();
                    if wants(p) {
                        let sp = slot!(p);
                        for r in 0..rows {
                            sp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + c])
                                .for_each(|(s, &v)| *s += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::Dropout { x, keep } => {
                let sx = slot!(*x);
                for ((s, &d), &k) in sx.iter_mut().zip(g).zip(keep) {
                    *s += d * k;
                }
            }
            Op::FrameStack { x, width, stride } => {
                let sx = nodes[x.0].value.shape();
                let (t_len, d) = (sx[0], sx[1]);
                let out_len = nodes[i].value.shape()[0];
                let half = width / 2;
                let gx = slot!(*x);
                for o in 0..out_len {
                    for j in 0..*width {
                        let src = o * stride + j;
                        if src < half || src - half >= t_len {
                            continue;
                        }
                        let s = src - half;
                        let from = (o * width + j) * d;
                        gx[s * d..(s + 1) * d]
                            .iter_mut()
                            .zip(&g[from..from + d])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::BrokenIdentity(x) => {
                // Wrong on purpose: doubles and shifts the gradient.
                slot!(*x)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, &d)| *s += d + d + F::one());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_of_sum() {
        // Frozen from central differences: d sum(AB)/dA = 1·Bᵀ.
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]), true);
        let b = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]));
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, None).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, None).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d[1] >= 0.0);

        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.softmax(x, Some(&[true, false])).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let err = g.softmax(x, Some(&[true, false, false, false])).unwrap_err();
        assert_eq!(err, TensorError::InvalidMask { row: 1 });
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2, 2], &[5.0, 5.0, 1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-9 && (d[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let y = g.depthwise_conv1d(x, k).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

        let x = g.constant(t(&[4, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 8.0, -1.0, 2.0]));
        let k = g.constant(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
        let y = g.depthwise_conv1d(x, k).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let k = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.depthwise_conv1d(x, k), Err(TensorError::Config(_))));
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.swish(z);
        assert_eq!(g.value(s).data(), &[0.0]);
        let x = g.constant(t(&[1, 2], &[3.0, 0.0]));
        let y = g.glu(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5]);
        let odd = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.glu(odd), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn embedding_examples() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let e = g.embedding(table, &[0]).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 2.0]);
        let empty = g.embedding(table, &[]).unwrap();
        assert_eq!(g.shape(empty), &[0, 2]);
        assert_eq!(
            g.embedding(table, &[3]).unwrap_err(),
            TensorError::Index {
                op: "embedding",
                index: 3,
                size: 3
            }
        );
        let rep = g.embedding(table, &[2, 2]).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 10.0, 100.0, 1000.0]));
        let m = g.mul(rep, w).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(table).unwrap().data(),
            &[0.0, 0.0, 0.0, 0.0, 101.0, 1010.0]
        );
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(logits, &[2], 0.0, 99).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let logits = g.constant(t(&[1, 3], &[60.0, 0.0, 0.0]));
        let l = g.cross_entropy(logits, &[0], 0.0, 99).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let logits = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            g.cross_entropy(logits, &[0, 0], 0.1, 0).unwrap_err(),
            TensorError::EmptyLoss
        );
    }

    #[test]
    fn cross_entropy_without_smoothing_is_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..3 {
            let (t_len, v) = (4 + case, 5);
            let vals: Vec<f64> = (0..t_len * v).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let targets: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..v)).collect();
            // independent NLL
            let mut nll = 0.0;
            for r in 0..t_len {
                let row = &vals[r * v..(r + 1) * v];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                nll -= (row[targets[r]].exp() / z).ln();
            }
            nll /= t_len as f64;
            let mut g = Graph::<f64>::new();
            let logits = g.constant(t(&[t_len, v], &vals));
            let l = g.cross_entropy(logits, &targets, 0.0, usize::MAX).unwrap();
            assert!((g.value(l).item() - nll).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -4.0, 2.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.visits(), g.len());
        assert_eq!(g.backward(s).unwrap_err(), TensorError::BackwardTwice);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn dropout_zero_is_identity_and_scaling_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1000], 1.0), true);
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12);
        }
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros));
    }

    #[test]
    fn frame_stack_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.frame_stack(x, 3, 2).unwrap();
        assert_eq!(g.shape(y), &[3, 3]);
        assert_eq!(
            g.value(y).data(),
            &[0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 0.0]
        );
    }
}
