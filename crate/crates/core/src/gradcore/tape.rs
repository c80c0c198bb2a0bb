use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds the tape knows how to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Conv3x3,
    AvgPool2,
    UpsampleNearest2,
    Silu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Power,
    Relu,
    Clamp,
    Sum,
    Mean,
    SumInner,
    MeanInner,
    ExpandRows,
    Concat,
    Slice,
    GroupNorm,
    Affine,
    ChannelAdd,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv3x3 { x: Var, w: Var, cols: Vec<f64> },
    AvgPool2(Var),
    Upsample2(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Power(Var, f64),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumInner(Var),
    MeanInner(Var),
    ExpandRows(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GroupNorm { x: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Affine { x: Var, scale: Var, shift: Var },
    ChannelAdd { x: Var, bias: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::AvgPool2(..) => OpKind::AvgPool2,
            Op::Upsample2(..) => OpKind::UpsampleNearest2,
            Op::Silu(..) => OpKind::Silu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Power(..) => OpKind::Power,
            Op::Relu(..) => OpKind::Relu,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumInner(..) => OpKind::SumInner,
            Op::MeanInner(..) => OpKind::MeanInner,
            Op::ExpandRows(..) => OpKind::ExpandRows,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::Affine { .. } => OpKind::Affine,
            Op::ChannelAdd { .. } => OpKind::ChannelAdd,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.grads
            .get(&var)
            .ok_or_else(|| Error::State(format!("no gradient recorded for {var:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// Single-assignment record of a forward computation.
///
/// Every op appends one node whose inputs are earlier nodes, so the node
/// order is already a topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the stated dimensions and strides;
    // `c` is a distinct, contiguous row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_first(shape: &[usize]) -> (usize, usize) {
    let first = shape.first().copied().unwrap_or(1);
    let rest = shape.iter().skip(1).product();
    (first, rest)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn op_kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{:?} produced a non-finite value",
                op.kind()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        self.unary(x, |v| v + offset, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            (k, 1),
            self.data(b),
            (n, 1),
            0.0,
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err!("transpose expects rank 2, got {:?}", s));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Stride-1, zero-padded 3x3 convolution of `x: [Cin, H, W]` with
    /// `w: [Cout, Cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err!("conv3x3: input {:?}, kernel {:?}", sx, sw));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let cols = im2col(self.data(x), cin, h, wd);
        let k = cin * 9;
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        gemm(cout, k, hw, self.data(w), (k, 1), &cols, (hw, 1), 0.0, &mut out);
        self.push(
            Tensor::new(vec![cout, h, wd], out)?,
            Op::Conv3x3 { x, w, cols },
            &[x, w],
        )
    }

    /// 2x2 average pooling of `[C, H, W]` with even `H`, `W`.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err!("avgpool2 expects [C, even H, even W], got {:?}", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w;
                    let v = src[base + 2 * i * w + 2 * j]
                        + src[base + 2 * i * w + 2 * j + 1]
                        + src[base + (2 * i + 1) * w + 2 * j]
                        + src[base + (2 * i + 1) * w + 2 * j + 1];
                    out[ch * ho * wo + i * wo + j] = 0.25 * v;
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out)?, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err!("upsample expects [C, H, W], got {:?}", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ch * ho * wo + i * wo + j] = src[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out)?, Op::Upsample2(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn power(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.unary(x, |v| v.powf(exponent), Op::Power(x, exponent))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input is clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(crate::error::domain_err!("clamp bounds [{lo}, {hi}] are inverted"));
        }
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Reduces every axis but the first: `[d0, ...] -> [d0]`.
    pub fn sum_inner(&mut self, x: Var) -> Result<Var> {
        let (d0, rest) = split_first(self.shape(x));
        let src = self.data(x);
        let out = (0..d0)
            .map(|i| src[i * rest..(i + 1) * rest].iter().sum())
            .collect();
        self.push(Tensor::new(vec![d0], out)?, Op::SumInner(x), &[x])
    }

    pub fn mean_inner(&mut self, x: Var) -> Result<Var> {
        let (d0, rest) = split_first(self.shape(x));
        let src = self.data(x);
        let out = (0..d0)
            .map(|i| src[i * rest..(i + 1) * rest].iter().sum::<f64>() / rest as f64)
            .collect();
        self.push(Tensor::new(vec![d0], out)?, Op::MeanInner(x), &[x])
    }

    /// Repeats a `[K]` vector into `n` rows: `[n, K]`.
    pub fn expand_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(shape_err!("expand_rows expects rank 1, got {:?}", s));
        }
        let k = s[0];
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        self.push(Tensor::new(vec![n, k], out)?, Op::ExpandRows(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", s, base));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                s
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, &[x])
    }

    /// Group normalization without learned affine parameters.
    ///
    /// `x: [C, ...]` is split into `groups` runs of `C / groups` channels; each
    /// run is standardized with its own mean and variance (+1e-5).
    pub fn groupnorm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, spatial) = split_first(&shape);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("groupnorm: {c} channels not divisible by {groups} groups"));
        }
        let n = (c / groups) * spatial;
        let src = self.data(x);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let block = &src[g * n..(g + 1) * n];
            let mean = block.iter().sum::<f64>() / n as f64;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + GROUPNORM_EPS).sqrt();
            for (o, v) in xhat[g * n..(g + 1) * n].iter_mut().zip(block) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::new(shape, xhat.clone())?;
        self.push(
            value,
            Op::GroupNorm {
                x,
                groups,
                xhat,
                rstd,
            },
            &[x],
        )
    }

    /// Per-channel affine map `x[c, ..] * scale[c] + shift[c]`.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, rest) = split_first(self.shape(x));
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err!(
                "affine: {c} channels vs scale {:?} / shift {:?}",
                self.shape(scale),
                self.shape(shift)
            ));
        }
        let (src, sc, sh) = (self.data(x), self.data(scale), self.data(shift));
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for i in ch * rest..(ch + 1) * rest {
                out[i] = src[i] * sc[ch] + sh[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::Affine { x, scale, shift },
            &[x, scale, shift],
        )
    }

    /// Broadcasts `bias: [C]` over the trailing axes of `x: [C, ...]`.
    pub fn channel_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, rest) = split_first(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(shape_err!(
                "channel_add: {c} channels vs bias {:?}",
                self.shape(bias)
            ));
        }
        let (src, b) = (self.data(x), self.data(bias));
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for i in ch * rest..(ch + 1) * rest {
                out[i] = src[i] + b[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::ChannelAdd { x, bias },
            &[x, bias],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the gradient for every leaf created with `requires_grad`,
    /// zero-filled when the leaf does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * db[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * da[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / db[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] -= g[k] * da[k] / (db[k] * db[k]);
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += f * d)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &mut |ga| gemm(m, n, k, g, (n, 1), db, (1, n), 1.0, ga));
                acc(*b, &mut |gb| gemm(k, m, n, da, (1, k), g, (n, 1), 1.0, gb));
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, cols } => {
                let sx = self.shape(*x);
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(*w)[0];
                let (k, hw) = (cin * 9, h * wd);
                acc(*w, &mut |gw| gemm(cout, hw, k, g, (hw, 1), cols, (1, hw), 1.0, gw));
                let dw = self.data(*w);
                acc(*x, &mut |gx| {
                    let mut gcols = vec![0.0; k * hw];
                    gemm(k, cout, hw, dw, (1, k), g, (hw, 1), 0.0, &mut gcols);
                    col2im_add(&gcols, cin, h, wd, gx);
                });
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        for r in 0..h {
                            for col in 0..w {
                                gx[ch * h * w + r * w + col] +=
                                    0.25 * g[ch * ho * wo + (r / 2) * wo + col / 2];
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (2 * h, 2 * w);
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        for r in 0..ho {
                            for col in 0..wo {
                                gx[ch * h * w + (r / 2) * w + col / 2] +=
                                    g[ch * ho * wo + r * wo + col];
                            }
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        let s = sigmoid(dx[k]);
                        gx[k] += g[k] * s * (1.0 + dx[k] * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for k in 0..gx.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for k in 0..gx.len() {
                    gx[k] += g[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] / dx[k];
                    }
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                for k in 0..gx.len() {
                    gx[k] += g[k] * 0.5 / y[k];
                }
            }),
            Op::Power(x, p) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * p * dx[k].powf(p - 1.0);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        if dx[k] >= *lo && dx[k] <= *hi {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        if dx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumInner(x) | Op::MeanInner(x) => {
                let (d0, rest) = split_first(self.shape(*x));
                let f = if matches!(node.op, Op::MeanInner(_)) {
                    1.0 / rest as f64
                } else {
                    1.0
                };
                acc(*x, &mut |gx| {
                    for r in 0..d0 {
                        for o in &mut gx[r * rest..(r + 1) * rest] {
                            *o += g[r] * f;
                        }
                    }
                });
            }
            Op::ExpandRows(x) => {
                let k = self.shape(*x)[0];
                acc(*x, &mut |gx| {
                    for row in g.chunks(k) {
                        add_into(gx, row);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * len..(o + 1) * len],
                                &g[o * total + offset..o * total + offset + len],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis] * inner;
                let full = s[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let from = (o * full + start) * inner;
                        add_into(&mut gx[from..from + len], &g[o * len..(o + 1) * len]);
                    }
                });
            }
            Op::GroupNorm {
                x,
                groups,
                xhat,
                rstd,
            } => {
                let n = xhat.len() / groups;
                acc(*x, &mut |gx| {
                    for grp in 0..*groups {
                        let range = grp * n..(grp + 1) * n;
                        let gy = &g[range.clone()];
                        let xh = &xhat[range.clone()];
                        let sum_g: f64 = gy.iter().sum();
                        let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let r = rstd[grp] / n as f64;
                        for ((o, dy), xv) in gx[range].iter_mut().zip(gy).zip(xh) {
                            *o += r * (n as f64 * dy - sum_g - xv * sum_gx);
                        }
                    }
                });
            }
            Op::Affine { x, scale, shift } => {
                let (c, rest) = split_first(self.shape(*x));
                let (dx, dsc) = (self.data(*x), self.data(*scale));
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        for k in ch * rest..(ch + 1) * rest {
                            gx[k] += g[k] * dsc[ch];
                        }
                    }
                });
                acc(*scale, &mut |gs| {
                    for ch in 0..c {
                        let r = ch * rest..(ch + 1) * rest;
                        gs[ch] += g[r.clone()].iter().zip(&dx[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*shift, &mut |gb| channel_sums_into(gb, g, c, rest));
            }
            Op::ChannelAdd { x, bias } => {
                let (c, rest) = split_first(self.shape(*x));
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| channel_sums_into(gb, g, c, rest));
            }
        }
    }
}

pub(crate) const GROUPNORM_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, d)| *o += d);
}

fn channel_sums_into(dst: &mut [f64], g: &[f64], c: usize, rest: usize) {
    for ch in 0..c {
        dst[ch] += g[ch * rest..(ch + 1) * rest].iter().sum::<f64>();
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x[c * hw + sy as usize * w..][..w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, gx: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut gx[c * hw + sy as usize * w..][..w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => add_into(&mut dst[..w - 1], &src[1..]),
                        1 => add_into(dst, src),
                        _ => add_into(&mut dst[1..], &src[..w - 1]),
                    }
                }
            }
        }
    }
}
