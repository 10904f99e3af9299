use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Below this pre-sqrt value the square-root gradient is treated as zero.
pub const SQRT_GRAD_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
pub enum BatchNormStats {
    /// Fixed per-channel statistics; the op is an affine map.
    Running { mean: Vec<f64>, var: Vec<f64> },
    /// Statistics over the columns of the input, differentiated through.
    Batch,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    Conv1d {
        w: Var,
        b: Option<Var>,
        x: Var,
        dilation: usize,
    },
    Relu(Var),
    RowSoftmax(Var),
    MaskedSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Sqrt(Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    BroadcastCols(Var),
    MaskRenorm {
        a: Var,
        mask: Vec<bool>,
        sums: Vec<f64>,
    },
    WeightedMean {
        h: Var,
        a: Var,
    },
    WeightedVar {
        h: Var,
        a: Var,
        mean: Vec<f64>,
        clamped: Vec<bool>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
        batch: bool,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    Aam(Box<AamSaved>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(_) => "relu",
            Op::RowSoftmax(_) => "row_softmax",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Sqrt(_) => "sqrt",
            Op::Scale(..) => "scale",
            Op::ConcatRows(_) => "concat",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::MaskRenorm { .. } => "mask_renormalize",
            Op::WeightedMean { .. } => "weighted_mean",
            Op::WeightedVar { .. } => "weighted_var",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Cosine { .. } => "cosine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Aam(_) => "aam_loss",
        }
    }
}

#[derive(Debug)]
struct AamSaved {
    emb: Var,
    weights: Var,
    label: usize,
    scale: f64,
    emb_norm: f64,
    emb_unit: Vec<f64>,
    w_norms: Vec<f64>,
    w_unit: Vec<f64>,
    cosines: Vec<f64>,
    probs: Vec<f64>,
    target_dpsi: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::InvalidInput(format!("dangling tape reference {}", v.0)))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `w · x + b` with `w: out×in`, `x: in×T`, `b: out`.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (wt, xt) = (self.check(w)?, self.check(x)?);
        if wt.shape().len() != 2 || wt.cols() != xt.rows() {
            return Err(Error::shape(
                "affine",
                format!("weight {:?} vs input {:?}", wt.shape(), xt.shape()),
            ));
        }
        let (out, inp, t) = (wt.rows(), wt.cols(), xt.cols());
        let mut y = vec![0.0; out * t];
        if let Some(b) = b {
            let bt = self.check(b)?;
            if bt.len() != out {
                return Err(Error::shape(
                    "affine",
                    format!("bias {} vs {out} outputs", bt.len()),
                ));
            }
            for (o, row) in y.chunks_mut(t).enumerate() {
                row.fill(bt.data()[o]);
            }
        }
        gemm(out, inp, t, wt.data(), false, xt.data(), false, &mut y);
        let inputs: Vec<Var> = [Some(w), Some(x), b].into_iter().flatten().collect();
        self.push(Tensor::matrix(out, t, y)?, Op::Affine { w, x, b }, &inputs)
    }

    /// Same-length 1-D convolution over columns with zero padding.
    /// `w: out×in×k`, `x: in×T`, `b: out`.
    pub fn conv1d(&mut self, w: Var, b: Option<Var>, x: Var, dilation: usize) -> Result<Var> {
        let (wt, xt) = (self.check(w)?, self.check(x)?);
        if wt.shape().len() != 3 || wt.shape()[1] != xt.rows() || dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "weight {:?} vs input {:?}, dilation {dilation}",
                    wt.shape(),
                    xt.shape()
                ),
            ));
        }
        let (out, inp, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
        let t = xt.cols();
        let mut y = vec![0.0; out * t];
        if let Some(b) = b {
            let bt = self.check(b)?;
            if bt.len() != out {
                return Err(Error::shape("conv1d", "bias length"));
            }
            for (o, row) in y.chunks_mut(t).enumerate() {
                row.fill(bt.data()[o]);
            }
        }
        let cols = im2col(xt.data(), inp, t, k, dilation);
        gemm(out, inp * k, t, wt.data(), false, &cols, false, &mut y);
        let inputs: Vec<Var> = [Some(w), b, Some(x)].into_iter().flatten().collect();
        self.push(
            Tensor::matrix(out, t, y)?,
            Op::Conv1d { w, b, x, dilation },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.check(x)?;
        let y: Vec<f64> = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(xt.shape().to_vec(), y)?;
        self.push(t, Op::Relu(x), &[x])
    }

    /// Softmax along each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.softmax_values(x, None)?;
        self.push(t, Op::RowSoftmax(x), &[x])
    }

    /// Softmax along each row over the columns whose mask flag is set; other
    /// columns are exactly zero. Equal to `mask_renormalize(row_softmax(x))`
    /// but computed without the excluded columns, so their values cannot
    /// swamp the result numerically.
    pub fn masked_row_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let c = self.check(x)?.cols();
        if mask.len() != c {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {} vs {c} columns", mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyTargetActivity);
        }
        let t = self.softmax_values(x, Some(mask))?;
        self.push(t, Op::MaskedSoftmax(x), &[x])
    }

    fn softmax_values(&self, x: Var, mask: Option<&[bool]>) -> Result<Tensor> {
        let xt = self.check(x)?;
        let c = xt.cols();
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut y = xt.data().to_vec();
        for row in y.chunks_mut(c) {
            let max = (0..c)
                .filter(|&i| keep(i))
                .map(|i| row[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (i, v) in row.iter_mut().enumerate() {
                *v = if keep(i) { (*v - max).exp() } else { 0.0 };
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Tensor::new(xt.shape().to_vec(), y)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, bt) = (self.check(a)?, self.check(b)?);
        if !at.same_shape(bt) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let y = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(at.shape().to_vec(), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), &[a, b])
    }

    /// `sqrt(max(x, 0))`; the gradient is zero where `x <= SQRT_GRAD_EPS`.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let xt = self.check(x)?;
        let y = xt.data().iter().map(|&v| v.max(0.0).sqrt()).collect();
        let t = Tensor::new(xt.shape().to_vec(), y)?;
        self.push(t, Op::Sqrt(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xt = self.check(x)?;
        let y = xt.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(xt.shape().to_vec(), y)?;
        self.push(t, Op::Scale(x, factor), &[x])
    }

    /// Stacks inputs vertically; all inputs need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let cols = self.check(parts[0])?.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.check(p)?;
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {cols} columns", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Repeats a column vector `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let xt = self.check(x)?;
        if xt.cols() != 1 {
            return Err(Error::shape(
                "broadcast_cols",
                "input must be a column vector",
            ));
        }
        let n = xt.rows();
        let mut data = Vec::with_capacity(n * cols);
        for &v in xt.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        self.push(Tensor::matrix(n, cols, data)?, Op::BroadcastCols(x), &[x])
    }

    /// Zeroes columns whose mask flag is unset and rescales every row so the
    /// surviving entries sum to one.
    pub fn mask_renormalize(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let at = self.check(a)?;
        let t = at.cols();
        if mask.len() != t {
            return Err(Error::shape(
                "mask_renormalize",
                format!("mask {} vs {t} columns", mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyTargetActivity);
        }
        let mut y = vec![0.0; at.len()];
        let mut sums = Vec::with_capacity(at.rows());
        for (row, out) in at.data().chunks(t).zip(y.chunks_mut(t)) {
            let s: f64 = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum();
            for ((o, v), &m) in out.iter_mut().zip(row).zip(mask) {
                if m {
                    *o = v / s;
                }
            }
            sums.push(s);
        }
        let tensor = Tensor::new(at.shape().to_vec(), y)?;
        self.push(
            tensor,
            Op::MaskRenorm {
                a,
                mask: mask.to_vec(),
                sums,
            },
            &[a],
        )
    }

    fn check_weighted(&self, h: Var, a: Var, name: &'static str) -> Result<(usize, usize)> {
        let (ht, at) = (self.check(h)?, self.check(a)?);
        if !ht.same_shape(at) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ht.shape(), at.shape()),
            ));
        }
        Ok((ht.rows(), ht.cols()))
    }

    /// Row-wise `Σ_t a ⊙ h`, returned as a column vector.
    pub fn weighted_mean(&mut self, h: Var, a: Var) -> Result<Var> {
        let (d, t) = self.check_weighted(h, a, "weighted_mean")?;
        let (hd, ad) = (self.nodes[h.0].value.data(), self.nodes[a.0].value.data());
        let mu: Vec<f64> = (0..d)
            .map(|r| dot(&hd[r * t..(r + 1) * t], &ad[r * t..(r + 1) * t]))
            .collect();
        self.push(Tensor::column(mu), Op::WeightedMean { h, a }, &[h, a])
    }

    /// Row-wise `max(Σ_t a ⊙ h ⊙ h − μ ⊙ μ, 0)` with `μ = Σ_t a ⊙ h`.
    pub fn weighted_var(&mut self, h: Var, a: Var) -> Result<Var> {
        let (d, t) = self.check_weighted(h, a, "weighted_var")?;
        let (hd, ad) = (self.nodes[h.0].value.data(), self.nodes[a.0].value.data());
        let mut mean = Vec::with_capacity(d);
        let mut clamped = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        for r in 0..d {
            let (hr, ar) = (&hd[r * t..(r + 1) * t], &ad[r * t..(r + 1) * t]);
            let mu = dot(hr, ar);
            let sq: f64 = hr.iter().zip(ar).map(|(h, a)| a * h * h).sum();
            let raw = sq - mu * mu;
            mean.push(mu);
            clamped.push(raw < 0.0);
            var.push(raw.max(0.0));
        }
        self.push(
            Tensor::column(var),
            Op::WeightedVar {
                h,
                a,
                mean,
                clamped,
            },
            &[h, a],
        )
    }

    /// Per-row (channel) normalization followed by `gamma`/`beta` affine.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchNormStats,
        eps: f64,
    ) -> Result<Var> {
        let xt = self.check(x)?;
        let (c, t) = (xt.rows(), xt.cols());
        let (gt, bt) = (self.check(gamma)?, self.check(beta)?);
        if gt.len() != c || bt.len() != c {
            return Err(Error::shape("batch_norm", "gamma/beta length"));
        }
        let (mean, var, batch) = match stats {
            BatchNormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                (mean.clone(), var.clone(), false)
            }
            BatchNormStats::Batch => {
                let mut means = Vec::with_capacity(c);
                let mut vars = Vec::with_capacity(c);
                for row in xt.data().chunks(t) {
                    let m = row.iter().sum::<f64>() / t as f64;
                    let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
                    means.push(m);
                    vars.push(v);
                }
                (means, vars, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; c * t];
        let mut y = vec![0.0; c * t];
        for r in 0..c {
            let (g, b) = (gt.data()[r], bt.data()[r]);
            for i in r * t..(r + 1) * t {
                xhat[i] = (xt.data()[i] - mean[r]) * inv_std[r];
                y[i] = g * xhat[i] + b;
            }
        }
        let shape = xt.shape().to_vec();
        self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                batch,
            },
            &[x, gamma, beta],
        )
    }

    /// Cosine similarity of two equally sized tensors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.check(a)?, self.check(b)?);
        if at.len() != bt.len() {
            return Err(Error::shape("cosine", "length mismatch"));
        }
        let c = dot(at.data(), bt.data()) / (norm(at.data()) * norm(bt.data()));
        self.push(Tensor::scalar(c), Op::Cosine { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xt = self.check(x)?;
        let s = xt.data().iter().sum::<f64>() / xt.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Additive angular margin softmax loss for a single embedding.
    ///
    /// `emb` has `E` values, `weights` is `C×E`. Cosines use L2-normalized
    /// embedding and class rows; the target logit is `s·cos(min(θ_y + m, π))`.
    pub fn aam_loss(
        &mut self,
        emb: Var,
        weights: Var,
        label: usize,
        margin: f64,
        scale: f64,
    ) -> Result<Var> {
        let (et, wt) = (self.check(emb)?, self.check(weights)?);
        let e = et.len();
        if wt.shape().len() != 2 || wt.cols() != e {
            return Err(Error::shape(
                "aam_loss",
                format!("weights {:?} vs embedding {e}", wt.shape()),
            ));
        }
        let classes = wt.rows();
        if label >= classes {
            return Err(Error::IndexOutOfRange {
                index: label,
                len: classes,
            });
        }
        let emb_norm = norm(et.data()).max(1e-12);
        let emb_unit: Vec<f64> = et.data().iter().map(|v| v / emb_norm).collect();
        let mut w_norms = Vec::with_capacity(classes);
        let mut w_unit = Vec::with_capacity(classes * e);
        let mut cosines = Vec::with_capacity(classes);
        for row in wt.data().chunks(e) {
            let n = norm(row).max(1e-12);
            w_norms.push(n);
            let start = w_unit.len();
            w_unit.extend(row.iter().map(|v| v / n));
            cosines.push(dot(&emb_unit, &w_unit[start..]).clamp(-1.0, 1.0));
        }
        let (psi, target_dpsi) = margin_cosine(cosines[label], margin);
        let logits: Vec<f64> = cosines
            .iter()
            .enumerate()
            .map(|(j, &c)| scale * if j == label { psi } else { c })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|x| x / total).collect();
        let loss = max + total.ln() - logits[label];
        let saved = AamSaved {
            emb,
            weights,
            label,
            scale,
            emb_norm,
            emb_unit,
            w_norms,
            w_unit,
            cosines,
            probs,
            target_dpsi,
        };
        self.push(
            Tensor::scalar(loss),
            Op::Aam(Box::new(saved)),
            &[emb, weights],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &dy, &mut grads);
            // Interior adjoints are not part of the result.
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Keep only leaves.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let (wt, xt) = (val(*w), val(*x));
                let (out, inp, t) = (wt.rows(), wt.cols(), xt.cols());
                if let Some(b) = b {
                    if self.needs(*b) {
                        let g = acc(grads, *b, out);
                        for (o, row) in dy.chunks(t).enumerate() {
                            g[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.needs(*w) {
                    let g = acc(grads, *w, out * inp);
                    gemm(out, t, inp, dy, false, xt.data(), true, g);
                }
                if self.needs(*x) {
                    let g = acc(grads, *x, inp * t);
                    gemm(inp, out, t, wt.data(), true, dy, false, g);
                }
            }
            Op::Conv1d { w, b, x, dilation } => {
                let (wt, xt) = (val(*w), val(*x));
                let (out, inp, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
                let t = xt.cols();
                let half = (k as isize - 1) / 2;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let g = acc(grads, *b, out);
                        for (o, row) in dy.chunks(t).enumerate() {
                            g[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.needs(*w) {
                    let g = acc(grads, *w, out * inp * k);
                    let cols = im2col(xt.data(), inp, t, k, *dilation);
                    gemm(out, t, inp * k, dy, false, &cols, true, g);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; inp * k * t];
                    gemm(inp * k, out, t, wt.data(), true, dy, false, &mut dcols);
                    let g = acc(grads, *x, inp * t);
                    for (r, drow) in dcols.chunks(t).enumerate() {
                        let (i, kk) = (r / k, r % k);
                        let off = (kk as isize - half) * *dilation as isize;
                        let (ys, xs) = shifted(t, off);
                        for (gv, d) in g[i * t..(i + 1) * t][xs].iter_mut().zip(&drow[ys]) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xt = val(*x);
                let g = acc(grads, *x, xt.len());
                for ((gv, d), xv) in g.iter_mut().zip(dy).zip(xt.data()) {
                    if *xv > 0.0 {
                        *gv += d;
                    }
                }
            }
            Op::RowSoftmax(x) | Op::MaskedSoftmax(x) => {
                // Masked columns have y = 0, so the same expression zeroes
                // their gradient.
                let y = &node.value;
                let c = y.cols();
                let g = acc(grads, *x, y.len());
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.chunks(c)) {
                    let s = dot(yr, dr);
                    for ((gv, yv), d) in gr.iter_mut().zip(yr).zip(dr) {
                        *gv += yv * (d - s);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    for (gv, d) in acc(grads, *a, dy.len()).iter_mut().zip(dy) {
                        *gv += d;
                    }
                }
                if self.needs(*b) {
                    for (gv, d) in acc(grads, *b, dy.len()).iter_mut().zip(dy) {
                        *gv += sign * d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                if self.needs(*a) {
                    for ((gv, d), bv) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(&bt) {
                        *gv += d * bv;
                    }
                }
                if self.needs(*b) {
                    for ((gv, d), av) in acc(grads, *b, dy.len()).iter_mut().zip(dy).zip(&at) {
                        *gv += d * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (at, bt) = (val(*a).data().to_vec(), val(*b).data().to_vec());
                if self.needs(*a) {
                    for ((gv, d), bv) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(&bt) {
                        *gv += d / bv;
                    }
                }
                if self.needs(*b) {
                    let g = acc(grads, *b, dy.len());
                    for i in 0..dy.len() {
                        g[i] -= dy[i] * at[i] / (bt[i] * bt[i]);
                    }
                }
            }
            Op::Sqrt(x) => {
                let xt = val(*x);
                let g = acc(grads, *x, xt.len());
                for i in 0..dy.len() {
                    if xt.data()[i] > SQRT_GRAD_EPS {
                        g[i] += dy[i] * 0.5 / node.value.data()[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                for (gv, d) in acc(grads, *x, dy.len()).iter_mut().zip(dy) {
                    *gv += f * d;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if self.needs(*p) {
                        for (gv, d) in acc(grads, *p, n).iter_mut().zip(&dy[offset..offset + n]) {
                            *gv += d;
                        }
                    }
                    offset += n;
                }
            }
            Op::BroadcastCols(x) => {
                let cols = node.value.cols();
                let g = acc(grads, *x, node.value.rows());
                for (gv, row) in g.iter_mut().zip(dy.chunks(cols)) {
                    *gv += row.iter().sum::<f64>();
                }
            }
            Op::MaskRenorm { a, mask, sums } => {
                let y = &node.value;
                let t = y.cols();
                let g = acc(grads, *a, y.len());
                for (r, ((gr, yr), dr)) in g
                    .chunks_mut(t)
                    .zip(y.data().chunks(t))
                    .zip(dy.chunks(t))
                    .enumerate()
                {
                    let inner = dot(yr, dr);
                    for ((gv, d), &m) in gr.iter_mut().zip(dr).zip(mask) {
                        if m {
                            *gv += (d - inner) / sums[r];
                        }
                    }
                }
            }
            Op::WeightedMean { h, a } => {
                let (ht, at) = (val(*h), val(*a));
                let t = ht.cols();
                if self.needs(*h) {
                    let g = acc(grads, *h, ht.len());
                    for (r, d) in dy.iter().enumerate() {
                        for i in r * t..(r + 1) * t {
                            g[i] += d * at.data()[i];
                        }
                    }
                }
                if self.needs(*a) {
                    let g = acc(grads, *a, at.len());
                    for (r, d) in dy.iter().enumerate() {
                        for i in r * t..(r + 1) * t {
                            g[i] += d * ht.data()[i];
                        }
                    }
                }
            }
            Op::WeightedVar {
                h,
                a,
                mean,
                clamped,
            } => {
                let (ht, at) = (val(*h), val(*a));
                let t = ht.cols();
                if self.needs(*h) {
                    let g = acc(grads, *h, ht.len());
                    for (r, d) in dy.iter().enumerate() {
                        if clamped[r] {
                            continue;
                        }
                        for i in r * t..(r + 1) * t {
                            g[i] += d * 2.0 * at.data()[i] * (ht.data()[i] - mean[r]);
                        }
                    }
                }
                if self.needs(*a) {
                    let g = acc(grads, *a, at.len());
                    for (r, d) in dy.iter().enumerate() {
                        if clamped[r] {
                            continue;
                        }
                        for i in r * t..(r + 1) * t {
                            let hv = ht.data()[i];
                            g[i] += d * (hv * hv - 2.0 * mean[r] * hv);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                batch,
            } => {
                let c = inv_std.len();
                let t = dy.len() / c;
                let gamma_v = val(*gamma).data();
                if self.needs(*beta) {
                    let g = acc(grads, *beta, c);
                    for (r, row) in dy.chunks(t).enumerate() {
                        g[r] += row.iter().sum::<f64>();
                    }
                }
                if self.needs(*gamma) {
                    let g = acc(grads, *gamma, c);
                    for r in 0..c {
                        g[r] += dot(&dy[r * t..(r + 1) * t], &xhat[r * t..(r + 1) * t]);
                    }
                }
                if self.needs(*x) {
                    let g = acc(grads, *x, c * t);
                    for r in 0..c {
                        let (dr, xr) = (&dy[r * t..(r + 1) * t], &xhat[r * t..(r + 1) * t]);
                        let scale = gamma_v[r] * inv_std[r];
                        if *batch {
                            let n = t as f64;
                            let sum_d: f64 = dr.iter().sum();
                            let sum_dx = dot(dr, xr);
                            for i in 0..t {
                                g[r * t + i] += scale * (dr[i] - sum_d / n - xr[i] * sum_dx / n);
                            }
                        } else {
                            for i in 0..t {
                                g[r * t + i] += scale * dr[i];
                            }
                        }
                    }
                }
            }
            Op::Cosine { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let (na, nb) = (norm(av), norm(bv));
                let c = node.value.item();
                let d = dy[0];
                if self.needs(*a) {
                    let g = acc(grads, *a, av.len());
                    for i in 0..av.len() {
                        g[i] += d * (bv[i] / (na * nb) - c * av[i] / (na * na));
                    }
                }
                if self.needs(*b) {
                    let g = acc(grads, *b, bv.len());
                    for i in 0..bv.len() {
                        g[i] += d * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                for gv in acc(grads, *x, n).iter_mut() {
                    *gv += dy[0];
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                for gv in acc(grads, *x, n).iter_mut() {
                    *gv += dy[0] / n as f64;
                }
            }
            Op::Aam(s) => {
                let e = s.emb_unit.len();
                let classes = s.cosines.len();
                let coef: Vec<f64> = (0..classes)
                    .map(|j| {
                        let target = if j == s.label { 1.0 } else { 0.0 };
                        let dlogit = (s.probs[j] - target) * s.scale * dy[0];
                        if j == s.label {
                            dlogit * s.target_dpsi
                        } else {
                            dlogit
                        }
                    })
                    .collect();
                if self.needs(s.emb) {
                    let g = acc(grads, s.emb, e);
                    for (j, cj) in coef.iter().enumerate() {
                        let wu = &s.w_unit[j * e..(j + 1) * e];
                        for i in 0..e {
                            g[i] += cj * (wu[i] - s.cosines[j] * s.emb_unit[i]) / s.emb_norm;
                        }
                    }
                }
                if self.needs(s.weights) {
                    let g = acc(grads, s.weights, classes * e);
                    for (j, cj) in coef.iter().enumerate() {
                        let wu = &s.w_unit[j * e..(j + 1) * e];
                        for i in 0..e {
                            g[j * e + i] +=
                                cj * (s.emb_unit[i] - s.cosines[j] * wu[i]) / s.w_norms[j];
                        }
                    }
                }
            }
        }
    }
}

/// `cos(min(θ + m, π))` for `θ = acos(c)` and its derivative with respect to `c`.
pub(crate) fn margin_cosine(c: f64, margin: f64) -> (f64, f64) {
    let theta = c.clamp(-1.0, 1.0).acos();
    if theta + margin > std::f64::consts::PI {
        return (-1.0, 0.0);
    }
    let sin_theta = (1.0 - c * c).max(1e-12).sqrt();
    let (sm, cm) = margin.sin_cos();
    (c * cm - sin_theta * sm, cm + c * sm / sin_theta)
}

/// Output and input index ranges of a length-`t` row shifted by `off`
/// (`y[t] += x[t + off]`), restricted to valid positions.
/// `c += op(a)·op(b)` for row-major `a` (m×k, stored k×m when `a_t`) and
/// `b` (k×n, stored n×k when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assert above bounds every access made with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows `i·k + kk` hold input row `i` shifted by tap `kk`, zero-padded.
fn im2col(x: &[f64], inp: usize, t: usize, k: usize, dilation: usize) -> Vec<f64> {
    let half = (k as isize - 1) / 2;
    let mut cols = vec![0.0; inp * k * t];
    for (r, row) in cols.chunks_mut(t).enumerate() {
        let (i, kk) = (r / k, r % k);
        let (ys, xs) = shifted(t, (kk as isize - half) * dilation as isize);
        row[ys].copy_from_slice(&x[i * t..(i + 1) * t][xs]);
    }
    cols
}

fn shifted(t: usize, off: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let t = t as isize;
    let lo = (-off).max(0);
    let hi = (t - off).min(t);
    if hi <= lo {
        return (0..0, 0..0);
    }
    (
        lo as usize..hi as usize,
        (lo + off) as usize..(hi + off) as usize,
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
