//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters from a
//! [`ParamStore`] occupy the first node ids so that `ParamId(i)` and the
//! tape variable for it coincide; every other node is appended in execution
//! order, which keeps the recording topologically sorted.

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Mean { input: Var, axis: usize },
    Max { input: Var, argmax: Vec<usize> },
    Sum(Var),
    Gather { input: Var, index: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
        kernel: usize,
    },
    /// Scalar output whose local gradients were computed during the forward pass.
    Custom(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: &[],
            nodes: Vec::new(),
        }
    }

    /// Binds every parameter of `store` as a trainable leaf.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: store.tensors(),
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.params.len(), "parameter not bound to tape");
        Var(id.index())
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> &Tensor {
        if v.0 < self.params.len() {
            &self.params[v.0]
        } else {
            &self.nodes[v.0 - self.params.len()].value
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.0 < self.params.len() || self.nodes[v.0 - self.params.len()].requires_grad
    }

    /// Records a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Records a trainable leaf that is not part of a parameter store.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(NumError::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumError {
        NumError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// `b` broadcasts against `a` when each of its (rows, cols) is 1 or equal.
    fn broadcast_dims(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Broadcast::Same(ta.numel()));
        }
        let (ar, ac) = (ta.rows(), ta.cols());
        let (br, bc) = (tb.rows(), tb.cols());
        let rows_ok = br == ar || br == 1;
        let cols_ok = bc == ac || bc == 1;
        if tb.rank() > 2 || !rows_ok || !cols_ok {
            return Err(self.mismatch(op, a, b));
        }
        Ok(Broadcast::Expand {
            rows: ar,
            cols: ac,
            b_rows: br,
            b_cols: bc,
        })
    }

    /// Elementwise sum; `b` may broadcast along rows and/or columns of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_dims("add", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let mut out = ta.clone();
        bc.for_each(|i, j| out.data_mut()[i] += tb.data()[j]);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_dims("mul", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let mut out = ta.clone();
        bc.for_each(|i, j| out.data_mut()[i] *= tb.data()[j]);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(NumError::InvalidArgument {
                op: "concat",
                msg: "need at least one input and axis 0 or 1".into(),
            });
        }
        let dims = inputs
            .iter()
            .map(|&v| self.matrix_dims(v, "concat"))
            .collect::<Result<Vec<_>>>()?;
        let (r0, c0) = dims[0];
        for (idx, &(r, c)) in dims.iter().enumerate() {
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(self.mismatch("concat", inputs[0], inputs[idx]));
            }
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(NumError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} out of bounds for axis {axis} of [{r}, {c}]", start + len),
            });
        }
        let t = self.value(a);
        let out = if axis == 0 {
            Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        self.push("slice", out, Op::Slice { input: a, axis, start }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Softmax over the trailing axis restricted to entries where `keep` is
    /// true; excluded entries get probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if keep.len() != t.numel() {
            return Err(NumError::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let c = t.cols();
        let mut out = t.clone();
        for (row, mask) in out.data_mut().chunks_mut(c).zip(keep.chunks(c)) {
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumError::InvalidArgument {
                    op: "masked_softmax",
                    msg: "row has no unmasked entries".into(),
                });
            }
            let mut total = 0.0;
            for (v, &k) in row.iter_mut().zip(mask) {
                *v = if k { (*v - max).exp() } else { 0.0 };
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push("masked_softmax", out, Op::MaskedSoftmax(a), &[a])
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Mean of a matrix over `axis`, keeping the reduced dimension.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "mean_axis")?;
        let t = self.value(a);
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(t.row(i)) {
                        *s += v;
                    }
                }
                acc.iter_mut().for_each(|s| *s /= r as f64);
                Tensor::new(vec![1, c], acc)?
            }
            1 => {
                let acc = (0..r).map(|i| t.row(i).iter().sum::<f64>() / c as f64).collect();
                Tensor::new(vec![r, 1], acc)?
            }
            _ => {
                return Err(NumError::InvalidArgument {
                    op: "mean_axis",
                    msg: format!("axis {axis}"),
                })
            }
        };
        self.push("mean_axis", out, Op::Mean { input: a, axis }, &[a])
    }

    /// Maximum of a matrix over `axis`, keeping the reduced dimension.
    /// Ties route the gradient to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "max_axis")?;
        let t = self.value(a);
        let (outer, inner, stride_o, stride_i) = match axis {
            0 => (c, r, 1, c),
            1 => (r, c, c, 1),
            _ => {
                return Err(NumError::InvalidArgument {
                    op: "max_axis",
                    msg: format!("axis {axis}"),
                })
            }
        };
        if inner == 0 {
            return Err(NumError::InvalidArgument {
                op: "max_axis",
                msg: "empty reduction".into(),
            });
        }
        let mut values = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = o * stride_o;
            for i in 1..inner {
                let idx = o * stride_o + i * stride_i;
                if t.data()[idx] > t.data()[best] {
                    best = idx;
                }
            }
            values.push(t.data()[best]);
            argmax.push(best);
        }
        let shape = if axis == 0 { vec![1, c] } else { vec![r, 1] };
        self.push("max_axis", Tensor::new(shape, values)?, Op::Max { input: a, argmax }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `out.flat[k] = a.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(NumError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", t.numel()),
            });
        }
        let out = Tensor::new(shape.to_vec(), index.iter().map(|&i| t.data()[i]).collect())?;
        self.push(
            "gather",
            out,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Selects rows of an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumError::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let index: Vec<usize> = ids.iter().flat_map(|&i| (i * d)..(i * d + d)).collect();
        self.gather(table, &index, &[ids.len(), d])
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let t = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Temporal convolution with zero "same" padding.
    ///
    /// `x` is `[T, C_in]`, `weight` is `[K·C_in, C_out]` (kernel tap major),
    /// `bias` holds `C_out` values; the output is `[T, C_out]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, kernel: usize) -> Result<Var> {
        let (t_len, c_in) = self.matrix_dims(x, "conv1d")?;
        let (wk, c_out) = self.matrix_dims(weight, "conv1d")?;
        if kernel.is_multiple_of(2) || wk != kernel * c_in || self.value(bias).numel() != c_out {
            return Err(self.mismatch("conv1d", x, weight));
        }
        let cols = im2col(self.value(x).data(), t_len, c_in, kernel);
        let mut out = matmul_raw(&cols, self.value(weight).data(), t_len, wk, c_out);
        let b = self.value(bias).data();
        for row in out.chunks_mut(c_out) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(
            "conv1d",
            Tensor::new(vec![t_len, c_out], out)?,
            Op::Conv1d {
                x,
                weight,
                bias,
                cols,
                kernel,
            },
            &[x, weight, bias],
        )
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient with respect to each input.
    pub fn custom_scalar(&mut self, name: &'static str, value: f64, local: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &local {
            if self.value(*v).shape() != g.shape() {
                return Err(NumError::ShapeMismatch {
                    op: name,
                    lhs: self.value(*v).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let inputs: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        self.push(name, Tensor::scalar(value), Op::Custom(local), &inputs)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(NumError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} targets for {r}x{c} logits", targets.len()),
            });
        }
        let lp = self.log_softmax(logits)?;
        let index: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
        let picked = self.gather(lp, &index, &[r])?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / r as f64)
    }

    /// Gradients of a scalar `loss` with respect to every node that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumError::NotScalar(lt.shape().to_vec()));
        }
        let n_params = self.params.len();
        let total = self.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; total];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for id in (n_params..=loss.0).rev() {
            let node = &self.nodes[id - n_params];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut leaves = vec![None; total];
        for (id, slot) in leaves.iter_mut().enumerate() {
            let is_leaf = id < n_params || matches!(self.nodes[id - n_params].op, Op::Leaf);
            if is_leaf && self.requires_grad(Var(id)) {
                *slot = Some(
                    grads[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(self.value(Var(id)).shape())),
                );
            }
        }
        Ok(Gradients {
            grads: leaves,
            n_params,
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.requires_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    acc(*a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if self.requires_grad(*b) {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    acc(*b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                if self.requires_grad(*b) {
                    let tb = self.value(*b);
                    let mut gb = Tensor::zeros(tb.shape());
                    self.broadcast_of(*a, *b).for_each(|i, j| gb.data_mut()[j] += g.data()[i]);
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let bc = self.broadcast_of(*a, *b);
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    bc.for_each(|i, j| ga.data_mut()[i] *= tb.data()[j]);
                    acc(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    bc.for_each(|i, j| gb.data_mut()[j] += g.data()[i] * ta.data()[i]);
                    acc(*b, gb);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                acc(*a, g.reshape(shape).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    let part = if *axis == 0 {
                        let gc = g.cols();
                        g.data()[offset * gc..(offset + r) * gc].to_vec()
                    } else {
                        (0..r).flat_map(|i| g.row(i)[offset..offset + c].to_vec()).collect()
                    };
                    offset += if *axis == 0 { r } else { c };
                    acc(v, Tensor::new(vec![r, c], part).unwrap());
                }
            }
            Op::Slice { input, axis, start } => {
                let t = self.value(*input);
                let c = t.cols();
                let mut gi = Tensor::zeros(t.shape());
                if *axis == 0 {
                    gi.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                } else {
                    let len = g.cols();
                    for i in 0..t.rows() {
                        gi.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                    }
                }
                acc(*input, gi);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 });
                acc(*a, Tensor::new(x.shape().to_vec(), data.collect()).unwrap());
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * gv });
                acc(*a, Tensor::new(x.shape().to_vec(), data.collect()).unwrap());
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let c = y.cols();
                let mut gi = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    gi.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), gi).unwrap());
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut gi = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    gi.extend(yr.iter().zip(gr).map(|(ly, q)| q - ly.exp() * total));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), gi).unwrap());
            }
            Op::Mean { input, axis } => {
                let t = self.value(*input);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut gi = Tensor::zeros(t.shape());
                for i in 0..r {
                    for j in 0..c {
                        gi.data_mut()[i * c + j] = if *axis == 0 {
                            g.data()[j] / r as f64
                        } else {
                            g.data()[i] / c as f64
                        };
                    }
                }
                acc(*input, gi);
            }
            Op::Max { input, argmax } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                for (k, &idx) in argmax.iter().enumerate() {
                    gi.data_mut()[idx] += g.data()[k];
                }
                acc(*input, gi);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Gather { input, index } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                for (k, &idx) in index.iter().enumerate() {
                    gi.data_mut()[idx] += g.data()[k];
                }
                acc(*input, gi);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let c = gam.len();
                let r = rstd.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        dx.push(rstd[i] / cf * (cf * d - sum_d - hr[j] * sum_dh));
                    }
                }
                acc(*x, Tensor::new(vec![r, c], dx).unwrap());
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                acc(*gamma, Tensor::new(gshape, dgamma).unwrap());
                acc(*beta, Tensor::new(bshape, dbeta).unwrap());
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                cols,
                kernel,
            } => {
                let tw = self.value(*weight);
                let (wk, c_out) = (tw.shape()[0], tw.shape()[1]);
                let t_len = g.rows();
                if self.requires_grad(*weight) {
                    let gw = matmul_tn(cols, g.data(), t_len, wk, c_out);
                    acc(*weight, Tensor::new(vec![wk, c_out], gw).unwrap());
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; c_out];
                    for row in g.data().chunks(c_out) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, gb).unwrap());
                }
                if self.requires_grad(*x) {
                    let gcols = matmul_nt(g.data(), tw.data(), t_len, c_out, wk);
                    let c_in = wk / kernel;
                    let gx = col2im(&gcols, t_len, c_in, *kernel);
                    acc(*x, Tensor::new(vec![t_len, c_in], gx).unwrap());
                }
            }
            Op::Custom(local) => {
                let up = g.item();
                for (v, lg) in local {
                    acc(*v, lg.map(|q| q * up));
                }
            }
        }
    }

    fn broadcast_of(&self, a: Var, b: Var) -> Broadcast {
        // Shapes were validated when the node was recorded.
        self.broadcast_dims("broadcast", a, b).expect("validated at record time")
    }
}

enum Broadcast {
    Same(usize),
    Expand {
        rows: usize,
        cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
}

impl Broadcast {
    /// Calls `f(out_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match *self {
            Broadcast::Same(n) => (0..n).for_each(|i| f(i, i)),
            Broadcast::Expand {
                rows,
                cols,
                b_rows,
                b_cols,
            } => {
                for i in 0..rows {
                    let bi = if b_rows == 1 { 0 } else { i };
                    for j in 0..cols {
                        let bj = if b_cols == 1 { 0 } else { j };
                        f(i * cols + j, bi * b_cols + bj);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    n_params: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or(NumError::Detached(v.0))
    }

    /// Gradients for every bound parameter, in parameter order.
    pub fn into_param_grads(mut self) -> Vec<Tensor> {
        self.grads.truncate(self.n_params);
        self.grads
            .into_iter()
            .map(|g| g.expect("parameters always require grad"))
            .collect()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `log Σ exp(x)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn im2col(x: &[f64], t_len: usize, c_in: usize, kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let width = kernel * c_in;
    let mut cols = vec![0.0; t_len * width];
    for t in 0..t_len {
        for k in 0..kernel {
            let src = t as isize + k as isize - half as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            cols[t * width + k * c_in..t * width + (k + 1) * c_in].copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
    cols
}

fn col2im(cols: &[f64], t_len: usize, c_in: usize, kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let width = kernel * c_in;
    let mut x = vec![0.0; t_len * c_in];
    for t in 0..t_len {
        for k in 0..kernel {
            let src = t as isize + k as isize - half as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..c_in {
                x[src * c_in + c] += cols[t * width + k * c_in + c];
            }
        }
    }
    x
}
