//! The operation tape and its reverse pass.

use super::{numel_of, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Recorded differentiable operation. Indices refer to the owning graph's arena.
#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    MulElem { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, factor: S, out: TensorId },
    Transpose { a: TensorId, out: TensorId },
    Reshape { a: TensorId, out: TensorId },
    SliceCols { a: TensorId, start: usize, end: usize, out: TensorId },
    SliceRows { a: TensorId, start: usize, end: usize, out: TensorId },
    ConcatCols { inputs: Vec<TensorId>, out: TensorId },
    ConcatRows { inputs: Vec<TensorId>, out: TensorId },
    BroadcastAddBias { a: TensorId, bias: TensorId, out: TensorId },
    SoftmaxRows { a: TensorId, out: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: S, out: TensorId },
    Gelu { a: TensorId, out: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize>, out: TensorId },
    Mean { a: TensorId, out: TensorId },
    Sum { a: TensorId, out: TensorId },
}

impl<S: Scalar> Op<S> {
    fn out(&self) -> TensorId {
        match self {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::MulElem { out, .. }
            | Op::Scale { out, .. }
            | Op::Transpose { out, .. }
            | Op::Reshape { out, .. }
            | Op::SliceCols { out, .. }
            | Op::SliceRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::BroadcastAddBias { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::Mean { out, .. }
            | Op::Sum { out, .. } => *out,
        }
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// Tape-based session: tensor arena plus the ordered record of executed ops.
///
/// `mark_persistent` freezes the current arena (parameter leaves); `reset`
/// drops everything recorded after that point so the next step starts from
/// a clean tape with the same parameters.
#[derive(Debug, Clone)]
pub struct Graph<S: Scalar> {
    tensors: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    persistent: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { tensors: Vec::new(), ops: Vec::new(), persistent: 0 }
    }

    // ── arena access ────────────────────────────────────────────────

    pub fn leaf(
        &mut self,
        shape: &[usize],
        values: Vec<S>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if shape.contains(&0) || numel_of(shape) != values.len() {
            return Err(Error::BadShape {
                op: "leaf",
                expected: "positive extents with product == len(values)",
                got: shape.to_vec(),
            });
        }
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite leaf values");
        Ok(self.push(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad,
        }))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<S>) -> Result<TensorId> {
        self.leaf(shape, values, true)
    }

    /// Non-trainable leaf (inputs, frozen weights).
    pub fn input(&mut self, shape: &[usize], values: Vec<S>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.tensors[id.0].values
    }

    /// Mutable access to leaf values (optimizer updates, quantization
    /// write-back, gradcheck perturbations). Mutating a non-leaf tensor that
    /// already has dependent ops on the tape invalidates the tape.
    pub fn values_mut(&mut self, id: TensorId) -> &mut [S] {
        &mut self.tensors[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.tensors[id.0].values.len(), 1);
        self.tensors[id.0].values[0]
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        if let Some(g) = self.tensors[id.0].grad.as_mut() {
            g.fill(S::zero());
        }
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Freeze the current arena as the persistent parameter set. Must be
    /// called before any ops are recorded.
    pub fn mark_persistent(&mut self) {
        assert!(self.ops.is_empty(), "mark_persistent after ops were recorded");
        self.persistent = self.tensors.len();
    }

    /// Drop all tensors created after `mark_persistent` and clear the tape.
    /// Accumulated gradients on persistent tensors are kept.
    pub fn reset(&mut self) {
        self.tensors.truncate(self.persistent);
        self.ops.clear();
    }

    fn push(&mut self, t: Tensor<S>) -> TensorId {
        self.tensors.push(t);
        TensorId(self.tensors.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> TensorId {
        self.push(Tensor { shape, values, grad: None, requires_grad })
    }

    #[cfg(debug_assertions)]
    fn check_finite(&self, id: TensorId, op: &'static str) -> Result<()> {
        if self.tensors[id.0].values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    #[cfg(not(debug_assertions))]
    fn check_finite(&self, _id: TensorId, _op: &'static str) -> Result<()> {
        Ok(())
    }

    fn want_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    fn expect_2d(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.tensors[id.0];
        if t.shape.len() != 2 {
            return Err(Error::BadShape { op, expected: "2-D tensor", got: t.shape.clone() });
        }
        Ok((t.shape[0], t.shape[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.expect_2d(a, "matmul")?;
        let (k2, n) = self.expect_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        unsafe {
            S::gemm(
                m, k, n,
                S::one(),
                self.tensors[a.0].values.as_ptr(), k as isize, 1,
                self.tensors[b.0].values.as_ptr(), n as isize, 1,
                S::zero(),
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        let rg = self.want_grad(&[a, b]);
        let id = self.push_result(vec![m, n], out, rg);
        self.ops.push(Op::Matmul { a, b, out: id });
        self.check_finite(id, "matmul")?;
        Ok(id)
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<(TensorId, Vec<S>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self.tensors[a.0]
            .values
            .iter()
            .zip(&self.tensors[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((a, out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (_, out) = self.binary_same_shape(a, b, "add", |x, y| x + y)?;
        let rg = self.want_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let id = self.push_result(shape, out, rg);
        self.ops.push(Op::Add { a, b, out: id });
        self.check_finite(id, "add")?;
        Ok(id)
    }

    /// Adds a positional-embedding table to a token matrix. Same contract as
    /// `add`; kept as a named entry point for the embedding step.
    pub fn embedding_add(&mut self, tokens: TensorId, table: TensorId) -> Result<TensorId> {
        self.expect_2d(tokens, "embedding_add")?;
        if self.shape(tokens) != self.shape(table) {
            return Err(Error::ShapeMismatch {
                op: "embedding_add",
                lhs: self.shape(tokens).to_vec(),
                rhs: self.shape(table).to_vec(),
            });
        }
        self.add(tokens, table)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (_, out) = self.binary_same_shape(a, b, "sub", |x, y| x - y)?;
        let rg = self.want_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let id = self.push_result(shape, out, rg);
        self.ops.push(Op::Sub { a, b, out: id });
        self.check_finite(id, "sub")?;
        Ok(id)
    }

    pub fn mul_elementwise(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (_, out) = self.binary_same_shape(a, b, "mul_elementwise", |x, y| x * y)?;
        let rg = self.want_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let id = self.push_result(shape, out, rg);
        self.ops.push(Op::MulElem { a, b, out: id });
        self.check_finite(id, "mul_elementwise")?;
        Ok(id)
    }

    pub fn scale(&mut self, a: TensorId, factor: S) -> Result<TensorId> {
        let out: Vec<S> = self.tensors[a.0].values.iter().map(|&x| x * factor).collect();
        let rg = self.want_grad(&[a]);
        let shape = self.shape(a).to_vec();
        let id = self.push_result(shape, out, rg);
        self.ops.push(Op::Scale { a, factor, out: id });
        self.check_finite(id, "scale")?;
        Ok(id)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.expect_2d(a, "transpose")?;
        let av = &self.tensors[a.0].values;
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = av[r * n + c];
            }
        }
        let rg = self.want_grad(&[a]);
        let id = self.push_result(vec![n, m], out, rg);
        self.ops.push(Op::Transpose { a, out: id });
        Ok(id)
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        if numel_of(new_shape) != self.tensors[a.0].numel() || new_shape.contains(&0) {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "shape with same element count",
                got: new_shape.to_vec(),
            });
        }
        let out = self.tensors[a.0].values.clone();
        let rg = self.want_grad(&[a]);
        let id = self.push_result(new_shape.to_vec(), out, rg);
        self.ops.push(Op::Reshape { a, out: id });
        Ok(id)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.expect_2d(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::BadShape {
                op: "slice_cols",
                expected: "0 <= start < end <= cols",
                got: vec![start, end, n],
            });
        }
        let w = end - start;
        let av = &self.tensors[a.0].values;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + end]);
        }
        let rg = self.want_grad(&[a]);
        let id = self.push_result(vec![m, w], out, rg);
        self.ops.push(Op::SliceCols { a, start, end, out: id });
        Ok(id)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.expect_2d(a, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::BadShape {
                op: "slice_rows",
                expected: "0 <= start < end <= rows",
                got: vec![start, end, m],
            });
        }
        let h = end - start;
        let out = self.tensors[a.0].values[start * n..end * n].to_vec();
        let rg = self.want_grad(&[a]);
        let id = self.push_result(vec![h, n], out, rg);
        self.ops.push(Op::SliceRows { a, start, end, out: id });
        Ok(id)
    }

    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        assert!(!inputs.is_empty(), "concat_cols of zero tensors");
        let (m, _) = self.expect_2d(inputs[0], "concat_cols")?;
        let mut total = 0usize;
        for &id in inputs {
            let (mi, ni) = self.expect_2d(id, "concat_cols")?;
            if mi != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: self.shape(id).to_vec(),
                });
            }
            total += ni;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &id in inputs {
                let n = self.tensors[id.0].cols();
                let av = &self.tensors[id.0].values;
                out.extend_from_slice(&av[r * n..(r + 1) * n]);
            }
        }
        let rg = self.want_grad(inputs);
        let id = self.push_result(vec![m, total], out, rg);
        self.ops.push(Op::ConcatCols { inputs: inputs.to_vec(), out: id });
        Ok(id)
    }

    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        assert!(!inputs.is_empty(), "concat_rows of zero tensors");
        let (_, n) = self.expect_2d(inputs[0], "concat_rows")?;
        let mut total = 0usize;
        for &id in inputs {
            let (mi, ni) = self.expect_2d(id, "concat_rows")?;
            if ni != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: self.shape(id).to_vec(),
                });
            }
            total += mi;
        }
        let mut out = Vec::with_capacity(total * n);
        for &id in inputs {
            out.extend_from_slice(&self.tensors[id.0].values);
        }
        let rg = self.want_grad(inputs);
        let id = self.push_result(vec![total, n], out, rg);
        self.ops.push(Op::ConcatRows { inputs: inputs.to_vec(), out: id });
        Ok(id)
    }

    pub fn broadcast_add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.expect_2d(a, "broadcast_add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let av = &self.tensors[a.0].values;
        let bv = &self.tensors[bias.0].values;
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(av[r * n + c] + bv[c]);
            }
        }
        let rg = self.want_grad(&[a, bias]);
        let id = self.push_result(vec![m, n], out, rg);
        self.ops.push(Op::BroadcastAddBias { a, bias, out: id });
        self.check_finite(id, "broadcast_add_bias")?;
        Ok(id)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.expect_2d(a, "softmax_rows")?;
        let av = &self.tensors[a.0].values;
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(row[0], S::max);
            let mut denom = S::zero();
            for c in 0..n {
                let e = (row[c] - mx).exp();
                out[r * n + c] = e;
                denom = denom + e;
            }
            for c in 0..n {
                out[r * n + c] = out[r * n + c] / denom;
            }
        }
        let rg = self.want_grad(&[a]);
        let id = self.push_result(vec![m, n], out, rg);
        self.ops.push(Op::SoftmaxRows { a, out: id });
        self.check_finite(id, "softmax_rows")?;
        Ok(id)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: S,
    ) -> Result<TensorId> {
        let (m, n) = self.expect_2d(a, "layer_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let av = &self.tensors[a.0].values;
        let gv = &self.tensors[gamma.0].values;
        let bv = &self.tensors[beta.0].values;
        let inv_n = S::one() / S::from_f64(n as f64);
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let mut mean = S::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean * inv_n;
            let mut var = S::zero();
            for &x in row {
                let d = x - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv_std = S::one() / (var + eps).sqrt();
            for c in 0..n {
                let xhat = (row[c] - mean) * inv_std;
                out[r * n + c] = gv[c] * xhat + bv[c];
            }
        }
        let rg = self.want_grad(&[a, gamma, beta]);
        let id = self.push_result(vec![m, n], out, rg);
        self.ops.push(Op::LayerNorm { a, gamma, beta, eps, out: id });
        self.check_finite(id, "layer_norm")?;
        Ok(id)
    }

    /// Tanh-approximation GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let c0 = S::from_f64(GELU_C0);
        let c1 = S::from_f64(GELU_C1);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self.tensors[a.0]
            .values
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (S::one() + u.tanh())
            })
            .collect();
        let rg = self.want_grad(&[a]);
        let shape = self.shape(a).to_vec();
        let id = self.push_result(shape, out, rg);
        self.ops.push(Op::Gelu { a, out: id });
        self.check_finite(id, "gelu")?;
        Ok(id)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, fused through
    /// log-sum-exp. Output is a scalar (shape `[1]`).
    pub fn cross_entropy_logits(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (b, c) = self.expect_2d(logits, "cross_entropy_logits")?;
        if labels.len() != b {
            return Err(Error::BadShape {
                op: "cross_entropy_logits",
                expected: "one label per row",
                got: vec![labels.len(), b],
            });
        }
        for (row, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::LabelOutOfRange { label: l, classes: c, row });
            }
        }
        let lv = &self.tensors[logits.0].values;
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(row[0], S::max);
            let mut sum = S::zero();
            for &x in row {
                sum = sum + (x - mx).exp();
            }
            let lse = mx + sum.ln();
            total = total + (lse - row[label]);
        }
        let loss = total / S::from_f64(b as f64);
        let rg = self.want_grad(&[logits]);
        let id = self.push_result(vec![1], vec![loss], rg);
        self.ops.push(Op::CrossEntropy { logits, labels: labels.to_vec(), out: id });
        self.check_finite(id, "cross_entropy_logits")?;
        Ok(id)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let inv = S::one() / S::from_f64(self.tensors[a.0].numel() as f64);
        let mut total = S::zero();
        for &x in &self.tensors[a.0].values {
            total = total + x;
        }
        let rg = self.want_grad(&[a]);
        let id = self.push_result(vec![1], vec![total * inv], rg);
        self.ops.push(Op::Mean { a, out: id });
        self.check_finite(id, "mean")?;
        Ok(id)
    }

    /// Sum over all elements, producing a scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut total = S::zero();
        for &x in &self.tensors[a.0].values {
            total = total + x;
        }
        let rg = self.want_grad(&[a]);
        let id = self.push_result(vec![1], vec![total], rg);
        self.ops.push(Op::Sum { a, out: id });
        self.check_finite(id, "sum")?;
        Ok(id)
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Runs one reverse pass from a scalar loss, visiting each recorded op
    /// exactly once in reverse execution order, and adds the resulting
    /// gradients into the `grad` buffers of all requires-grad tensors.
    /// Calling backward twice without zeroing doubles the gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::NotScalar { got: self.shape(loss).to_vec() });
        }
        let n = self.tensors.len();
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; n];
        scratch[loss.0] = Some(vec![S::one()]);

        for op in self.ops.iter().rev() {
            self.propagate(op, &mut scratch);
        }

        for (i, buf) in scratch.into_iter().enumerate() {
            if let Some(buf) = buf {
                let t = &mut self.tensors[i];
                if t.requires_grad {
                    let g = t.grad.get_or_insert_with(|| vec![S::zero(); buf.len()]);
                    for (gi, bi) in g.iter_mut().zip(buf) {
                        *gi = *gi + bi;
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<S>, scratch: &mut [Option<Vec<S>>]) {
        // Every op's output id is larger than its input ids (arena order),
        // so splitting at the output gives disjoint access to input buffers.
        let out = op.out();
        let (left, right) = scratch.split_at_mut(out.0);
        let g: &[S] = match right[0].as_deref() {
            Some(g) => g,
            None => return, // not on a path from the loss
        };
        let ensure = |scratch: &mut [Option<Vec<S>>], id: TensorId, len: usize| {
            if scratch[id.0].is_none() {
                scratch[id.0] = Some(vec![S::zero(); len]);
            }
        };
        let scratch = left;

        match op {
            Op::Matmul { a, b, .. } => {
                let (m, k) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                let bn = self.tensors[b.0].cols();
                if self.tensors[a.0].requires_grad {
                    ensure(scratch, *a, m * k);
                    let ga = scratch[a.0].as_mut().unwrap();
                    // grad_a += g · bᵀ
                    unsafe {
                        S::gemm(
                            m, bn, k,
                            S::one(),
                            g.as_ptr(), bn as isize, 1,
                            self.tensors[b.0].values.as_ptr(), 1, bn as isize,
                            S::one(),
                            ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.tensors[b.0].requires_grad {
                    ensure(scratch, *b, k * bn);
                    let gb = scratch[b.0].as_mut().unwrap();
                    // grad_b += aᵀ · g
                    unsafe {
                        S::gemm(
                            k, m, bn,
                            S::one(),
                            self.tensors[a.0].values.as_ptr(), 1, k as isize,
                            g.as_ptr(), bn as isize, 1,
                            S::one(),
                            gb.as_mut_ptr(), bn as isize, 1,
                        );
                    }
                }
            }
            Op::Add { a, b, .. } => {
                for &id in [a, b].into_iter() {
                    if self.tensors[id.0].requires_grad {
                        ensure(scratch, id, g.len());
                        let t = scratch[id.0].as_mut().unwrap();
                        for (ti, gi) in t.iter_mut().zip(g) {
                            *ti = *ti + *gi;
                        }
                    }
                }
            }
            Op::Sub { a, b, .. } => {
                if self.tensors[a.0].requires_grad {
                    ensure(scratch, *a, g.len());
                    let t = scratch[a.0].as_mut().unwrap();
                    for (ti, gi) in t.iter_mut().zip(g) {
                        *ti = *ti + *gi;
                    }
                }
                if self.tensors[b.0].requires_grad {
                    ensure(scratch, *b, g.len());
                    let t = scratch[b.0].as_mut().unwrap();
                    for (ti, gi) in t.iter_mut().zip(g) {
                        *ti = *ti - *gi;
                    }
                }
            }
            Op::MulElem { a, b, .. } => {
                if self.tensors[a.0].requires_grad {
                    ensure(scratch, *a, g.len());
                    let t = scratch[a.0].as_mut().unwrap();
                    for ((ti, gi), bi) in t.iter_mut().zip(g).zip(&self.tensors[b.0].values) {
                        *ti = *ti + *gi * *bi;
                    }
                }
                if self.tensors[b.0].requires_grad {
                    ensure(scratch, *b, g.len());
                    let t = scratch[b.0].as_mut().unwrap();
                    for ((ti, gi), ai) in t.iter_mut().zip(g).zip(&self.tensors[a.0].values) {
                        *ti = *ti + *gi * *ai;
                    }
                }
            }
            Op::Scale { a, factor, .. } => {
                if self.tensors[a.0].requires_grad {
                    ensure(scratch, *a, g.len());
                    let t = scratch[a.0].as_mut().unwrap();
                    for (ti, gi) in t.iter_mut().zip(g) {
                        *ti = *ti + *gi * *factor;
                    }
                }
            }
            Op::Transpose { a, .. } => {
                if self.tensors[a.0].requires_grad {
                    let (m, n) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                    ensure(scratch, *a, m * n);
                    let t = scratch[a.0].as_mut().unwrap();
                    for r in 0..n {
                        for c in 0..m {
                            t[c * n + r] = t[c * n + r] + g[r * m + c];
                        }
                    }
                }
            }
            Op::Reshape { a, .. } => {
                if self.tensors[a.0].requires_grad {
                    ensure(scratch, *a, g.len());
                    let t = scratch[a.0].as_mut().unwrap();
                    for (ti, gi) in t.iter_mut().zip(g) {
                        *ti = *ti + *gi;
                    }
                }
            }
            Op::SliceCols { a, start, end, .. } => {
                if self.tensors[a.0].requires_grad {
                    let (m, n) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                    let w = end - start;
                    ensure(scratch, *a, m * n);
                    let t = scratch[a.0].as_mut().unwrap();
                    for r in 0..m {
                        for c in 0..w {
                            t[r * n + start + c] = t[r * n + start + c] + g[r * w + c];
                        }
                    }
                }
            }
            Op::SliceRows { a, start, end, .. } => {
                if self.tensors[a.0].requires_grad {
                    let (m, n) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                    let _ = end;
                    ensure(scratch, *a, m * n);
                    let t = scratch[a.0].as_mut().unwrap();
                    for (ti, gi) in t[start * n..].iter_mut().zip(g) {
                        *ti = *ti + *gi;
                    }
                }
            }
            Op::ConcatCols { inputs, .. } => {
                let m = self.tensors[out.0].rows();
                let total = self.tensors[out.0].cols();
                let mut offset = 0usize;
                for &id in inputs {
                    let n = self.tensors[id.0].cols();
                    if self.tensors[id.0].requires_grad {
                        ensure(scratch, id, m * n);
                        let t = scratch[id.0].as_mut().unwrap();
                        for r in 0..m {
                            for c in 0..n {
                                t[r * n + c] = t[r * n + c] + g[r * total + offset + c];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatRows { inputs, .. } => {
                let n = self.tensors[out.0].cols();
                let mut offset = 0usize;
                for &id in inputs {
                    let m = self.tensors[id.0].rows();
                    if self.tensors[id.0].requires_grad {
                        ensure(scratch, id, m * n);
                        let t = scratch[id.0].as_mut().unwrap();
                        for (ti, gi) in t.iter_mut().zip(&g[offset * n..(offset + m) * n]) {
                            *ti = *ti + *gi;
                        }
                    }
                    offset += m;
                }
            }
            Op::BroadcastAddBias { a, bias, .. } => {
                let (m, n) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                if self.tensors[a.0].requires_grad {
                    ensure(scratch, *a, m * n);
                    let t = scratch[a.0].as_mut().unwrap();
                    for (ti, gi) in t.iter_mut().zip(g) {
                        *ti = *ti + *gi;
                    }
                }
                if self.tensors[bias.0].requires_grad {
                    ensure(scratch, *bias, n);
                    let t = scratch[bias.0].as_mut().unwrap();
                    for r in 0..m {
                        for c in 0..n {
                            t[c] = t[c] + g[r * n + c];
                        }
                    }
                }
            }
            Op::SoftmaxRows { a, .. } => {
                if self.tensors[a.0].requires_grad {
                    let (m, n) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                    let y = &self.tensors[out.0].values;
                    ensure(scratch, *a, m * n);
                    let t = scratch[a.0].as_mut().unwrap();
                    for r in 0..m {
                        let mut dot = S::zero();
                        for c in 0..n {
                            dot = dot + g[r * n + c] * y[r * n + c];
                        }
                        for c in 0..n {
                            let i = r * n + c;
                            t[i] = t[i] + y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, eps, .. } => {
                let (m, n) = (self.tensors[a.0].rows(), self.tensors[a.0].cols());
                let av = &self.tensors[a.0].values;
                let gv = &self.tensors[gamma.0].values;
                let inv_n = S::one() / S::from_f64(n as f64);
                // Recompute per-row statistics (cheaper than caching them).
                for r in 0..m {
                    let row = &av[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mut mean = S::zero();
                    for &x in row {
                        mean = mean + x;
                    }
                    mean = mean * inv_n;
                    let mut var = S::zero();
                    for &x in row {
                        let d = x - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_std = S::one() / (var + *eps).sqrt();

                    if self.tensors[gamma.0].requires_grad {
                        ensure(scratch, *gamma, n);
                        let t = scratch[gamma.0].as_mut().unwrap();
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv_std;
                            t[c] = t[c] + grow[c] * xhat;
                        }
                    }
                    if self.tensors[beta.0].requires_grad {
                        ensure(scratch, *beta, n);
                        let t = scratch[beta.0].as_mut().unwrap();
                        for c in 0..n {
                            t[c] = t[c] + grow[c];
                        }
                    }
                    if self.tensors[a.0].requires_grad {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..n {
                            let dxhat = grow[c] * gv[c];
                            let xhat = (row[c] - mean) * inv_std;
                            m1 = m1 + dxhat;
                            m2 = m2 + dxhat * xhat;
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        ensure(scratch, *a, m * n);
                        let t = scratch[a.0].as_mut().unwrap();
                        for c in 0..n {
                            let dxhat = grow[c] * gv[c];
                            let xhat = (row[c] - mean) * inv_std;
                            t[r * n + c] = t[r * n + c] + inv_std * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Gelu { a, .. } => {
                if self.tensors[a.0].requires_grad {
                    let c0 = S::from_f64(GELU_C0);
                    let c1 = S::from_f64(GELU_C1);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    ensure(scratch, *a, g.len());
                    let t = scratch[a.0].as_mut().unwrap();
                    for ((ti, gi), &x) in t.iter_mut().zip(g).zip(&self.tensors[a.0].values) {
                        let u = c0 * (x + c1 * x * x * x);
                        let th = u.tanh();
                        let du = c0 * (S::one() + three * c1 * x * x);
                        let d = half * (S::one() + th) + half * x * (S::one() - th * th) * du;
                        *ti = *ti + *gi * d;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, .. } => {
                if self.tensors[logits.0].requires_grad {
                    let (b, c) = (self.tensors[logits.0].rows(), self.tensors[logits.0].cols());
                    let lv = &self.tensors[logits.0].values;
                    let g0 = g[0] / S::from_f64(b as f64);
                    ensure(scratch, *logits, b * c);
                    let t = scratch[logits.0].as_mut().unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &lv[r * c..(r + 1) * c];
                        let mx = row.iter().cloned().fold(row[0], S::max);
                        let mut denom = S::zero();
                        for &x in row {
                            denom = denom + (x - mx).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / denom;
                            let delta = if j == label { S::one() } else { S::zero() };
                            t[r * c + j] = t[r * c + j] + g0 * (p - delta);
                        }
                    }
                }
            }
            Op::Mean { a, .. } => {
                if self.tensors[a.0].requires_grad {
                    let len = self.tensors[a.0].numel();
                    let gi = g[0] / S::from_f64(len as f64);
                    ensure(scratch, *a, len);
                    let t = scratch[a.0].as_mut().unwrap();
                    for ti in t.iter_mut() {
                        *ti = *ti + gi;
                    }
                }
            }
            Op::Sum { a, .. } => {
                if self.tensors[a.0].requires_grad {
                    let len = self.tensors[a.0].numel();
                    ensure(scratch, *a, len);
                    let t = scratch[a.0].as_mut().unwrap();
                    for ti in t.iter_mut() {
                        *ti = *ti + g[0];
                    }
                }
            }
        }
    }
}
