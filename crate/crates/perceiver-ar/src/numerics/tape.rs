use std::sync::Arc;

use crate::numerics::{kernels, Array, BoolMat, Scalar};
use crate::{Error, Result, Token};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// a @ b^T with b stored row-major as [n, k].
    MatmulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: S },
    /// [n, c] plus a length-c bias broadcast over rows.
    AddRow { a: NodeId, bias: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: S },
    MaskedSoftmax { x: NodeId, mask: Arc<BoolMat>, scale: S },
    SquaredRelu { x: NodeId },
    Rotary { x: NodeId, positions: Arc<Vec<usize>>, span: usize },
    EmbedRows { table: NodeId, ids: Arc<Vec<Token>> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    LogSumExpRows { x: NodeId },
    TakePerRow { x: NodeId, ids: Arc<Vec<Token>> },
    SumAll { x: NodeId },
}

struct Node<S> {
    value: Arc<Array<S>>,
    op: Op<S>,
}

/// Ordered record of operations. Node ids only ever reference earlier nodes,
/// so one reverse sweep visits every node exactly once.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array<S> {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Array<S>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Register an input array. Leaves are the only nodes grad() reports on.
    pub fn leaf(&mut self, value: Array<S>) -> NodeId {
        self.leaf_shared(Arc::new(value))
    }

    /// Register a shared input without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Array<S>>) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    fn push_unchecked(&mut self, value: Arc<Array<S>>, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn push(&mut self, opname: &'static str, value: Array<S>, op: Op<S>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: opname });
        }
        Ok(self.push_unchecked(Arc::new(value), op))
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, format!("expected 2-d array, got {:?}", s))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner extents {} vs {}", ka, kb)));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_into(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        self.push("matmul", Array::from_vec(vec![m, n], out)?, Op::Matmul { a, b })
    }

    /// a @ b^T where b is [n, k]; the usual query-key product shape.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_bt")?;
        let (n, kb) = self.dims2(b, "matmul_bt")?;
        if ka != kb {
            return Err(Error::shape("matmul_bt", format!("inner extents {} vs {}", ka, kb)));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_bt_into(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        self.push("matmul_bt", Array::from_vec(vec![m, n], out)?, Op::MatmulBt { a, b })
    }

    fn elementwise(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(opname, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let arr = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(opname, arr, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * factor).collect();
        let arr = Array::from_vec(va.shape().to_vec(), data)?;
        self.push("scale", arr, Op::Scale { a, factor })
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "add_row")?;
        let vb = self.value(bias);
        if vb.len() != c {
            return Err(Error::shape("add_row", format!("bias len {} vs cols {}", vb.len(), c)));
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            for j in 0..c {
                out.push(va.data()[r * c + j] + vb.data()[j]);
            }
        }
        self.push("add_row", Array::from_vec(vec![n, c], out)?, Op::AddRow { a, bias })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (n, c) = self.dims2(x, "layer_norm")?;
        if c == 0 {
            return Err(Error::shape("layer_norm", "zero channels".to_string()));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain/bias lens {}/{} vs cols {}",
                    self.value(gain).len(),
                    self.value(bias).len(),
                    c
                ),
            ));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![S::zero(); n * c];
        for r in 0..n {
            kernels::layer_norm_row(
                &vx.data()[r * c..(r + 1) * c],
                vg.data(),
                vb.data(),
                eps,
                &mut out[r * c..(r + 1) * c],
            );
        }
        self.push("layer_norm", Array::from_vec(vec![n, c], out)?, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn masked_softmax(&mut self, x: NodeId, mask: Arc<BoolMat>, scale: S) -> Result<NodeId> {
        let (n, m) = self.dims2(x, "masked_softmax")?;
        if mask.rows() != n || mask.cols() != m {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {}x{} vs scores {}x{}", mask.rows(), mask.cols(), n, m),
            ));
        }
        let vx = self.value(x);
        let mut out = vec![S::zero(); n * m];
        for r in 0..n {
            let ok = kernels::masked_softmax_row(
                &vx.data()[r * m..(r + 1) * m],
                mask.row(r),
                scale,
                &mut out[r * m..(r + 1) * m],
            );
            if !ok {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        self.push("masked_softmax", Array::from_vec(vec![n, m], out)?, Op::MaskedSoftmax { x, mask, scale })
    }

    pub fn squared_relu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let mut out = vec![S::zero(); vx.len()];
        kernels::squared_relu(vx.data(), &mut out);
        let arr = Array::from_vec(vx.shape().to_vec(), out)?;
        self.push("squared_relu", arr, Op::SquaredRelu { x })
    }

    /// Rotate the leading `span` columns of each row pairwise by the row's
    /// absolute position; trailing columns pass through unchanged.
    pub fn rotary(&mut self, x: NodeId, positions: Arc<Vec<usize>>, span: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(x, "rotary")?;
        if span % 2 != 0 || span > c {
            return Err(Error::config(format!("rotary span {} invalid for {} dims", span, c)));
        }
        if positions.len() != n {
            return Err(Error::shape("rotary", format!("{} positions for {} rows", positions.len(), n)));
        }
        let vx = self.value(x);
        let mut out = vec![S::zero(); n * c];
        for r in 0..n {
            kernels::rotary_row(
                &vx.data()[r * c..(r + 1) * c],
                positions[r],
                span,
                false,
                &mut out[r * c..(r + 1) * c],
            );
        }
        self.push("rotary", Array::from_vec(vec![n, c], out)?, Op::Rotary { x, positions, span })
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: Arc<Vec<Token>>) -> Result<NodeId> {
        let (vocab, c) = self.dims2(table, "embed_rows")?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids.iter() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id: id as Token, vocab });
            }
            out.extend_from_slice(&vt.data()[id * c..(id + 1) * c]);
        }
        let arr = Array::from_vec(vec![ids.len(), c], out)?;
        self.push("embed_rows", arr, Op::EmbedRows { table, ids })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(x, "slice_rows")?;
        if start + len > n {
            return Err(Error::shape("slice_rows", format!("rows {}..{} of {}", start, start + len, n)));
        }
        let vx = self.value(x);
        let out = vx.data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Array::from_vec(vec![len, c], out)?, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {}..{} of {}", start, start + len, c)));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&vx.data()[r * c + start..r * c + start + len]);
        }
        self.push("slice_cols", Array::from_vec(vec![n, len], out)?, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let n = self.dims2(parts[0], "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (np, cp) = self.dims2(p, "concat_cols")?;
            if np != n {
                return Err(Error::shape("concat_cols", format!("row counts {} vs {}", np, n)));
            }
            total += cp;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.cols();
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let arr = Array::from_vec(vec![n, total], out)?;
        self.push("concat_cols", arr, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Per-row log of the softmax partition function.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = self.dims2(x, "logsumexp_rows")?;
        if c == 0 {
            return Err(Error::shape("logsumexp_rows", "zero columns".to_string()));
        }
        let vx = self.value(x);
        let out: Vec<S> = (0..n).map(|r| kernels::logsumexp_row(&vx.data()[r * c..(r + 1) * c])).collect();
        self.push("logsumexp_rows", Array::from_vec(vec![n], out)?, Op::LogSumExpRows { x })
    }

    /// Pick one entry per row: out[r] = x[r, ids[r]].
    pub fn take_per_row(&mut self, x: NodeId, ids: Arc<Vec<Token>>) -> Result<NodeId> {
        let (n, c) = self.dims2(x, "take_per_row")?;
        if ids.len() != n {
            return Err(Error::shape("take_per_row", format!("{} ids for {} rows", ids.len(), n)));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(n);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= c {
                return Err(Error::TokenOutOfRange { id, vocab: c });
            }
            out.push(vx.data()[r * c + id as usize]);
        }
        self.push("take_per_row", Array::from_vec(vec![n], out)?, Op::TakePerRow { x, ids })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: S = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Array::scalar(total), Op::SumAll { x })
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to `leaves`.
    /// A leaf the loss does not depend on gets a gradient of zeros.
    pub fn grad(&self, loss: NodeId, leaves: &[NodeId]) -> Result<Vec<Array<S>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf grads for collection
            }
        }

        leaves
            .iter()
            .map(|&leaf| {
                let value = self.value(leaf);
                match grads[leaf.0].take() {
                    Some(g) => Array::from_vec(value.shape().to_vec(), g),
                    None => Ok(Array::zeros(value.shape().to_vec())),
                }
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, update: impl FnOnce(&mut [S])) {
        let slot = &mut grads[id.0];
        let buf = slot.get_or_insert_with(|| vec![S::zero(); self.nodes[id.0].value.len()]);
        update(buf);
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    S::gemm(false, true, m, n, k, S::one(), g, vb.data(), S::one(), da);
                });
                self.accumulate(grads, *b, |db| {
                    S::gemm(true, false, k, m, n, S::one(), va.data(), g, S::one(), db);
                });
            }
            Op::MatmulBt { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    S::gemm(false, false, m, n, k, S::one(), g, vb.data(), S::one(), da);
                });
                self.accumulate(grads, *b, |db| {
                    S::gemm(true, false, n, m, k, S::one(), g, va.data(), S::one(), db);
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| axpy(da, g, S::one()));
                self.accumulate(grads, *b, |db| axpy(db, g, S::one()));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |da| axpy(da, g, S::one()));
                self.accumulate(grads, *b, |db| axpy(db, g, -S::one()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] = da[i] + g[i] * vb.data()[i];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] = db[i] + g[i] * va.data()[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(grads, *a, |da| axpy(da, g, f));
            }
            Op::AddRow { a, bias } => {
                let (n, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.accumulate(grads, *a, |da| axpy(da, g, S::one()));
                self.accumulate(grads, *bias, |db| {
                    for r in 0..n {
                        for j in 0..c {
                            db[j] = db[j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.backprop_layer_norm(*x, *gain, *bias, *eps, g, grads);
            }
            Op::MaskedSoftmax { x, mask, scale } => {
                let (n, m) = (out.rows(), out.cols());
                let y = out.data();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..n {
                        let row = r * m;
                        let mut dot = S::zero();
                        for j in 0..m {
                            dot = dot + g[row + j] * y[row + j];
                        }
                        for j in 0..m {
                            if mask.get(r, j) {
                                dx[row + j] =
                                    dx[row + j] + *scale * y[row + j] * (g[row + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::SquaredRelu { x } => {
                let vx = self.value(*x);
                let two = S::of_f64(2.0);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        if vx.data()[i] > S::zero() {
                            dx[i] = dx[i] + g[i] * two * vx.data()[i];
                        }
                    }
                });
            }
            Op::Rotary { x, positions, span } => {
                let c = out.cols();
                self.accumulate(grads, *x, |dx| {
                    let mut tmp = vec![S::zero(); c];
                    for (r, &pos) in positions.iter().enumerate() {
                        kernels::rotary_row(&g[r * c..(r + 1) * c], pos, *span, true, &mut tmp);
                        for j in 0..c {
                            dx[r * c + j] = dx[r * c + j] + tmp[j];
                        }
                    }
                });
            }
            Op::EmbedRows { table, ids } => {
                let c = out.cols();
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let base = id as usize * c;
                        for j in 0..c {
                            dt[base + j] = dt[base + j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let c = out.cols();
                let start = *start;
                self.accumulate(grads, *x, |dx| {
                    for r in 0..*len {
                        for j in 0..c {
                            dx[(start + r) * c + j] = dx[(start + r) * c + j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = out.rows();
                let full = self.value(*x).cols();
                let start = *start;
                self.accumulate(grads, *x, |dx| {
                    for r in 0..n {
                        for j in 0..*len {
                            dx[r * full + start + j] = dx[r * full + start + j] + g[r * *len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(grads, p, |dp| {
                        for r in 0..n {
                            for j in 0..c {
                                dp[r * c + j] = dp[r * c + j] + g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::LogSumExpRows { x } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let lse = out.data();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..lse.len() {
                        for j in 0..c {
                            let p = (vx.data()[r * c + j] - lse[r]).exp();
                            dx[r * c + j] = dx[r * c + j] + g[r] * p;
                        }
                    }
                });
            }
            Op::TakePerRow { x, ids } => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |dx| {
                    for (r, &id) in ids.iter().enumerate() {
                        dx[r * c + id as usize] = dx[r * c + id as usize] + g[r];
                    }
                });
            }
            Op::SumAll { x } => {
                let s = g[0];
                self.accumulate(grads, *x, |dx| {
                    for v in dx.iter_mut() {
                        *v = *v + s;
                    }
                });
            }
        }
    }

    fn backprop_layer_norm(
        &self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let vx = self.value(x);
        let vgain = self.value(gain);
        let (n, c) = (vx.rows(), vx.cols());
        let cn = S::of_f64(c as f64);

        // Recompute per-row moments and normalized values.
        let mut xhat = vec![S::zero(); n * c];
        let mut inv_std = vec![S::zero(); n];
        for r in 0..n {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<S>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * inv;
            }
        }

        self.accumulate(grads, gain, |dg| {
            for r in 0..n {
                for j in 0..c {
                    dg[j] = dg[j] + g[r * c + j] * xhat[r * c + j];
                }
            }
        });
        self.accumulate(grads, bias, |db| {
            for r in 0..n {
                for j in 0..c {
                    db[j] = db[j] + g[r * c + j];
                }
            }
        });
        self.accumulate(grads, x, |dx| {
            for r in 0..n {
                let mut mean_dy = S::zero();
                let mut mean_dy_xhat = S::zero();
                for j in 0..c {
                    let dy = g[r * c + j] * vgain.data()[j];
                    mean_dy = mean_dy + dy;
                    mean_dy_xhat = mean_dy_xhat + dy * xhat[r * c + j];
                }
                mean_dy = mean_dy / cn;
                mean_dy_xhat = mean_dy_xhat / cn;
                for j in 0..c {
                    let dy = g[r * c + j] * vgain.data()[j];
                    dx[r * c + j] = dx[r * c + j]
                        + inv_std[r] * (dy - mean_dy - xhat[r * c + j] * mean_dy_xhat);
                }
            }
        });
    }
}

fn axpy<S: Scalar>(acc: &mut [S], g: &[S], factor: S) {
    for i in 0..acc.len() {
        acc[i] = acc[i] + g[i] * factor;
    }
}
