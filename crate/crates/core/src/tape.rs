//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass in
//! topological (creation) order and replays them in reverse to accumulate
//! gradients. The primitive set is the minimal closure needed for a small
//! GPT-style decoder plus the mask-training objectives: matmul, elementwise
//! add/mul, bias broadcast, transpose, embedding gather, row softmax,
//! layer norm, GELU (tanh form), sigmoid, cross-entropy, sum/mean, column
//! and row slicing, and a straight-through clamp for stochastic gates.
//!
//! Forward results are deterministic: reductions run in a fixed order and
//! every op output is checked finite before it is admitted to the graph.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Transpose { a: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, lo: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, lo: usize },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Clamp01Ste { a: NodeId },
}

/// Recorded compute graph. One forward, one backward.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            backward_done: false,
        }
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient buffer for `id`; empty when the node takes no gradient.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, t: Tensor, op: Op, needs: bool) -> NodeId {
        let id = NodeId(self.values.len());
        let grad = if needs { vec![0.0; t.numel()] } else { Vec::new() };
        self.values.push(t);
        self.grads.push(grad);
        self.ops.push(op);
        self.needs.push(needs);
        id
    }

    fn emit(&mut self, op: &'static str, t: Tensor, node: Op, parents: &[NodeId]) -> Result<NodeId> {
        t.check_finite(op)?;
        let needs = parents.iter().any(|p| self.needs[p.0]);
        Ok(self.push(t, node, needs))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        mm_nn(va.data(), vb.data(), m, k, n, &mut out);
        let t = Tensor::from_vec(vec![m, n], out)?;
        self.emit("matmul", t, Op::Matmul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit(name, t, node, &[a, b])
    }

    /// `[r x c] + [c]` row-broadcast.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape().len() != 2 || vb.shape().len() != 1 || va.cols() != vb.shape()[0] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let c = va.cols();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % c])
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit("add_bias", t, Op::AddBias { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x * c).collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit("scale", t, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x + c).collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit("add_scalar", t, Op::AddScalar { a }, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: va.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let t = Tensor::from_vec(vec![n, m], out)?;
        self.emit("transpose", t, Op::Transpose { a }, &[a])
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (vt.rows(), vt.cols());
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_vec(vec![ids.len(), d], out)?;
        self.emit(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 || lo >= hi || hi > va.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: va.shape().to_vec(),
                rhs: vec![lo, hi],
            });
        }
        let (m, n, w) = (va.rows(), va.cols(), hi - lo);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&va.data()[i * n + lo..i * n + hi]);
        }
        let t = Tensor::from_vec(vec![m, w], out)?;
        self.emit("slice_cols", t, Op::SliceCols { a, lo }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.shape().len() != 2 || vp.rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: vp.shape().to_vec(),
                });
            }
            total += vp.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let vp = self.value(p);
                let n = vp.cols();
                out.extend_from_slice(&vp.data()[i * n..(i + 1) * n]);
            }
        }
        let t = Tensor::from_vec(vec![m, total], out)?;
        self.emit(
            "concat_cols",
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 || lo >= hi || hi > va.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: va.shape().to_vec(),
                rhs: vec![lo, hi],
            });
        }
        let n = va.cols();
        let out = va.data()[lo * n..hi * n].to_vec();
        let t = Tensor::from_vec(vec![hi - lo, n], out)?;
        self.emit("slice_rows", t, Op::SliceRows { a, lo }, &[a])
    }

    /// Numerically stable softmax along the last dimension.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let n = *shape.last().ok_or(Error::Shape {
            op: "softmax_rows",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_vec(shape, out)?;
        self.emit("softmax_rows", t, Op::SoftmaxRows { a }, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap_or(&0);
        if d == 0 || vg.shape() != [d] || vb.shape() != [d] || eps <= 0.0 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * rstd * vg.data()[j] + vb.data()[j]);
            }
        }
        let t = Tensor::from_vec(vx.shape().to_vec(), out)?;
        self.emit(
            "layer_norm",
            t,
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit("gelu", t, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit("sigmoid", t, Op::Sigmoid { a }, &[a])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.rows() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = vl.cols();
        for &t in targets {
            if t >= c {
                return Err(Error::Index {
                    context: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
        }
        let n = targets.len();
        let mut loss = 0.0;
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            loss += log_sum_exp(row) - row[t];
        }
        loss /= n as f64;
        let t = Tensor::from_vec(vec![1], vec![loss])?;
        self.emit(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let t = Tensor::from_vec(vec![1], vec![s])?;
        self.emit("sum", t, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.numel() as f64;
        let t = Tensor::from_vec(vec![1], vec![s])?;
        self.emit("mean", t, Op::Mean { a }, &[a])
    }

    /// clamp(x, 0, 1) forward; identity backward (straight-through).
    pub fn clamp01_ste(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.emit("clamp01_ste", t, Op::Clamp01Ste { a }, &[a])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagate gradients from a scalar output back to every node that
    /// requires them. Visits each recorded op exactly once, in reverse
    /// topological order.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Argument(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(out).numel() != 1 {
            return Err(Error::Argument(
                "backward requires a scalar output".into(),
            ));
        }
        self.backward_done = true;
        if !self.needs[out.0] {
            return Ok(());
        }
        self.grads[out.0][0] = 1.0;

        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let op = self.ops[i].clone();
            self.apply_backward(i, &op, &g);
            self.grads[i] = g;
        }
        for g in &self.grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if self.needs[id.0] {
            f(&mut self.grads[id.0]);
        }
    }

    fn apply_backward(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.values[a.0].rows(), self.values[a.0].cols());
                let n = self.values[b.0].cols();
                if self.needs[a.0] {
                    let vb = std::mem::take(&mut self.grads[a.0]);
                    let mut da = vb;
                    mm_nt(g, self.values[b.0].data(), m, n, k, &mut da);
                    self.grads[a.0] = da;
                }
                if self.needs[b.0] {
                    let mut db = std::mem::take(&mut self.grads[b.0]);
                    mm_tn(self.values[a.0].data(), g, m, k, n, &mut db);
                    self.grads[b.0] = db;
                }
            }
            Op::Add { a, b } => {
                self.acc(a, |da| axpy(1.0, g, da));
                self.acc(b, |db| axpy(1.0, g, db));
            }
            Op::Sub { a, b } => {
                self.acc(a, |da| axpy(1.0, g, da));
                self.acc(b, |db| axpy(-1.0, g, db));
            }
            Op::Mul { a, b } => {
                if self.needs[a.0] {
                    let vb = self.values[b.0].data().to_vec();
                    let da = &mut self.grads[a.0];
                    for j in 0..g.len() {
                        da[j] += g[j] * vb[j];
                    }
                }
                if self.needs[b.0] {
                    let va = self.values[a.0].data().to_vec();
                    let db = &mut self.grads[b.0];
                    for j in 0..g.len() {
                        db[j] += g[j] * va[j];
                    }
                }
            }
            Op::AddBias { a, bias } => {
                self.acc(a, |da| axpy(1.0, g, da));
                let c = self.values[bias.0].numel();
                self.acc(bias, |db| {
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % c] += gv;
                    }
                });
            }
            Op::Scale { a, c } => self.acc(a, |da| axpy(c, g, da)),
            Op::AddScalar { a } => self.acc(a, |da| axpy(1.0, g, da)),
            Op::Transpose { a } => {
                let (m, n) = (self.values[a.0].rows(), self.values[a.0].cols());
                self.acc(a, |da| {
                    for r in 0..n {
                        for cidx in 0..m {
                            da[cidx * n + r] += g[r * m + cidx];
                        }
                    }
                });
            }
            Op::GatherRows { table, ref ids } => {
                let d = self.values[table.0].cols();
                self.acc(table, |dt| {
                    for (t, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[t * d..(t + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::SliceCols { a, lo } => {
                let n = self.values[a.0].cols();
                let w = self.values[i].cols();
                let m = self.values[i].rows();
                self.acc(a, |da| {
                    for r in 0..m {
                        axpy(1.0, &g[r * w..(r + 1) * w], &mut da[r * n + lo..r * n + lo + w]);
                    }
                });
            }
            Op::ConcatCols { ref parts } => {
                let m = self.values[i].rows();
                let total = self.values[i].cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.values[p.0].cols();
                    if self.needs[p.0] {
                        let dp = &mut self.grads[p.0];
                        for r in 0..m {
                            axpy(1.0, &g[r * total + off..r * total + off + w], &mut dp[r * w..(r + 1) * w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, lo } => {
                let n = self.values[a.0].cols();
                self.acc(a, |da| axpy(1.0, g, &mut da[lo * n..lo * n + g.len()]));
            }
            Op::SoftmaxRows { a } => {
                let y = self.values[i].data().to_vec();
                let n = *self.values[i].shape().last().unwrap();
                self.acc(a, |da| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            da[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.values[x.0].data().to_vec();
                let vg = self.values[gamma.0].data().to_vec();
                let d = vg.len();
                let rows = vx.len() / d;
                for r in 0..rows {
                    let xr = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * rstd).collect();
                    if self.needs[gamma.0] {
                        let dg = &mut self.grads[gamma.0];
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if self.needs[beta.0] {
                        let db = &mut self.grads[beta.0];
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    if self.needs[x.0] {
                        // dxhat = g * gamma; dx via the two row reductions
                        let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * vg[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                        let dx = &mut self.grads[x.0];
                        for j in 0..d {
                            dx[r * d + j] +=
                                rstd * (dxhat[j] - s1 / d as f64 - xhat[j] * s2 / d as f64);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let va = self.values[a.0].data().to_vec();
                self.acc(a, |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * gelu_grad(va[j]);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = self.values[i].data().to_vec();
                self.acc(a, |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::CrossEntropy { logits, ref targets } => {
                let vl = self.values[logits.0].data().to_vec();
                let c = self.values[logits.0].cols();
                let n = targets.len() as f64;
                let go = g[0];
                self.acc(logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &vl[r * c..(r + 1) * c];
                        let mut probs = row.to_vec();
                        softmax_in_place(&mut probs);
                        for j in 0..c {
                            let delta = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += go * (probs[j] - delta) / n;
                        }
                    }
                });
            }
            Op::Sum { a } => self.acc(a, |da| {
                for v in da.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean { a } => {
                let n = self.values[a.0].numel() as f64;
                self.acc(a, |da| {
                    for v in da.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::Clamp01Ste { a } => self.acc(a, |da| axpy(1.0, g, da)),
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += c * xv;
    }
}

/// out += a[m x k] . b[k x n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// out += a[m x n] . b[k x n]^T  (row dot products)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, ov) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *ov += s;
        }
    }
}

/// out += a[m x k]^T . b[m x n]  (rank-1 updates)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::substream;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Tape::new();
        let i2 = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_rows() {
        let mut g = Tape::new();
        let p = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let a = g.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(p, a).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Tape::new();
        let a = g.constant(t2(2, 3, &[0.0; 6]));
        let b = g.constant(t2(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut g = Tape::new();
        let x = g.constant(t2(1, 3, &[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t2(1, 3, &[1000.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12 && d[2] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = substream(3, "test");
        let x = Tensor::randn(vec![5, 7], 2.0, &mut rng);
        let mut g = Tape::new();
        let xid = g.constant(x);
        let y = g.softmax_rows(xid).unwrap();
        for row in g.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Tape::new();
        let x = g.constant(t2(2, 4, &[0.0; 8]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_is_near_zero() {
        let mut g = Tape::new();
        let x = g.constant(t2(1, 3, &[40.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Tape::new();
        let x = g.constant(t2(1, 3, &[0.0; 3]));
        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let mut rng = substream(11, "ce");
        for _ in 0..20 {
            let x = Tensor::randn(vec![3, 5], 3.0, &mut rng);
            let mut g = Tape::new();
            let xid = g.constant(x);
            let l = g.cross_entropy(xid, &[0, 2, 4]).unwrap();
            assert!(g.value(l).item() >= 0.0);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Tape::new();
        let x = g.constant(t2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
        let gamma = g.constant(Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap());
        let beta = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut g = Tape::new();
        let x = g.constant(t2(2, 3, &[1.0, -2.0, 5.0, 0.5, 0.0, 9.0]));
        let gamma = g.constant(Tensor::zeros(vec![3]));
        let beta = g.constant(Tensor::from_vec(vec![3], vec![7.0, -1.0, 2.5]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, -1.0, 2.5, 7.0, -1.0, 2.5]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Tape::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn ste_clamp_backward_is_identity() {
        let mut g = Tape::new();
        let x = g.input(Tensor::from_vec(vec![3], vec![-0.5, 0.5, 1.7]).unwrap());
        let y = g.clamp01_ste(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn forward_bit_identical_across_runs() {
        let run = || {
            let mut rng = substream(5, "det");
            let a = Tensor::randn(vec![8, 8], 1.0, &mut rng);
            let b = Tensor::randn(vec![8, 8], 1.0, &mut rng);
            let mut g = Tape::new();
            let (a, b) = (g.constant(a), g.constant(b));
            let y = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(y).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    // ── finite-difference oracles ───────────────────────────────────────

    #[test]
    fn grad_matmul_matches_finite_differences() {
        let mut rng = substream(1, "fd-matmul");
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                g.sum(y)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_cross_entropy_matches_finite_differences() {
        let mut rng = substream(2, "fd-ce");
        let x = Tensor::randn(vec![3, 5], 1.5, &mut rng);
        let err = grad_check(
            |g, ids| g.cross_entropy(ids[0], &[1, 0, 4]),
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_layer_norm_matches_finite_differences() {
        let mut rng = substream(3, "fd-ln");
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let gamma = Tensor::randn(vec![6], 1.0, &mut rng);
        let beta = Tensor::randn(vec![6], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &[x, gamma, beta],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_softmax_gelu_sigmoid_matches_finite_differences() {
        let mut rng = substream(4, "fd-act");
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let s = g.softmax_rows(ids[0])?;
                let ge = g.gelu(s)?;
                let si = g.sigmoid(ge)?;
                g.sum(si)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_mlp_cross_entropy_matches_finite_differences() {
        // two-layer MLP into cross-entropy, all parameters checked
        let mut rng = substream(5, "fd-mlp");
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let w1 = Tensor::randn(vec![6, 8], 0.5, &mut rng);
        let b1 = Tensor::randn(vec![8], 0.1, &mut rng);
        let w2 = Tensor::randn(vec![8, 3], 0.5, &mut rng);
        let b2 = Tensor::randn(vec![3], 0.1, &mut rng);
        let err = grad_check(
            |g, ids| {
                let h = g.matmul(ids[0], ids[1])?;
                let h = g.add_bias(h, ids[2])?;
                let h = g.gelu(h)?;
                let o = g.matmul(h, ids[3])?;
                let o = g.add_bias(o, ids[4])?;
                g.cross_entropy(o, &[0, 1, 2, 0])
            },
            &[x, w1, b1, w2, b2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_gather_slice_concat_matches_finite_differences() {
        let mut rng = substream(6, "fd-moves");
        let table = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let rows = g.gather_rows(ids[0], &[0, 2, 2, 4])?;
                let left = g.slice_cols(rows, 0, 2)?;
                let right = g.slice_cols(rows, 2, 4)?;
                let swapped = g.concat_cols(&[right, left])?;
                let top = g.slice_rows(swapped, 0, 2)?;
                let sq = g.mul(top, top)?;
                g.sum(sq)
            },
            &[table],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }
}
