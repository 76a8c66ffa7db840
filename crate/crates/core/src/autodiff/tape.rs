//! Reverse-mode tape over dense tensors.
//!
//! Every forward op records its parents and enough context to replay its
//! vector-Jacobian product. Node indices are created in topological order, so
//! backward is a single reverse sweep with fixed accumulation order.

use super::tensor::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    /// Row-vector bias broadcast over rows.
    AddBias,
    /// Scalar tensor broadcast over all elements.
    AddScalar,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    /// `out = a^T * b` without materializing the transpose.
    MatmulTN,
    Transpose,
    Relu,
    LeakyRelu(f64),
    SoftmaxRows,
    MaxOverRows { argmax: Vec<usize> },
    ConcatRows { row_splits: Vec<usize> },
    ConcatCols { col_splits: Vec<usize> },
    GatherRows { idx: Vec<usize> },
    Sum,
    Mean,
    SqDiffSum,
    CrossEntropy { labels: Vec<usize> },
    ChamferToFixed {
        cloud: Vec<[f64; 3]>,
        nearest_of_anchor: Vec<usize>,
        nearest_of_point: Vec<usize>,
    },
}

struct Node {
    op: Op,
    parents: Vec<VarId>,
    requires: bool,
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Gradients per tape node after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires
    }

    fn push(
        &mut self,
        op: Op,
        parents: Vec<VarId>,
        value: Tensor,
        op_name: &'static str,
    ) -> Result<VarId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires = parents.iter().any(|p| self.nodes[p.0].requires);
        self.vals.push(value);
        self.nodes.push(Node {
            op,
            parents,
            requires,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Trainable leaf; participates in backward.
    pub fn leaf(&mut self, value: Tensor) -> Result<VarId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.vals.push(value);
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            requires: true,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "constant" });
        }
        self.vals.push(value);
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            requires: false,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> AutodiffError {
        AutodiffError::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::Add, vec![a, b], out, "add")
    }

    /// `a + bias` where `bias` is `1 x C` broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[bias.0]);
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Self::shape_err("add_bias", ta, tb));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        let out = Tensor::from_vec(ta.rows(), cols, data)?;
        self.push(Op::AddBias, vec![a, bias], out, "add_bias")
    }

    /// `a + s` where `s` is a scalar tensor broadcast over every element.
    pub fn add_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId, AutodiffError> {
        let (ta, ts) = (&self.vals[a.0], &self.vals[s.0]);
        if ts.numel() != 1 {
            return Err(Self::shape_err("add_scalar", ta, ts));
        }
        let sv = ts.item();
        let data = ta.data().iter().map(|x| x + sv).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::AddScalar, vec![a, s], out, "add_scalar")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("sub", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::Sub, vec![a, b], out, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::Mul, vec![a, b], out, "mul")
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|x| x * k).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::Scale(k), vec![a], out, "scale")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta, tb);
        self.push(Op::Matmul, vec![a, b], out, "matmul")
    }

    /// `a^T * b` for `a: N x M`, `b: N x D`.
    pub fn matmul_tn(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rows() != tb.rows() {
            return Err(Self::shape_err("matmul_tn", ta, tb));
        }
        let (n, m) = ta.shape();
        let d = tb.cols();
        let mut out = Tensor::zeros(m, d);
        for k in 0..n {
            let brow = tb.row(k);
            for i in 0..m {
                let av = ta.at(k, i);
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out.data_mut()[i * d..(i + 1) * d];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Op::MatmulTN, vec![a, b], out, "matmul_tn")
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId, AutodiffError> {
        let out = transpose_raw(&self.vals[a.0]);
        self.push(Op::Transpose, vec![a], out, "transpose")
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::Relu, vec![a], out, "relu")
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[a.0];
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::LeakyRelu(slope), vec![a], out, "leaky_relu")
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[a.0];
        let (r, c) = ta.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / denom));
        }
        let out = Tensor::from_vec(r, c, data)?;
        self.push(Op::SoftmaxRows, vec![a], out, "softmax_rows")
    }

    /// Column-wise max over rows; output `1 x C`. Ties break to the lowest
    /// row index, which also receives the whole gradient.
    pub fn max_over_rows(&mut self, a: VarId) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[a.0];
        let (r, c) = ta.shape();
        let mut argmax = vec![0usize; c];
        let mut vals = ta.row(0).to_vec();
        for i in 1..r {
            for j in 0..c {
                let v = ta.at(i, j);
                if v > vals[j] {
                    vals[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::from_vec(1, c, vals)?;
        self.push(Op::MaxOverRows { argmax }, vec![a], out, "max_over_rows")
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, AutodiffError> {
        let cols = self.vals[parts[0].0].cols();
        let mut row_splits = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.vals[p.0];
            if t.cols() != cols {
                return Err(Self::shape_err("concat_rows", &self.vals[parts[0].0], t));
            }
            row_splits.push(t.rows());
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(Op::ConcatRows { row_splits }, parts.to_vec(), out, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, AutodiffError> {
        let rows = self.vals[parts[0].0].rows();
        let mut col_splits = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.vals[p.0];
            if t.rows() != rows {
                return Err(Self::shape_err("concat_cols", &self.vals[parts[0].0], t));
            }
            col_splits.push(t.cols());
        }
        let cols: usize = col_splits.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.vals[p.0].row(i));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(Op::ConcatCols { col_splits }, parts.to_vec(), out, "concat_cols")
    }

    /// Select rows by index; duplicate indices accumulate gradient.
    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[a.0];
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= ta.rows() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "gather_rows: index {i} out of {} rows",
                    ta.rows()
                )));
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data)?;
        self.push(
            Op::GatherRows { idx: idx.to_vec() },
            vec![a],
            out,
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId, AutodiffError> {
        let s: f64 = self.vals[a.0].data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId, AutodiffError> {
        let t = &self.vals[a.0];
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean, vec![a], Tensor::scalar(s), "mean")
    }

    /// `sum((a - b)^2)` over all elements.
    pub fn sq_diff_sum(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("sq_diff_sum", ta, tb));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::SqDiffSum, vec![a, b], Tensor::scalar(s), "sq_diff_sum")
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId, AutodiffError> {
        let t = &self.vals[logits.0];
        let (r, c) = t.shape();
        if labels.len() != r {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cross_entropy: {} labels for {r} rows",
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(AutodiffError::BadLabel { label: y, classes: c });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / r as f64);
        self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            out,
            "cross_entropy",
        )
    }

    /// Differentiable Chamfer distance between `anchors` (M x 3) and a fixed
    /// cloud. Gradient flows only through min-selected pairs; ties break to
    /// the lowest index.
    pub fn chamfer_to_fixed(
        &mut self,
        anchors: VarId,
        cloud: &[[f64; 3]],
    ) -> Result<VarId, AutodiffError> {
        let ta = &self.vals[anchors.0];
        if ta.cols() != 3 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "chamfer_to_fixed: anchors must be Mx3, got {:?}",
                ta.shape()
            )));
        }
        let m = ta.rows();
        let n = cloud.len();
        let d2 = |i: usize, x: &[f64; 3]| {
            let dx = ta.at(i, 0) - x[0];
            let dy = ta.at(i, 1) - x[1];
            let dz = ta.at(i, 2) - x[2];
            dx * dx + dy * dy + dz * dz
        };
        let mut nearest_of_anchor = vec![0usize; m];
        let mut term_a = 0.0;
        for i in 0..m {
            let mut best = f64::INFINITY;
            for (j, x) in cloud.iter().enumerate() {
                let d = d2(i, x);
                if d < best {
                    best = d;
                    nearest_of_anchor[i] = j;
                }
            }
            term_a += best;
        }
        let mut nearest_of_point = vec![0usize; n];
        let mut term_x = 0.0;
        for (j, x) in cloud.iter().enumerate() {
            let mut best = f64::INFINITY;
            for i in 0..m {
                let d = d2(i, x);
                if d < best {
                    best = d;
                    nearest_of_point[j] = i;
                }
            }
            term_x += best;
        }
        let out = Tensor::scalar(term_a / m as f64 + term_x / n as f64);
        self.push(
            Op::ChamferToFixed {
                cloud: cloud.to_vec(),
                nearest_of_anchor,
                nearest_of_point,
            },
            vec![anchors],
            out,
            "chamfer_to_fixed",
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients for every
    /// node on a path from a grad-requiring leaf to the loss.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, AutodiffError> {
        let lt = &self.vals[loss.0];
        if lt.numel() != 1 {
            return Err(AutodiffError::NotScalar { elems: lt.numel() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let parents = &node.parents;
        let add_to = |grads: &mut [Option<Tensor>], p: VarId, delta: Tensor| {
            if !self.nodes[p.0].requires {
                return;
            }
            match &mut grads[p.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(grads, parents[0], g.clone());
                add_to(grads, parents[1], g.clone());
            }
            Op::AddBias => {
                add_to(grads, parents[0], g.clone());
                let (r, c) = g.shape();
                let mut db = Tensor::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        db.data_mut()[j] += g.at(i, j);
                    }
                }
                add_to(grads, parents[1], db);
            }
            Op::AddScalar => {
                add_to(grads, parents[0], g.clone());
                let s: f64 = g.data().iter().sum();
                add_to(grads, parents[1], Tensor::scalar(s));
            }
            Op::Sub => {
                add_to(grads, parents[0], g.clone());
                let neg = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().map(|x| -x).collect(),
                )
                .unwrap();
                add_to(grads, parents[1], neg);
            }
            Op::Mul => {
                let (ta, tb) = (&self.vals[parents[0].0], &self.vals[parents[1].0]);
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let db = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                add_to(grads, parents[0], da);
                add_to(grads, parents[1], db);
            }
            Op::Scale(k) => {
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().map(|x| x * k).collect(),
                )
                .unwrap();
                add_to(grads, parents[0], da);
            }
            Op::Matmul => {
                let (ta, tb) = (&self.vals[parents[0].0], &self.vals[parents[1].0]);
                // da = g * b^T; db = a^T * g
                if self.nodes[parents[0].0].requires {
                    let bt = transpose_raw(tb);
                    add_to(grads, parents[0], matmul_raw(g, &bt));
                }
                if self.nodes[parents[1].0].requires {
                    let at = transpose_raw(ta);
                    add_to(grads, parents[1], matmul_raw(&at, g));
                }
            }
            Op::MatmulTN => {
                // out = a^T b: da = b * g^T, db = a * g
                let (ta, tb) = (&self.vals[parents[0].0], &self.vals[parents[1].0]);
                if self.nodes[parents[0].0].requires {
                    let gt = transpose_raw(g);
                    add_to(grads, parents[0], matmul_raw(tb, &gt));
                }
                if self.nodes[parents[1].0].requires {
                    add_to(grads, parents[1], matmul_raw(ta, g));
                }
            }
            Op::Transpose => add_to(grads, parents[0], transpose_raw(g)),
            Op::Relu => {
                let ta = &self.vals[parents[0].0];
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                add_to(grads, parents[0], da);
            }
            Op::LeakyRelu(slope) => {
                let ta = &self.vals[parents[0].0];
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { slope * gv })
                        .collect(),
                )
                .unwrap();
                add_to(grads, parents[0], da);
            }
            Op::SoftmaxRows => {
                // dx = y * (g - sum(g * y)) per row, with y the forward output.
                let y = &self.vals[i];
                let (r, c) = y.shape();
                let mut da = Tensor::zeros(r, c);
                for row in 0..r {
                    let dot: f64 = (0..c).map(|j| g.at(row, j) * y.at(row, j)).sum();
                    for j in 0..c {
                        da.set(row, j, y.at(row, j) * (g.at(row, j) - dot));
                    }
                }
                add_to(grads, parents[0], da);
            }
            Op::MaxOverRows { argmax } => {
                let ta = &self.vals[parents[0].0];
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for (j, &i_max) in argmax.iter().enumerate() {
                    da.set(i_max, j, g.at(0, j));
                }
                add_to(grads, parents[0], da);
            }
            Op::ConcatRows { row_splits } => {
                let mut start = 0;
                for (p, &r) in parents.iter().zip(row_splits) {
                    let c = g.cols();
                    let slice = g.data()[start * c..(start + r) * c].to_vec();
                    add_to(grads, *p, Tensor::from_vec(r, c, slice).unwrap());
                    start += r;
                }
            }
            Op::ConcatCols { col_splits } => {
                let rows = g.rows();
                let mut start = 0;
                for (p, &c) in parents.iter().zip(col_splits) {
                    let mut part = Tensor::zeros(rows, c);
                    for i in 0..rows {
                        for j in 0..c {
                            part.set(i, j, g.at(i, start + j));
                        }
                    }
                    add_to(grads, *p, part);
                    start += c;
                }
            }
            Op::GatherRows { idx } => {
                let ta = &self.vals[parents[0].0];
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i_src) in idx.iter().enumerate() {
                    for j in 0..ta.cols() {
                        let v = da.at(i_src, j) + g.at(k, j);
                        da.set(i_src, j, v);
                    }
                }
                add_to(grads, parents[0], da);
            }
            Op::Sum => {
                let ta = &self.vals[parents[0].0];
                let gv = g.item();
                add_to(
                    grads,
                    parents[0],
                    Tensor::from_vec(ta.rows(), ta.cols(), vec![gv; ta.numel()]).unwrap(),
                );
            }
            Op::Mean => {
                let ta = &self.vals[parents[0].0];
                let gv = g.item() / ta.numel() as f64;
                add_to(
                    grads,
                    parents[0],
                    Tensor::from_vec(ta.rows(), ta.cols(), vec![gv; ta.numel()]).unwrap(),
                );
            }
            Op::SqDiffSum => {
                let (ta, tb) = (&self.vals[parents[0].0], &self.vals[parents[1].0]);
                let gv = g.item();
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| 2.0 * gv * (x - y))
                    .collect();
                if self.nodes[parents[0].0].requires {
                    add_to(
                        grads,
                        parents[0],
                        Tensor::from_vec(ta.rows(), ta.cols(), diff.clone()).unwrap(),
                    );
                }
                if self.nodes[parents[1].0].requires {
                    let neg = diff.iter().map(|x| -x).collect();
                    add_to(
                        grads,
                        parents[1],
                        Tensor::from_vec(ta.rows(), ta.cols(), neg).unwrap(),
                    );
                }
            }
            Op::CrossEntropy { labels } => {
                let t = &self.vals[parents[0].0];
                let (r, c) = t.shape();
                let gv = g.item() / r as f64;
                let mut da = Tensor::zeros(r, c);
                for (row, &y) in labels.iter().enumerate() {
                    let logits = t.row(row);
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..c {
                        let p = exps[j] / denom;
                        let delta = if j == y { 1.0 } else { 0.0 };
                        da.set(row, j, gv * (p - delta));
                    }
                }
                add_to(grads, parents[0], da);
            }
            Op::ChamferToFixed {
                cloud,
                nearest_of_anchor,
                nearest_of_point,
            } => {
                let ta = &self.vals[parents[0].0];
                let m = ta.rows();
                let n = cloud.len();
                let gv = g.item();
                let mut da = Tensor::zeros(m, 3);
                for (i, &j) in nearest_of_anchor.iter().enumerate() {
                    for k in 0..3 {
                        let v = da.at(i, k) + gv * 2.0 * (ta.at(i, k) - cloud[j][k]) / m as f64;
                        da.set(i, k, v);
                    }
                }
                for (j, &i) in nearest_of_point.iter().enumerate() {
                    for k in 0..3 {
                        let v = da.at(i, k) + gv * 2.0 * (ta.at(i, k) - cloud[j][k]) / n as f64;
                        da.set(i, k, v);
                    }
                }
                add_to(grads, parents[0], da);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k_dim) = a.shape();
    let c = b.cols();
    debug_assert_eq!(k_dim, b.rows());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let arow = a.row(i);
        let orow = &mut out.data_mut()[i * c..(i + 1) * c];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (r, c) = a.shape();
    let mut out = Tensor::zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out.set(j, i, a.at(i, j));
        }
    }
    out
}
