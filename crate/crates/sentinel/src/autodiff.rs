//! Reverse-mode differentiation on a recording tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! consumers) and cache their primal values. `backward` replays the tape
//! in reverse, accumulating adjoints. One training step builds one tape;
//! tapes are single-threaded.

use crate::error::{Result, SentinelError};
use crate::linalg::{softmax_row, Matrix};
use crate::rng::SplitRng;

pub type NodeId = usize;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a 1xD row vector to every row of an NxD matrix.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    EmbedGather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Cross-entropy of `target` under the log-softmax of one logits row.
    CrossEntropyRow {
        logits: NodeId,
        row: usize,
        target: usize,
    },
    /// Row-wise min-max normalization; constant rows map to zeros.
    RowMinMaxNorm(NodeId),
    /// Cosine similarity of two equal-shape values, flattened. Zero norm gives 0.
    CosineSim(NodeId, NodeId),
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Per-parameter gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node. Defined for every grad-leaf
    /// (zero if the leaf does not influence the loss).
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.shape(), (1, 1));
        self.nodes[id].value.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m, false)
    }

    pub fn param(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.sub(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.hadamard(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, r) = (&self.nodes[a].value, &self.nodes[row].value);
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(SentinelError::ShapeMismatch(format!(
                "add_row: {}x{} + {}x{}",
                m.rows(),
                m.cols(),
                r.rows(),
                r.cols()
            )));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), v, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), v, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.scale(c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        let ng = self.needs(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data_mut() {
            *x = x.abs();
        }
        let ng = self.needs(a);
        self.push(Op::Abs(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_row(&self.nodes[a].value);
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    /// Row-wise layer norm with learned affine: `gamma * xhat + beta`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let m = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let d = m.cols();
        if g.shape() != (1, d) || b.shape() != (1, d) {
            return Err(SentinelError::ShapeMismatch(format!(
                "layer_norm: x {}x{d}, gamma {:?}, beta {:?}",
                m.rows(),
                g.shape(),
                b.shape()
            )));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = g.get(0, j) * (*x - mean) * inv + b.get(0, j);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNormRows { x, gamma, beta }, v, ng))
    }

    /// Gather rows of an embedding table: output row i = table[ids[i]].
    pub fn embed_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[table].value;
        for &id in ids {
            if id >= t.rows() {
                return Err(SentinelError::InvalidArgument(format!(
                    "embed_gather: id {id} out of range for table with {} rows",
                    t.rows()
                )));
            }
        }
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Op::EmbedGather {
                table,
                ids: ids.to_vec(),
            },
            v,
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let m = &self.nodes[x].value;
        if start + width > m.cols() {
            return Err(SentinelError::ShapeMismatch(format!(
                "slice_cols: [{start}, {}) out of {} cols",
                start + width,
                m.cols()
            )));
        }
        let mut v = Matrix::zeros(m.rows(), width);
        for i in 0..m.rows() {
            v.row_mut(i)
                .copy_from_slice(&m.row(i)[start..start + width]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, width }, v, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SentinelError::InvalidArgument(
                "concat_cols: empty part list".into(),
            ));
        }
        let rows = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = &self.nodes[p].value;
            if m.rows() != rows {
                return Err(SentinelError::ShapeMismatch(format!(
                    "concat_cols: {} rows vs {} rows",
                    m.rows(),
                    rows
                )));
            }
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a), scalar_matrix(s), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data();
        let s: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), scalar_matrix(s), ng)
    }

    pub fn cross_entropy_row(
        &mut self,
        logits: NodeId,
        row: usize,
        target: usize,
    ) -> Result<NodeId> {
        let m = &self.nodes[logits].value;
        if row >= m.rows() || target >= m.cols() {
            return Err(SentinelError::InvalidArgument(format!(
                "cross_entropy_row: row {row} / target {target} out of {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let r = m.row(row);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - r[target];
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropyRow {
                logits,
                row,
                target,
            },
            scalar_matrix(loss),
            ng,
        ))
    }

    /// Row-wise min-max normalization; constant rows map to all zeros.
    pub fn row_minmax_norm(&mut self, a: NodeId) -> NodeId {
        let v = crate::traces::rowwise_minmax_normalize(&self.nodes[a].value);
        let ng = self.needs(a);
        self.push(Op::RowMinMaxNorm(a), v, ng)
    }

    /// Cosine similarity of two equal-shape nodes (flattened). Returns 1x1.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (u, v) = (&self.nodes[a].value, &self.nodes[b].value);
        if u.shape() != v.shape() {
            return Err(SentinelError::ShapeMismatch(format!(
                "cosine_sim: {:?} vs {:?}",
                u.shape(),
                v.shape()
            )));
        }
        let dot: f64 = u.data().iter().zip(v.data()).map(|(x, y)| x * y).sum();
        let nu = u.frobenius_norm();
        let nv = v.frobenius_norm();
        let c = if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            dot / (nu * nv)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::CosineSim(a, b), scalar_matrix(c), ng))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let m = &self.nodes[a].value;
        if m.rows() * m.cols() != rows * cols {
            return Err(SentinelError::ShapeMismatch(format!(
                "reshape: {}x{} -> {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        let v = Matrix::from_vec(rows, cols, m.data().to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), v, ng))
    }

    /// Reverse pass from a scalar loss node. Every grad-leaf gets a defined
    /// gradient (zeros when disconnected from the loss).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss].value;
        if lv.shape() != (1, 1) {
            return Err(SentinelError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(scalar_matrix(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate_inputs(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        // Parameters untouched by the loss still get a defined (zero) gradient.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[id].is_none() {
                grads[id] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Matrix>], target: NodeId, delta: Matrix| {
            if !self.needs(target) {
                return;
            }
            match &mut grads[target] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g.hadamard(&self.nodes[*b].value)?);
                add_to(grads, *b, g.hadamard(&self.nodes[*a].value)?);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                if self.needs(*row) {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (acc, x) in rg.row_mut(0).iter_mut().zip(g.row(i)) {
                            *acc += x;
                        }
                    }
                    add_to(grads, *row, rg);
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.nodes[*b].value.transpose();
                    add_to(grads, *a, g.matmul(&bt)?);
                }
                if self.needs(*b) {
                    let at = self.nodes[*a].value.transpose();
                    add_to(grads, *b, at.matmul(g)?);
                }
            }
            Op::Transpose(a) => add_to(grads, *a, g.transpose()),
            Op::Scale(a, c) => add_to(grads, *a, g.scale(*c)),
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let mut d = g.clone();
                for (v, &xi) in d.data_mut().iter_mut().zip(x.data()) {
                    if xi <= 0.0 {
                        *v = 0.0;
                    }
                }
                add_to(grads, *a, d);
            }
            Op::Exp(a) => add_to(grads, *a, g.hadamard(&self.nodes[id].value)?),
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                let mut d = g.clone();
                for (v, &xi) in d.data_mut().iter_mut().zip(x.data()) {
                    *v *= if xi > 0.0 {
                        1.0
                    } else if xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                add_to(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let s = &self.nodes[id].value;
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(s.row(i)).map(|(x, y)| x * y).sum();
                    for j in 0..g.cols() {
                        d.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                add_to(grads, *a, d);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xm = &self.nodes[*x].value;
                let gm = &self.nodes[*gamma].value;
                let d = xm.cols() as f64;
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                let mut dgamma = Matrix::zeros(1, xm.cols());
                let mut dbeta = Matrix::zeros(1, xm.cols());
                for i in 0..xm.rows() {
                    let row = xm.row(i);
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gi = g.row(i);

                    let dxhat: Vec<f64> = (0..xm.cols()).map(|j| gi[j] * gm.get(0, j)).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                    for j in 0..xm.cols() {
                        dx.set(
                            i,
                            j,
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                        );
                        dgamma.set(0, j, dgamma.get(0, j) + gi[j] * xhat[j]);
                        dbeta.set(0, j, dbeta.get(0, j) + gi[j]);
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
            Op::EmbedGather { table, ids } => {
                if self.needs(*table) {
                    let t = &self.nodes[*table].value;
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &tok) in ids.iter().enumerate() {
                        for (acc, x) in dt.row_mut(tok).iter_mut().zip(g.row(i)) {
                            *acc += x;
                        }
                    }
                    add_to(grads, *table, dt);
                }
            }
            Op::SliceCols { x, start, width } => {
                let m = &self.nodes[*x].value;
                let mut d = Matrix::zeros(m.rows(), m.cols());
                for i in 0..m.rows() {
                    d.row_mut(i)[*start..*start + *width].copy_from_slice(g.row(i));
                }
                add_to(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let mut d = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        add_to(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::SumAll(a) => {
                let m = &self.nodes[*a].value;
                let g0 = g.get(0, 0);
                add_to(
                    grads,
                    *a,
                    Matrix::from_vec(m.rows(), m.cols(), vec![g0; m.rows() * m.cols()])?,
                );
            }
            Op::MeanAll(a) => {
                let m = &self.nodes[*a].value;
                let n = (m.rows() * m.cols()) as f64;
                let g0 = g.get(0, 0) / n;
                add_to(
                    grads,
                    *a,
                    Matrix::from_vec(m.rows(), m.cols(), vec![g0; m.rows() * m.cols()])?,
                );
            }
            Op::CrossEntropyRow {
                logits,
                row,
                target,
            } => {
                let m = &self.nodes[*logits].value;
                let r = m.row(*row);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = r.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let g0 = g.get(0, 0);
                let mut d = Matrix::zeros(m.rows(), m.cols());
                for j in 0..m.cols() {
                    let p = exps[j] / sum;
                    let delta = if j == *target { 1.0 } else { 0.0 };
                    d.set(*row, j, g0 * (p - delta));
                }
                add_to(grads, *logits, d);
            }
            Op::RowMinMaxNorm(a) => {
                let x = &self.nodes[*a].value;
                let out = &self.nodes[id].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let (mut jmin, mut jmax) = (0usize, 0usize);
                    for (j, &v) in row.iter().enumerate() {
                        if v < row[jmin] {
                            jmin = j;
                        }
                        if v > row[jmax] {
                            jmax = j;
                        }
                    }
                    let span = row[jmax] - row[jmin];
                    if span == 0.0 {
                        continue; // constant row: output and gradient are zero
                    }
                    let gi = g.row(i);
                    let sum_g: f64 = gi.iter().sum();
                    let sum_g_out: f64 = gi.iter().zip(out.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..x.cols() {
                        let mut v = gi[j] / span;
                        if j == jmin {
                            v -= sum_g / span;
                            v += sum_g_out / span;
                        }
                        if j == jmax {
                            v -= sum_g_out / span;
                        }
                        d.set(i, j, v);
                    }
                }
                add_to(grads, *a, d);
            }
            Op::CosineSim(a, b) => {
                let u = &self.nodes[*a].value;
                let v = &self.nodes[*b].value;
                let nu = u.frobenius_norm();
                let nv = v.frobenius_norm();
                if nu == 0.0 || nv == 0.0 {
                    return Ok(());
                }
                let c = self.nodes[id].value.get(0, 0);
                let g0 = g.get(0, 0);
                if self.needs(*a) {
                    let mut du = Matrix::zeros(u.rows(), u.cols());
                    for (k, dv) in du.data_mut().iter_mut().enumerate() {
                        *dv = g0 * (v.data()[k] / (nu * nv) - c * u.data()[k] / (nu * nu));
                    }
                    add_to(grads, *a, du);
                }
                if self.needs(*b) {
                    let mut dv = Matrix::zeros(v.rows(), v.cols());
                    for (k, dd) in dv.data_mut().iter_mut().enumerate() {
                        *dd = g0 * (u.data()[k] / (nu * nv) - c * v.data()[k] / (nv * nv));
                    }
                    add_to(grads, *b, dv);
                }
            }
            Op::Reshape(a) => {
                let m = &self.nodes[*a].value;
                add_to(
                    grads,
                    *a,
                    Matrix::from_vec(m.rows(), m.cols(), g.data().to_vec())?,
                );
            }
        }
        Ok(())
    }
}

fn scalar_matrix(v: f64) -> Matrix {
    Matrix::from_vec(1, 1, vec![v]).expect("scalar is finite")
}

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs the scalar loss on a fresh tape from parameter nodes.
/// Returns the max over `n_coords` sampled parameter coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`. Coordinates
/// where both magnitudes fall below `1e-7` count as matching: central
/// differences cannot resolve gradients under the rounding noise floor.
pub fn grad_check<F>(
    build: &F,
    params: &[Matrix],
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(SentinelError::InvalidArgument(
            "grad_check: eps must be > 0".into(),
        ));
    }
    let eval = |vals: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut rng = SplitRng::seeded(seed);
    let mut max_err = 0.0f64;
    for _ in 0..n_coords {
        let p = rng.gen_range(0, params.len());
        let len = params[p].data().len();
        let c = rng.gen_range(0, len);

        let analytic = grads.get(ids[p]).map(|g| g.data()[c]).unwrap_or(0.0);

        let mut perturbed: Vec<Matrix> = params.to_vec();
        perturbed[p].data_mut()[c] += eps;
        let f_plus = eval(&perturbed)?;
        perturbed[p].data_mut()[c] -= 2.0 * eps;
        let f_minus = eval(&perturbed)?;
        let numeric = (f_plus - f_minus) / (2.0 * eps);

        let mag = analytic.abs().max(numeric.abs());
        if mag < 1e-7 {
            continue;
        }
        let err = (analytic - numeric).abs() / mag.max(1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
