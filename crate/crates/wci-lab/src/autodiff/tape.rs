//! Dynamic computation tape with second-order reverse-mode differentiation.
//!
//! Every operation appends a node and evaluates it eagerly, so the tape is
//! always in topological order and all intermediates stay available for the
//! backward pass. The backward pass is *symbolic*: it appends new nodes that
//! compute the adjoints instead of filling plain buffers. Because adjoints
//! are ordinary nodes, a second backward over the scalar ⟨∇L, v⟩ yields the
//! Hessian-vector product H·v with the same machinery that produced ∇L.
//!
//! The model-facing vocabulary is add, mul, matmul, relu, logistic,
//! softmax-cross-entropy, reduce-mean and square. The remaining node kinds
//! (transpose, step, broadcasts, reductions, ...) exist so that the adjoint
//! graphs stay closed under differentiation.

use super::mat::Mat;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
// Some payloads (broadcast targets, scalar offsets) are consumed at forward
// time and kept so the tape stays a self-describing operation record.
#[allow(dead_code)]
enum Op {
    /// Externally supplied value. Gradient flows into it only when the leaf
    /// was created with `requires_grad`.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    /// Heaviside step of the input (1 where > 0, else 0). Its derivative is
    /// zero almost everywhere, so no gradient propagates through it.
    Step(NodeId),
    Logistic(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// Row-wise softmax, max-shifted for stability.
    Softmax(NodeId),
    /// Fused per-example softmax cross-entropy: logits n×c and a class-index
    /// column n×1 produce the n×1 loss column via shifted log-sum-exp.
    SoftmaxXent { logits: NodeId, labels: NodeId },
    RowSum(NodeId),
    ColSum(NodeId),
    SumAll(NodeId),
    BroadcastRows(NodeId, usize),
    BroadcastCols(NodeId, usize),
    BroadcastScalar(NodeId, usize, usize),
    ReduceMean(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

/// Append-only operation tape. Single-threaded during forward/backward;
/// independent tapes over disjoint data may run concurrently.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Watermark for [`Tape::truncate`]. Lets callers build a throwaway
    /// subgraph (one trace probe, one basis sweep) and roll it back.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node at or after `mark`. Node ids below `mark` stay valid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id].value.is_scalar());
        self.nodes[id].value.data[0]
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Differentiable leaf (parameters, attacked inputs).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf (data, labels, probe vectors).
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn check_finite(&self, id: NodeId) -> Result<NodeId> {
        if self.nodes[id].value.all_finite() {
            Ok(id)
        } else {
            Err(Error::numeric_node(id, "non-finite value produced"))
        }
    }

    fn shape_err(&self, op: &str, a: NodeId, b: NodeId) -> Error {
        Error::Layout(format!(
            "{op}: incompatible shapes {:?} and {:?} (nodes {a}, {b})",
            self.shape(a),
            self.shape(b)
        ))
    }

    // ── Elementwise binary ───────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul")
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(self.shape_err(what, a, b));
        }
        let va = &self.nodes[a].value.data;
        let vb = &self.nodes[b].value.data;
        let data: Vec<f64> = match what {
            "add" => va.iter().zip(vb).map(|(x, y)| x + y).collect(),
            "sub" => va.iter().zip(vb).map(|(x, y)| x - y).collect(),
            "mul" => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let op = match what {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            "mul" => Op::Mul(a, b),
            _ => unreachable!(),
        };
        let id = self.push(op, Mat::from_vec(ra, ca, data), rg);
        self.check_finite(id)
    }

    // ── Matmul and transpose ─────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &va.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * m..(p + 1) * m];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let id = self.push(Op::Matmul(a, b), Mat::from_vec(n, m, out), rg);
        self.check_finite(id)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data[i * c + j];
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Transpose(a), Mat::from_vec(c, r, out), rg))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a].value.data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::Relu(a), Mat::from_vec(r, c, data), rg);
        self.check_finite(id)
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a]
            .value
            .data
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        // Piecewise constant: no gradient ever flows through a step node.
        Ok(self.push(Op::Step(a), Mat::from_vec(r, c, data), false))
    }

    pub fn logistic(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a]
            .value
            .data
            .iter()
            .map(|&v| {
                // Split by sign so exp never overflows.
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::Logistic(a), Mat::from_vec(r, c, data), rg);
        self.check_finite(id)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a].value.data.iter().map(|&v| v * v).collect();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::Square(a), Mat::from_vec(r, c, data), rg);
        self.check_finite(id)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a].value.data.iter().map(|&v| v * factor).collect();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::Scale(a, factor), Mat::from_vec(r, c, data), rg);
        self.check_finite(id)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data: Vec<f64> = self.nodes[a].value.data.iter().map(|&v| v + offset).collect();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::AddScalar(a, offset), Mat::from_vec(r, c, data), rg);
        self.check_finite(id)
    }

    // ── Softmax family ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = va.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (o, &z) in orow.iter_mut().zip(row) {
                *o = (z - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::Softmax(a), Mat::from_vec(r, c, out), rg);
        self.check_finite(id)
    }

    /// Per-example cross-entropy losses. `labels` must be an n×1 constant of
    /// class indices.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape(logits);
        let (ln, lc) = self.shape(labels);
        if ln != n || lc != 1 {
            return Err(self.shape_err("softmax_xent", logits, labels));
        }
        let vz = &self.nodes[logits].value;
        let vy = &self.nodes[labels].value;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = vz.row_slice(i);
            let y = vy.data[i] as usize;
            if y >= c {
                return Err(Error::Layout(format!(
                    "softmax_xent: label {y} out of range for {c} classes (example {i})"
                )));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
            out[i] = lse - row[y];
        }
        let rg = self.nodes[logits].requires_grad;
        let id = self.push(
            Op::SoftmaxXent { logits, labels },
            Mat::from_vec(n, 1, out),
            rg,
        );
        self.check_finite(id)
    }

    // ── Reductions and broadcasts ────────────────────────────────────

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        let va = &self.nodes[a].value;
        let data: Vec<f64> = (0..r).map(|i| va.row_slice(i).iter().sum()).collect();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::RowSum(a), Mat::from_vec(r, 1, data), rg);
        self.check_finite(id)
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let va = &self.nodes[a].value;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (acc, &v) in data.iter_mut().zip(va.row_slice(i)) {
                *acc += v;
            }
        }
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::ColSum(a), Mat::from_vec(1, c, data), rg);
        self.check_finite(id)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[a].value.data.iter().sum();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::SumAll(a), Mat::scalar(total), rg);
        self.check_finite(id)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::Layout(format!(
                "broadcast_rows: expected 1×m input, got {r}×{c}"
            )));
        }
        let row = self.nodes[a].value.data.clone();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::BroadcastRows(a, rows), Mat::from_vec(rows, c, data), rg))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::Layout(format!(
                "broadcast_cols: expected n×1 input, got {r}×{c}"
            )));
        }
        let va = &self.nodes[a].value;
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            data.extend(std::iter::repeat(va.data[i]).take(cols));
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::BroadcastCols(a, cols), Mat::from_vec(r, cols, data), rg))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if !self.nodes[a].value.is_scalar() {
            return Err(Error::Layout("broadcast_scalar: expected 1×1 input".into()));
        }
        let v = self.nodes[a].value.data[0];
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(
            Op::BroadcastScalar(a, rows, cols),
            Mat::from_vec(rows, cols, vec![v; rows * cols]),
            rg,
        ))
    }

    /// Mean over all entries.
    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r * c == 0 {
            return Err(Error::Domain("reduce_mean over an empty buffer".into()));
        }
        let total: f64 = self.nodes[a].value.data.iter().sum();
        let rg = self.nodes[a].requires_grad;
        let id = self.push(Op::ReduceMean(a), Mat::scalar(total / (r * c) as f64), rg);
        self.check_finite(id)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Symbolic reverse sweep from a scalar node. Returns, for every node id
    /// below `seed` (inclusive), the id of its adjoint node, or `None` where
    /// no gradient flows. Repeated calls over an unchanged prefix rebuild
    /// the same adjoint values.
    pub fn backward(&mut self, seed: NodeId) -> Result<Vec<Option<NodeId>>> {
        if !self.nodes[seed].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward seed must be a scalar node, got shape {:?}",
                self.shape(seed)
            )));
        }
        let upto = seed + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; upto];
        if !self.nodes[seed].requires_grad {
            // Constant loss: every gradient is zero.
            return Ok(adj);
        }
        adj[seed] = Some(self.constant(Mat::scalar(1.0)));
        for id in (0..upto).rev() {
            let Some(g) = adj[id] else { continue };
            self.propagate(id, g, &mut adj)?;
        }
        Ok(adj)
    }

    /// Accumulate `contrib` into the adjoint slot of `input`.
    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        input: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        if !self.nodes[input].requires_grad {
            return Ok(());
        }
        adj[input] = Some(match adj[input] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, g: NodeId, adj: &mut [Option<NodeId>]) -> Result<()> {
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a, g)?;
                self.accumulate(adj, b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g)?;
                if self.nodes[b].requires_grad {
                    let neg = self.scale(g, -1.0)?;
                    self.accumulate(adj, b, neg)?;
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let c = self.mul(g, b)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.nodes[b].requires_grad {
                    let c = self.mul(g, a)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Matmul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bt = self.transpose(b)?;
                    let c = self.matmul(g, bt)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.nodes[b].requires_grad {
                    let at = self.transpose(a)?;
                    let c = self.matmul(at, g)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a].requires_grad {
                    let c = self.transpose(g)?;
                    self.accumulate(adj, a, c)?;
                }
            }
            Op::Relu(a) => {
                if self.nodes[a].requires_grad {
                    let mask = self.step(a)?;
                    let c = self.mul(g, mask)?;
                    self.accumulate(adj, a, c)?;
                }
            }
            Op::Step(_) => {}
            Op::Logistic(a) => {
                if self.nodes[a].requires_grad {
                    // σ' = σ(1 − σ), reusing this node's output.
                    let neg = self.scale(id, -1.0)?;
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let deriv = self.mul(id, one_minus)?;
                    let c = self.mul(g, deriv)?;
                    self.accumulate(adj, a, c)?;
                }
            }
            Op::Square(a) => {
                if self.nodes[a].requires_grad {
                    let two_a = self.scale(a, 2.0)?;
                    let c = self.mul(g, two_a)?;
                    self.accumulate(adj, a, c)?;
                }
            }
            Op::Scale(a, factor) => {
                if self.nodes[a].requires_grad {
                    let c = self.scale(g, factor)?;
                    self.accumulate(adj, a, c)?;
                }
            }
            Op::AddScalar(a, _) => {
                self.accumulate(adj, a, g)?;
            }
            Op::Softmax(a) => {
                if self.nodes[a].requires_grad {
                    // ∂L/∂z = p ⊙ (g − rowsum(g ⊙ p)), with p this node.
                    let (_, c) = self.shape(id);
                    let gp = self.mul(g, id)?;
                    let rs = self.row_sum(gp)?;
                    let rsb = self.broadcast_cols(rs, c)?;
                    let centered = self.sub(g, rsb)?;
                    let contrib = self.mul(id, centered)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                if self.nodes[logits].requires_grad {
                    // ∂ℓ_i/∂z = softmax(z)_i − onehot(y_i), scaled by the
                    // per-example adjoint column.
                    let (n, c) = self.shape(logits);
                    let vy = self.nodes[labels].value.clone();
                    let mut onehot = Mat::zeros(n, c);
                    for i in 0..n {
                        onehot.set(i, vy.data[i] as usize, 1.0);
                    }
                    let onehot = self.constant(onehot);
                    let p = self.softmax(logits)?;
                    let diff = self.sub(p, onehot)?;
                    let gb = self.broadcast_cols(g, c)?;
                    let contrib = self.mul(gb, diff)?;
                    self.accumulate(adj, logits, contrib)?;
                }
            }
            Op::RowSum(a) => {
                if self.nodes[a].requires_grad {
                    let (_, c) = self.shape(a);
                    let contrib = self.broadcast_cols(g, c)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::ColSum(a) => {
                if self.nodes[a].requires_grad {
                    let (r, _) = self.shape(a);
                    let contrib = self.broadcast_rows(g, r)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::SumAll(a) => {
                if self.nodes[a].requires_grad {
                    let (r, c) = self.shape(a);
                    let contrib = self.broadcast_scalar(g, r, c)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::BroadcastRows(a, _) => {
                if self.nodes[a].requires_grad {
                    let contrib = self.col_sum(g)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::BroadcastCols(a, _) => {
                if self.nodes[a].requires_grad {
                    let contrib = self.row_sum(g)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::BroadcastScalar(a, _, _) => {
                if self.nodes[a].requires_grad {
                    let contrib = self.sum_all(g)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::ReduceMean(a) => {
                if self.nodes[a].requires_grad {
                    let (r, c) = self.shape(a);
                    let spread = self.broadcast_scalar(g, r, c)?;
                    let contrib = self.scale(spread, 1.0 / (r * c) as f64)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &mut Tape, loss: NodeId, leaf: NodeId) -> Mat {
        let adj = tape.backward(loss).unwrap();
        match adj[leaf] {
            Some(id) => tape.value(id).clone(),
            None => {
                let (r, c) = tape.value(leaf).shape();
                Mat::zeros(r, c)
            }
        }
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::scalar(3.0));
        let loss = t.square(w).unwrap();
        let g = grad_of(&mut t, loss, w);
        assert_eq!(g.data, vec![6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::scalar(3.0));
        let c = t.constant(Mat::scalar(5.0));
        let loss = t.square(c).unwrap();
        let g = grad_of(&mut t, loss, w);
        assert_eq!(g.data, vec![0.0]);
    }

    #[test]
    fn linear_squared_loss_matches_hand_arithmetic() {
        // f(x) = wᵀx with w = [1, -2], x = [3, 1], y = 0 → loss (3 - 2)² = 1.
        let mut t = Tape::new();
        let x = t.constant(Mat::row(&[3.0, 1.0]));
        let w = t.leaf(Mat::column(&[1.0, -2.0]));
        let f = t.matmul(x, w).unwrap();
        let y = t.constant(Mat::scalar(0.0));
        let d = t.sub(f, y).unwrap();
        let loss = t.square(d).unwrap();
        assert_eq!(t.scalar_value(loss), 1.0);
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::row(&[1.5, -0.5, 2.0]));
        let sq = t.square(w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g1 = grad_of(&mut t, loss, w);
        let g2 = grad_of(&mut t, loss, w);
        assert_eq!(g1.data, g2.data);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let z = t.leaf(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let p = t.softmax(z).unwrap();
        for i in 0..2 {
            let s: f64 = t.value(p).row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_xent_matches_log_sum_exp() {
        let mut t = Tape::new();
        let z = t.leaf(Mat::from_vec(1, 2, vec![2.0, 0.5]));
        let y = t.constant(Mat::column(&[0.0]));
        let l = t.softmax_xent(z, y).unwrap();
        let expect = (2.0f64.exp() + 0.5f64.exp()).ln() - 2.0;
        assert!((t.value(l).data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_rejects_label_out_of_range() {
        let mut t = Tape::new();
        let z = t.leaf(Mat::from_vec(1, 2, vec![2.0, 0.5]));
        let y = t.constant(Mat::column(&[2.0]));
        assert!(t.softmax_xent(z, y).is_err());
    }

    #[test]
    fn non_finite_intermediate_reports_node() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::scalar(1e308));
        let err = t.square(w).unwrap_err();
        match err {
            Error::Numeric { site: "node", .. } => {}
            other => panic!("expected numeric node error, got {other:?}"),
        }
    }

    #[test]
    fn truncate_rolls_back_probe_subgraphs() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::row(&[1.0, 2.0]));
        let loss = {
            let sq = t.square(w).unwrap();
            t.sum_all(sq).unwrap()
        };
        let mark = t.mark();
        let _ = t.backward(loss).unwrap();
        assert!(t.len() > mark);
        t.truncate(mark);
        assert_eq!(t.len(), mark);
        // Tape still usable after rollback.
        let again = t.backward(loss).unwrap();
        assert!(again[w].is_some());
    }
}
