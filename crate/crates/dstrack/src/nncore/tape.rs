//! Reverse-mode tape over dense f64 vectors.
//!
//! Forward values are computed eagerly as ops are recorded; `backward`
//! replays the tape in reverse and accumulates exact gradients into a
//! `Gradients` buffer (`+=` semantics, so several tapes can contribute to
//! one batch gradient). Shape mismatches are construction-time panics,
//! never silent broadcasts.

use super::{softmax, Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Index of a value node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    EmbedRow { table: ParamId, row: usize },
    Affine { w: ParamId, b: Option<ParamId>, x: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Scale(NodeId, f64),
    SumScalars(Vec<NodeId>),
    SoftmaxCrossEntropy { logits: NodeId, target: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records one forward computation and supports exact reverse-mode
/// gradients of any scalar node.
#[derive(Debug, Default)]
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf vector. Gradients flow to it but are discarded.
    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// One row of an embedding table.
    pub fn embed_row(&mut self, store: &ParamStore, table: ParamId, row: usize) -> NodeId {
        let t = store.tensor(table);
        assert!(
            row < t.rows,
            "embedding row {row} out of range for {} ({} rows)",
            t.name,
            t.rows
        );
        let value = t.value[row * t.cols..(row + 1) * t.cols].to_vec();
        self.push(value, Op::EmbedRow { table, row })
    }

    /// `W x + b` (or `W x` when `b` is `None`). `W` is `(out, in)` row-major.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    ) -> NodeId {
        let wt = store.tensor(w);
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            wt.cols,
            xv.len(),
            "affine: {} is {}x{} but input has length {}",
            wt.name,
            wt.rows,
            wt.cols,
            xv.len()
        );
        let mut out = match b {
            Some(b) => {
                let bt = store.tensor(b);
                assert_eq!(
                    bt.len(),
                    wt.rows,
                    "affine: bias {} has length {} but {} has {} rows",
                    bt.name,
                    bt.len(),
                    wt.name,
                    wt.rows
                );
                bt.value.clone()
            }
            None => vec![0.0; wt.rows],
        };
        for r in 0..wt.rows {
            let row = &wt.value[r * wt.cols..(r + 1) * wt.cols];
            let mut acc = 0.0;
            for (wv, xi) in row.iter().zip(xv.iter()) {
                acc += wv * xi;
            }
            out[r] += acc;
        }
        self.push(out, Op::Affine { w, b, x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0]
            .value
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "add: length mismatch");
        let value = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        self.push(value, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "mul: length mismatch");
        let value = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        self.push(value, Op::Mul(a, b))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        self.push(value, Op::Concat(a, b))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v * k).collect();
        self.push(value, Op::Scale(x, k))
    }

    /// Sum of scalar nodes into one scalar.
    pub fn sum_scalars(&mut self, xs: Vec<NodeId>) -> NodeId {
        let mut acc = 0.0;
        for &x in &xs {
            let v = &self.nodes[x.0].value;
            assert_eq!(v.len(), 1, "sum_scalars: non-scalar operand");
            acc += v[0];
        }
        self.push(vec![acc], Op::SumScalars(xs))
    }

    /// Fused softmax + cross-entropy: returns the scalar loss
    /// `-log softmax(logits)[target]` in max-subtraction form.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert!(
            target < lv.len(),
            "cross-entropy target {target} out of range ({} classes)",
            lv.len()
        );
        let loss = super::log_softmax_loss(lv, target);
        self.push(vec![loss], Op::SoftmaxCrossEntropy { logits, target })
    }

    /// Probabilities for a logits node (not recorded on the tape).
    pub fn softmax_value(&self, logits: NodeId) -> Vec<f64> {
        softmax(&self.nodes[logits.0].value)
    }

    /// Accumulate `seed * d(loss)/d(param)` into `grads` for every parameter
    /// reachable from `loss`. Unreached parameters are left untouched.
    pub fn backward_scaled(
        &self,
        loss: NodeId,
        store: &ParamStore,
        grads: &mut Gradients,
        seed: f64,
    ) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Argument(
                "backward root must be a scalar node".to_string(),
            ));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[loss.0][0] = seed;

        for i in (0..=loss.0).rev() {
            if adj[i].iter().all(|&a| a == 0.0) {
                continue;
            }
            // take this node's adjoint to release the borrow on `adj`
            let a = std::mem::take(&mut adj[i]);
            match &self.nodes[i].op {
                Op::Input => {}
                Op::EmbedRow { table, row } => {
                    let cols = store.tensor(*table).cols;
                    let g = &mut grads.get_mut(*table)[row * cols..(row + 1) * cols];
                    for (gj, aj) in g.iter_mut().zip(&a) {
                        *gj += aj;
                    }
                }
                Op::Affine { w, b, x } => {
                    let wt = store.tensor(*w);
                    let xv = &self.nodes[x.0].value;
                    {
                        let gw = grads.get_mut(*w);
                        for r in 0..wt.rows {
                            let ar = a[r];
                            if ar == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                            for (g, xi) in row.iter_mut().zip(xv.iter()) {
                                *g += ar * xi;
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = grads.get_mut(*b);
                        for (g, ar) in gb.iter_mut().zip(&a) {
                            *g += ar;
                        }
                    }
                    let gx = &mut adj[x.0];
                    for r in 0..wt.rows {
                        let ar = a[r];
                        if ar == 0.0 {
                            continue;
                        }
                        let row = &wt.value[r * wt.cols..(r + 1) * wt.cols];
                        for (g, wv) in gx.iter_mut().zip(row.iter()) {
                            *g += ar * wv;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = &mut adj[x.0];
                    for j in 0..a.len() {
                        if xv[j] > 0.0 {
                            gx[j] += a[j];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let yv = &self.nodes[i].value;
                    let gx = &mut adj[x.0];
                    for j in 0..a.len() {
                        gx[j] += a[j] * (1.0 - yv[j] * yv[j]);
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &self.nodes[i].value;
                    let gx = &mut adj[x.0];
                    for j in 0..a.len() {
                        gx[j] += a[j] * yv[j] * (1.0 - yv[j]);
                    }
                }
                Op::Add(x, y) => {
                    for (g, aj) in adj[x.0].iter_mut().zip(&a) {
                        *g += aj;
                    }
                    for (g, aj) in adj[y.0].iter_mut().zip(&a) {
                        *g += aj;
                    }
                }
                Op::Mul(x, y) => {
                    let xv = self.nodes[x.0].value.clone();
                    let yv = &self.nodes[y.0].value;
                    {
                        let gx = &mut adj[x.0];
                        for j in 0..a.len() {
                            gx[j] += a[j] * yv[j];
                        }
                    }
                    let gy = &mut adj[y.0];
                    for j in 0..a.len() {
                        gy[j] += a[j] * xv[j];
                    }
                }
                Op::Concat(x, y) => {
                    let nx = self.nodes[x.0].value.len();
                    for (g, aj) in adj[x.0].iter_mut().zip(&a[..nx]) {
                        *g += aj;
                    }
                    for (g, aj) in adj[y.0].iter_mut().zip(&a[nx..]) {
                        *g += aj;
                    }
                }
                Op::Scale(x, k) => {
                    for (g, aj) in adj[x.0].iter_mut().zip(&a) {
                        *g += aj * k;
                    }
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        adj[x.0][0] += a[0];
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let p = softmax(&self.nodes[logits.0].value);
                    let gl = &mut adj[logits.0];
                    for (j, pj) in p.iter().enumerate() {
                        let indicator = if j == *target { 1.0 } else { 0.0 };
                        gl[j] += a[0] * (pj - indicator);
                    }
                }
            }
        }
        Ok(())
    }

    /// `backward_scaled` with seed 1.
    pub fn backward(&self, loss: NodeId, store: &ParamStore, grads: &mut Gradients) -> Result<()> {
        self.backward_scaled(loss, store, grads, 1.0)
    }
}
