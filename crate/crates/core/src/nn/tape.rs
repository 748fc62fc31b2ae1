use std::sync::Arc;

use super::{AttentionKind, NnError};
use crate::graph::AdjacencyMatrix;
use crate::tensor::{gemm, Tensor};

type Result<T> = std::result::Result<T, NnError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One graph's adjacency occupying rows `offset..offset + size` of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBlock {
    pub offset: usize,
    pub size: usize,
    pub weights: Tensor,
    pub normalized: Tensor,
    /// Row-major `size × size` neighbour mask.
    pub mask: Vec<bool>,
}

/// Block-diagonal stack of per-step adjacencies, so many environment steps
/// can share one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphBatch {
    blocks: Vec<GraphBlock>,
    rows: usize,
}

impl GraphBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(adj: &AdjacencyMatrix) -> Self {
        let mut g = Self::new();
        g.push(adj);
        g
    }

    pub fn push(&mut self, adj: &AdjacencyMatrix) {
        let n = adj.len();
        self.push_parts(
            adj.weights.clone(),
            adj.degree_normalize(),
            adj.mask.iter().flatten().copied().collect(),
        );
        debug_assert_eq!(self.blocks.last().unwrap().size, n);
    }

    /// Append a block from raw parts.
    ///
    /// # Panics
    /// If the matrices are not square and of matching size.
    pub fn push_parts(&mut self, weights: Tensor, normalized: Tensor, mask: Vec<bool>) {
        let n = weights.rows();
        assert_eq!(weights.shape(), (n, n), "adjacency must be square");
        assert_eq!(normalized.shape(), (n, n), "normalized adjacency must match");
        assert_eq!(mask.len(), n * n, "mask must match adjacency");
        self.blocks.push(GraphBlock {
            offset: self.rows,
            size: n,
            weights,
            normalized,
            mask,
        });
        self.rows += n;
    }

    pub fn append(&mut self, other: &GraphBatch) {
        for b in &other.blocks {
            self.push_parts(b.weights.clone(), b.normalized.clone(), b.mask.clone());
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn blocks(&self) -> &[GraphBlock] {
        &self.blocks
    }
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Propagate {
        x: Var,
        graph: Arc<GraphBatch>,
        normalized: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        graph: Arc<GraphBatch>,
        kind: AttentionKind,
        scale: f64,
        /// Per block, row-major attention weights.
        phi: Vec<Vec<f64>>,
        /// Per row, the score sum used by the literal ratio form.
        denom: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf value (parameter or data).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let out = av.matmul(bv);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Add the `1 × c` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) + bv.get(0, c));
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias))
    }

    /// Repeat a `1 × c`, `r × 1` or `1 × 1` value to `rows × cols`.
    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        let ok = (xv.rows() == rows || xv.rows() == 1) && (xv.cols() == cols || xv.cols() == 1);
        if !ok {
            return Err(mismatch("broadcast", xv, &Tensor::zeros(rows, cols)));
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, xv.get(r.min(xv.rows() - 1), c.min(xv.cols() - 1)));
            }
        }
        self.push("broadcast", out, Op::Broadcast(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(x, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), pv));
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                for c in 0..pv.cols() {
                    out.set(r, c0 + c, pv.get(r, c));
                }
            }
            c0 += pv.cols();
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(mismatch("slice_cols", xv, &Tensor::zeros(xv.rows(), start + len)));
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            for c in 0..len {
                out.set(r, c, xv.get(r, start + c));
            }
        }
        self.push("slice_cols", out, Op::SliceCols(x, start))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push("mean", out, Op::Mean(x))
    }

    /// Block-diagonal `M · x` (or `D⁻¹M · x` when `normalized`).
    pub fn propagate(&mut self, x: Var, graph: &Arc<GraphBatch>, normalized: bool) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != graph.rows() {
            return Err(mismatch("propagate", xv, &Tensor::zeros(graph.rows(), graph.rows())));
        }
        let d = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), d);
        for b in graph.blocks() {
            let m = if normalized { &b.normalized } else { &b.weights };
            for i in 0..b.size {
                for j in 0..b.size {
                    let w = m.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let src = xv.row(b.offset + j);
                    let dst = &mut out.data_mut()[(b.offset + i) * d..(b.offset + i + 1) * d];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        self.push(
            "propagate",
            out,
            Op::Propagate {
                x,
                graph: Arc::clone(graph),
                normalized,
            },
        )
    }

    /// Masked single-head attention. `q`, `k`, `v` are `N × d_h`; each row
    /// attends over its neighbour mask within its graph block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, graph: &Arc<GraphBatch>, kind: AttentionKind) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        if qv.rows() != graph.rows() || vv.rows() != graph.rows() {
            return Err(mismatch("attention", qv, vv));
        }
        let dh = qv.cols();
        let dv = vv.cols();
        let scale = 1.0 / (dh.max(1) as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), dv);
        let mut phi_blocks = Vec::with_capacity(graph.blocks().len());
        let mut denom = vec![1.0; qv.rows()];
        for b in graph.blocks() {
            let s = b.size;
            let mut phi = vec![0.0; s * s];
            for i in 0..s {
                let row = b.offset + i;
                let qi = qv.row(row);
                let mask = &b.mask[i * s..(i + 1) * s];
                if !mask.iter().any(|&m| m) {
                    return Err(NnError::EmptyNeighborSet { agent: row });
                }
                let logits = &mut phi[i * s..(i + 1) * s];
                for j in 0..s {
                    if mask[j] {
                        let kj = kv.row(b.offset + j);
                        logits[j] = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
                if kind == AttentionKind::LiteralRatio {
                    let total: f64 = (0..s).filter(|&j| mask[j]).map(|j| logits[j]).sum();
                    denom[row] = total;
                    for j in 0..s {
                        if mask[j] {
                            logits[j] /= total;
                        }
                    }
                }
                let max = (0..s)
                    .filter(|&j| mask[j])
                    .map(|j| logits[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..s {
                    if mask[j] {
                        logits[j] = (logits[j] - max).exp();
                        z += logits[j];
                    }
                }
                for j in 0..s {
                    if mask[j] {
                        logits[j] /= z;
                        let w = logits[j];
                        let vj = vv.row(b.offset + j);
                        let dst = &mut out.data_mut()[row * dv..(row + 1) * dv];
                        for (o, x) in dst.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    } else {
                        logits[j] = 0.0;
                    }
                }
            }
            phi_blocks.push(phi);
        }
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                graph: Arc::clone(graph),
                kind,
                scale,
                phi: phi_blocks,
                denom,
            },
        )
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// one `size × size` matrix per graph block.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[v.0].op {
            Op::Attention { phi, graph, .. } => Some(
                graph
                    .blocks()
                    .iter()
                    .zip(phi)
                    .map(|(b, p)| Tensor::from_vec(b.size, b.size, p.clone()))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NnError::NotScalar(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(NnError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::from_vec(x.rows(), x.cols(), data)
        };
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                gemm(g, false, bv, true, &mut da, 0.0);
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                gemm(av, true, g, false, &mut db, 0.0);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, elementwise(bv, &|b, g| b * g));
                accumulate(grads, *b, elementwise(av, &|a, g| a * g));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                accumulate(grads, *a, elementwise(bv, &|b, g| g / b));
                let db = Tensor::from_vec(
                    y.rows(),
                    y.cols(),
                    y.data()
                        .iter()
                        .zip(bv.data())
                        .zip(g.data())
                        .map(|((&q, &b), &g)| -g * q / b)
                        .collect(),
                );
                accumulate(grads, *b, db);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
                let mask = |want: bool| {
                    Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(&pick_a)
                            .map(|(&g, &p)| if p == want { g } else { 0.0 })
                            .collect(),
                    )
                };
                accumulate(grads, *a, mask(true));
                accumulate(grads, *b, mask(false));
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, col_sums(g));
            }
            Op::Broadcast(x) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let (rr, cc) = (r.min(xv.rows() - 1), c.min(xv.cols() - 1));
                        dx.set(rr, cc, dx.get(rr, cc) + g.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Tanh(x) => accumulate(grads, *x, elementwise(y, &|t, g| g * (1.0 - t * t))),
            Op::Relu(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, elementwise(xv, &|v, g| if v > 0.0 { g } else { 0.0 }));
            }
            Op::Exp(x) => accumulate(grads, *x, elementwise(y, &|e, g| e * g)),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    grads,
                    *x,
                    elementwise(xv, &|v, g| if v >= lo && v <= hi { g } else { 0.0 }),
                );
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        for c in 0..w {
                            dp.set(r, c, g.get(r, c0 + c));
                        }
                    }
                    accumulate(grads, p, dp);
                    c0 += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.item() / xv.len() as f64;
                accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), s));
            }
            Op::Propagate { x, graph, normalized } => {
                let d = g.cols();
                let mut dx = Tensor::zeros(g.rows(), d);
                for b in graph.blocks() {
                    let m = if *normalized { &b.normalized } else { &b.weights };
                    for i in 0..b.size {
                        let src = g.row(b.offset + i);
                        for j in 0..b.size {
                            let w = m.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut dx.data_mut()[(b.offset + j) * d..(b.offset + j + 1) * d];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += w * s;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                graph,
                kind,
                scale,
                phi,
                denom,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Tensor::zeros(qv.rows(), qv.cols());
                let mut dk = Tensor::zeros(kv.rows(), kv.cols());
                let mut dv = Tensor::zeros(vv.rows(), vv.cols());
                let dh = qv.cols();
                let dvc = vv.cols();
                for (b, p) in graph.blocks().iter().zip(phi) {
                    let s = b.size;
                    let mut dz = vec![0.0; s];
                    for i in 0..s {
                        let row = b.offset + i;
                        let gi = g.row(row);
                        let pi = &p[i * s..(i + 1) * s];
                        let mask = &b.mask[i * s..(i + 1) * s];
                        // dφ_ij = g_i · v_j
                        let mut weighted = 0.0;
                        for j in 0..s {
                            if !mask[j] {
                                continue;
                            }
                            let col = b.offset + j;
                            let dphi: f64 = gi.iter().zip(vv.row(col)).map(|(a, c)| a * c).sum();
                            dz[j] = dphi;
                            weighted += pi[j] * dphi;
                            let dst = &mut dv.data_mut()[col * dvc..(col + 1) * dvc];
                            for (o, x) in dst.iter_mut().zip(gi) {
                                *o += pi[j] * x;
                            }
                        }
                        for j in 0..s {
                            if mask[j] {
                                dz[j] = pi[j] * (dz[j] - weighted);
                            }
                        }
                        if *kind == AttentionKind::LiteralRatio {
                            // z_ij = s_ij / S_i, recover z from the logits.
                            let total = denom[row];
                            let qi = qv.row(row);
                            let mut dot = 0.0;
                            for j in 0..s {
                                if mask[j] {
                                    let sij = scale * qi.iter().zip(kv.row(b.offset + j)).map(|(a, c)| a * c).sum::<f64>();
                                    dot += dz[j] * sij / total;
                                }
                            }
                            for j in 0..s {
                                if mask[j] {
                                    dz[j] = (dz[j] - dot) / total;
                                }
                            }
                        }
                        for j in 0..s {
                            if !mask[j] || dz[j] == 0.0 {
                                continue;
                            }
                            let col = b.offset + j;
                            let ds = dz[j] * scale;
                            let (qi, kj) = (qv.row(row), kv.row(col));
                            let dqi = &mut dq.data_mut()[row * dh..(row + 1) * dh];
                            for (o, x) in dqi.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let dkj = &mut dk.data_mut()[col * dh..(col + 1) * dh];
                            for (o, x) in dkj.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
        }
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mask(n: usize) -> Vec<bool> {
        vec![true; n * n]
    }

    #[test]
    fn sum_of_inputs_has_unit_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_rows(&[[1.0, -2.0]])).unwrap();
        let b = tape.input(Tensor::from_rows(&[[0.5, 3.0]])).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &Tensor::filled(1, 2, 1.0));
        assert_eq!(grads.get(b).unwrap(), &Tensor::filled(1, 2, 1.0));
    }

    #[test]
    fn disconnected_node_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(2.0)).unwrap();
        let b = tape.input(Tensor::scalar(3.0)).unwrap();
        let loss = tape.exp(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap().item(), 2f64.exp());
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(2, 3)).unwrap();
        let b = tape.input(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NnError::ShapeMismatch { op: "matmul", .. })));
        assert!(matches!(tape.backward(a), Err(NnError::NotScalar((2, 3)))));
        let c = tape.input(Tensor::zeros(1, 2)).unwrap();
        assert!(tape.add_row(a, c).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.input(Tensor::scalar(f64::NAN)),
            Err(NnError::NonFinite { op: "input" })
        ));
        let a = tape.input(Tensor::scalar(1.0)).unwrap();
        let z = tape.input(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(tape.div(a, z), Err(NnError::NonFinite { op: "div" })));
    }

    #[test]
    fn clamp_and_minimum_route_gradients() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[[-2.0, 0.5, 2.0]])).unwrap();
        let c = tape.clamp(x, -1.0, 1.0).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_rows(&[[1.0, 5.0]])).unwrap();
        let b = tape.input(Tensor::from_rows(&[[1.0, 2.0]])).unwrap();
        let m = tape.minimum(a, b).unwrap();
        let loss = tape.sum(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn broadcast_sums_back() {
        let mut tape = Tape::new();
        let s = tape.input(Tensor::scalar(2.0)).unwrap();
        let b = tape.broadcast(s, 3, 2).unwrap();
        assert_eq!(tape.value(b), &Tensor::filled(3, 2, 2.0));
        let loss = tape.sum(b).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(s).unwrap().item(), 6.0);
        let row = tape.input(Tensor::from_rows(&[[1.0, 2.0]])).unwrap();
        assert!(tape.broadcast(row, 2, 3).is_err());
    }

    #[test]
    fn propagate_is_block_diagonal() {
        let mut g = GraphBatch::new();
        g.push_parts(Tensor::from_rows(&[[1.0, 2.0], [0.0, 1.0]]), Tensor::identity(2), dense_mask(2));
        g.push_parts(Tensor::from_rows(&[[3.0]]), Tensor::identity(1), dense_mask(1));
        let g = Arc::new(g);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[[1.0], [10.0], [100.0]])).unwrap();
        let y = tape.propagate(x, &g, false).unwrap();
        assert_eq!(tape.value(y).data(), &[21.0, 10.0, 300.0]);
        let y2 = tape.propagate(x, &g, true).unwrap();
        assert_eq!(tape.value(y2), tape.value(x));
    }

    #[test]
    fn single_agent_attention_returns_its_value() {
        let mut g = GraphBatch::new();
        g.push_parts(Tensor::identity(1), Tensor::identity(1), vec![true]);
        let g = Arc::new(g);
        let mut tape = Tape::new();
        let q = tape.input(Tensor::from_rows(&[[0.3, -1.0]])).unwrap();
        let k = tape.input(Tensor::from_rows(&[[2.0, 0.1]])).unwrap();
        let v = tape.input(Tensor::from_rows(&[[4.0, 5.0]])).unwrap();
        let out = tape.attention(q, k, v, &g, AttentionKind::Softmax).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
        assert_eq!(tape.attention_weights(out).unwrap()[0], Tensor::identity(1));
    }

    #[test]
    fn empty_neighbor_set_is_an_error() {
        let mut g = GraphBatch::new();
        g.push_parts(Tensor::identity(2), Tensor::identity(2), vec![true, false, false, false]);
        let g = Arc::new(g);
        let mut tape = Tape::new();
        let q = tape.input(Tensor::zeros(2, 1)).unwrap();
        assert!(matches!(
            tape.attention(q, q, q, &g, AttentionKind::Softmax),
            Err(NnError::EmptyNeighborSet { agent: 1 })
        ));
    }

    #[test]
    fn three_agent_attention_matches_hand_softmax() {
        // 1 head, d_h = 2, agent 2 sees only itself.
        let mask = vec![true, true, true, true, true, false, false, false, true];
        let mut g = GraphBatch::new();
        g.push_parts(Tensor::identity(3), Tensor::identity(3), mask);
        let g = Arc::new(g);
        let h = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let mut tape = Tape::new();
        let x = tape.input(h.clone()).unwrap();
        let out = tape.attention(x, x, x, &g, AttentionKind::Softmax).unwrap();
        let phi = &tape.attention_weights(out).unwrap()[0];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // Row 0 logits: [1, 0, 1]/√2.
        let e1 = r.exp();
        let z0 = 2.0 * e1 + 1.0;
        assert!((phi.get(0, 0) - e1 / z0).abs() < 1e-15);
        assert!((phi.get(0, 1) - 1.0 / z0).abs() < 1e-15);
        assert!((phi.get(0, 2) - e1 / z0).abs() < 1e-15);
        // Row 1 logits: [0, 1]/√2 over agents {0, 1}.
        let z1 = 1.0 + e1;
        assert!((phi.get(1, 0) - 1.0 / z1).abs() < 1e-15);
        assert_eq!(phi.get(1, 2), 0.0);
        assert_eq!(phi.get(2, 2), 1.0);
        let o = tape.value(out);
        assert!((o.get(0, 0) - 2.0 * e1 / z0).abs() < 1e-15);
        assert!((o.get(0, 1) - (1.0 + e1) / z0).abs() < 1e-15);
        assert!((o.get(1, 0) - 1.0 / z1).abs() < 1e-15);
        assert_eq!(o.row(2), h.row(2));
    }
}
