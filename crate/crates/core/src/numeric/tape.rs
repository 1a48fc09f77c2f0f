//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records operations eagerly: every call computes its output and
//! appends a node holding the value plus whatever the backward pass needs.
//! Node ids are assigned in recording order, so the tape is already a
//! topological order and [`Tape::backward`] walks it in reverse.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::matrix::{gemm, Layout, Matrix};
use super::{canonical_sum, gelu_derivative, gelu_scalar};
use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::training::Triplet;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch normalization epsilon inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Running statistic momentum: `running = m·running + (1 - m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Rows with a smaller norm are mapped to zero by [`Tape::l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

const NO_EDGE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running mean/variance of a normalization layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Statistics observed by a train-mode normalization; `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Constant,
    Param,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    Gelu(Var),
    ConcatCols(Var, Var),
    RelativeEdges {
        p: Var,
        q: Var,
        graph: Arc<NeighborGraph>,
    },
    NeighborMax {
        edges: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    StackRows(Vec<Var>),
    TripletLoss {
        emb: Var,
        triplets: Vec<Triplet>,
        margin: f64,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every registered parameter,
/// keyed by the caller's parameter key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<usize, Matrix>,
}

impl GradientMap {
    pub fn get(&self, key: usize) -> Option<&Matrix> {
        self.grads.get(&key)
    }

    pub fn get_mut(&mut self, key: usize) -> Option<&mut Matrix> {
        self.grads.get_mut(&key)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Matrix::all_finite)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf. Registering the same key twice returns the
    /// first leaf, so each parameter has exactly one gradient.
    pub fn param(&mut self, key: usize, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        let bl = Layout::of(bm, b_transposed);
        if am.cols() != bl.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}{}",
                    am.rows(),
                    am.cols(),
                    bm.rows(),
                    bm.cols(),
                    if b_transposed { " (transposed)" } else { "" }
                ),
            ));
        }
        let mut out = Matrix::zeros(am.rows(), bl.cols);
        gemm(Layout::of(am, false), bl, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b, b_transposed }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", am.shape(), bm.shape())));
        }
        let mut out = am.clone();
        out.add_assign(bm);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut out = xm.clone();
        for v in out.values_mut() {
            *v = gelu_scalar(*v);
        }
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.rows() != bm.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {} rows", am.rows(), bm.rows()),
            ));
        }
        let (ca, cb) = (am.cols(), bm.cols());
        let mut out = Matrix::zeros(am.rows(), ca + cb);
        for r in 0..am.rows() {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(am.row(r));
            row[ca..].copy_from_slice(bm.row(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a, b), needs))
    }

    /// For every edge `(i, j)` in edge-row order: `p[j] - p[i] + q[i]`.
    ///
    /// With `p = X·θᵀ` and `q = X·φᵀ` this is the pre-activation
    /// `θ·(x_j - x_i) + φ·x_i` of an EdgeConv edge.
    pub fn relative_edges(&mut self, p: Var, q: Var, graph: &Arc<NeighborGraph>) -> Result<Var> {
        let (pm, qm) = (self.value(p), self.value(q));
        if pm.shape() != qm.shape() {
            return Err(Error::shape(
                "relative_edges",
                format!("{:?} vs {:?}", pm.shape(), qm.shape()),
            ));
        }
        if pm.rows() != graph.vertex_count() {
            return Err(Error::shape(
                "relative_edges",
                format!("{} feature rows for a {}-vertex graph", pm.rows(), graph.vertex_count()),
            ));
        }
        let c = pm.cols();
        let mut out = Matrix::zeros(graph.edge_count(), c);
        for (e, (i, j)) in graph.edges().enumerate() {
            let (pi, pj, qi) = (pm.row(i), pm.row(j), qm.row(i));
            for (k, o) in out.row_mut(e).iter_mut().enumerate() {
                *o = pj[k] - pi[k] + qi[k];
            }
        }
        let needs = self.needs(p) || self.needs(q);
        Ok(self.push(
            out,
            Op::RelativeEdges {
                p,
                q,
                graph: Arc::clone(graph),
            },
            needs,
        ))
    }

    /// Per-vertex, per-channel maximum over the vertex's edge rows. Vertices
    /// without neighbors produce zeros; ties go to the lowest edge row.
    pub fn neighbor_max(&mut self, edges: Var, graph: &NeighborGraph) -> Result<Var> {
        let em = self.value(edges);
        if em.rows() != graph.edge_count() {
            return Err(Error::IndexOutOfRange {
                op: "neighbor_max",
                index: graph.edge_count(),
                limit: em.rows(),
            });
        }
        let (n, c) = (graph.vertex_count(), em.cols());
        let mut out = Matrix::zeros(n, c);
        let mut argmax = vec![NO_EDGE; n * c];
        for v in 0..n {
            let range = graph.edge_range(v);
            if range.is_empty() {
                continue;
            }
            let best = &mut argmax[v * c..(v + 1) * c];
            best.fill(range.start);
            let row = out.row_mut(v);
            row.copy_from_slice(em.row(range.start));
            for e in range.start + 1..range.end {
                for (k, &val) in em.row(e).iter().enumerate() {
                    if val > row[k] {
                        row[k] = val;
                        best[k] = e;
                    }
                }
            }
        }
        let needs = self.needs(edges);
        Ok(self.push(out, Op::NeighborMax { edges, argmax }, needs))
    }

    /// Per-channel normalization over rows. `gamma`/`beta` are `1 x C`.
    ///
    /// Train mode with at least two rows normalizes by batch statistics and
    /// returns them for the caller's running-statistic update. With a single
    /// row the batch variance is zero, so it falls back to `running`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != (1, c) {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} is {:?}, expected (1, {c})", self.value(v).shape()),
                ));
            }
        }
        if running.channels() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{} running channels for {c} columns", running.channels()),
            ));
        }
        if n == 0 {
            return Err(Error::InvalidInput("batchnorm over zero rows".into()));
        }
        let use_batch = mode == Mode::Train && n >= 2;
        if mode == Mode::Train && n == 1 {
            log::warn!("batchnorm in train mode on a single row; using running statistics");
        }
        let (mean, var, stats) = if use_batch {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            let mut column = vec![0.0; n];
            for k in 0..c {
                for (r, slot) in column.iter_mut().enumerate() {
                    *slot = xm.get(r, k);
                }
                // canonical order keeps the statistics independent of row order
                let mu = canonical_sum(&mut column) / n as f64;
                for slot in column.iter_mut() {
                    *slot = (*slot - mu) * (*slot - mu);
                }
                mean[k] = mu;
                var[k] = canonical_sum(&mut column) / n as f64;
            }
            let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (running.mean.clone(), running.var.clone(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).values(), self.value(beta).values());
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            for k in 0..c {
                let h = (xm.get(r, k) - mean[k]) * inv_std[k];
                xhat.set(r, k, h);
                out.set(r, k, g[k] * h + b[k]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: use_batch,
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Divides each row by its L2 norm; rows with norm below
    /// [`NORM_FLOOR`] become zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut out = xm.clone();
        let mut norms = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let norm = xm.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let row = out.row_mut(r);
            if norm < NORM_FLOOR {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        let needs = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, needs)
    }

    /// Column-wise maximum over all rows, giving a `1 x C` row. Ties go to
    /// the lowest row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let xm = self.value(x);
        if xm.rows() == 0 {
            return Err(Error::InvalidInput("max pool over zero rows".into()));
        }
        let c = xm.cols();
        let mut out = Matrix::zeros(1, c);
        let mut argmax = vec![0; c];
        out.row_mut(0).copy_from_slice(xm.row(0));
        for r in 1..xm.rows() {
            for (k, &val) in xm.row(r).iter().enumerate() {
                if val > out.get(0, k) {
                    out.set(0, k, val);
                    argmax[k] = r;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }, needs))
    }

    /// Stacks `1 x C` rows into an `R x C` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let c = rows.first().map_or(0, |&r| self.value(r).cols());
        let mut out = Matrix::zeros(rows.len(), c);
        for (i, &r) in rows.iter().enumerate() {
            let m = self.value(r);
            if m.shape() != (1, c) {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row {i} is {:?}, expected (1, {c})", m.shape()),
                ));
            }
            out.row_mut(i).copy_from_slice(m.row(0));
        }
        let needs = rows.iter().any(|&r| self.needs(r));
        Ok(self.push(out, Op::StackRows(rows.to_vec()), needs))
    }

    /// Mean hinge `max(d(a,p) - d(a,n) + margin, 0)` over `triplets`, which
    /// index rows of `emb`. An empty triplet list gives zero.
    pub fn triplet_loss(&mut self, emb: Var, triplets: &[Triplet], margin: f64) -> Result<Var> {
        let em = self.value(emb);
        let mut total = 0.0;
        for t in triplets {
            for idx in [t.anchor, t.positive, t.negative] {
                if idx >= em.rows() {
                    return Err(Error::IndexOutOfRange {
                        op: "triplet_loss",
                        index: idx,
                        limit: em.rows(),
                    });
                }
            }
            let dap = row_distance(em.row(t.anchor), em.row(t.positive));
            let dan = row_distance(em.row(t.anchor), em.row(t.negative));
            total += (dap - dan + margin).max(0.0);
        }
        let loss = if triplets.is_empty() {
            0.0
        } else {
            total / triplets.len() as f64
        };
        let needs = self.needs(emb);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::TripletLoss {
                emb,
                triplets: triplets.to_vec(),
                margin,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Matrix::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let s = if m.is_empty() { 0.0 } else { m.sum() / m.len() as f64 };
        let needs = self.needs(x);
        self.push(Matrix::scalar(s), Op::Mean(x), needs)
    }

    /// Gradients of the `1 x 1` value `loss` for every registered parameter.
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {shape:?}")));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = GradientMap::default();
        for (&key, &v) in &self.params {
            let value = &self.nodes[v.0].value;
            let grad = if v.0 <= loss.0 { grads[v.0].take() } else { None };
            out.grads
                .insert(key, grad.unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols())));
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        match &nodes[idx].op {
            Op::Constant | Op::Param => {}
            Op::MatMul { a, b, b_transposed } => {
                let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
                if needs(*a) {
                    // dA = G·Bᵀ, or G·B when the forward used Bᵀ
                    let slot = slot(grads, *a, am);
                    gemm(Layout::of(g, false), Layout::of(bm, !*b_transposed), slot, 1.0);
                }
                if needs(*b) {
                    let slot = slot(grads, *b, bm);
                    if *b_transposed {
                        // dB = Gᵀ·A
                        gemm(Layout::of(g, true), Layout::of(am, false), slot, 1.0);
                    } else {
                        // dB = Aᵀ·G
                        gemm(Layout::of(am, true), Layout::of(g, false), slot, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        slot(grads, v, &nodes[v.0].value).add_assign(g);
                    }
                }
            }
            Op::Gelu(x) => {
                let xm = &nodes[x.0].value;
                let s = slot(grads, *x, xm);
                for ((d, &gv), &xv) in s.values_mut().iter_mut().zip(g.values()).zip(xm.values()) {
                    *d += gv * gelu_derivative(xv);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                if needs(*a) {
                    let s = slot(grads, *a, &nodes[a.0].value);
                    for r in 0..g.rows() {
                        for (d, gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *d += gv;
                        }
                    }
                }
                if needs(*b) {
                    let s = slot(grads, *b, &nodes[b.0].value);
                    for r in 0..g.rows() {
                        for (d, gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::RelativeEdges { p, q, graph } => {
                if needs(*p) {
                    let s = slot(grads, *p, &nodes[p.0].value);
                    for (e, (i, j)) in graph.edges().enumerate() {
                        for (k, &gv) in g.row(e).iter().enumerate() {
                            let c = s.cols();
                            let vals = s.values_mut();
                            vals[j * c + k] += gv;
                            vals[i * c + k] -= gv;
                        }
                    }
                }
                if needs(*q) {
                    let s = slot(grads, *q, &nodes[q.0].value);
                    for (e, (i, _)) in graph.edges().enumerate() {
                        for (d, gv) in s.row_mut(i).iter_mut().zip(g.row(e)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::NeighborMax { edges, argmax } => {
                let s = slot(grads, *edges, &nodes[edges.0].value);
                let c = g.cols();
                for (flat, &e) in argmax.iter().enumerate() {
                    if e != NO_EDGE {
                        let k = flat % c;
                        let cur = s.get(e, k);
                        s.set(e, k, cur + g.values()[flat]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = xhat.shape();
                let gam = nodes[gamma.0].value.values();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for k in 0..c {
                        let gv = g.get(r, k);
                        sum_g[k] += gv;
                        sum_gx[k] += gv * xhat.get(r, k);
                    }
                }
                if needs(*gamma) {
                    let s = slot(grads, *gamma, &nodes[gamma.0].value);
                    for (d, v) in s.values_mut().iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                }
                if needs(*beta) {
                    let s = slot(grads, *beta, &nodes[beta.0].value);
                    for (d, v) in s.values_mut().iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
                if needs(*x) {
                    let s = slot(grads, *x, &nodes[x.0].value);
                    let nf = n as f64;
                    for r in 0..n {
                        for k in 0..c {
                            let dxhat = g.get(r, k) * gam[k];
                            let d = if *batch_stats {
                                // sums of dxhat and dxhat·xhat over the batch
                                let s1 = sum_g[k] * gam[k];
                                let s2 = sum_gx[k] * gam[k];
                                inv_std[k] / nf * (nf * dxhat - s1 - xhat.get(r, k) * s2)
                            } else {
                                dxhat * inv_std[k]
                            };
                            let cur = s.get(r, k);
                            s.set(r, k, cur + d);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &nodes[idx].value;
                let s = slot(grads, *x, &nodes[x.0].value);
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < NORM_FLOOR {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in s.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += (gv - yv * dot) / norm;
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let s = slot(grads, *x, &nodes[x.0].value);
                for (k, &r) in argmax.iter().enumerate() {
                    let cur = s.get(r, k);
                    s.set(r, k, cur + g.get(0, k));
                }
            }
            Op::StackRows(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    if needs(r) {
                        let s = slot(grads, r, &nodes[r.0].value);
                        for (d, gv) in s.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::TripletLoss { emb, triplets, margin } => {
                if triplets.is_empty() {
                    return;
                }
                let em = &nodes[emb.0].value;
                let scale = g.get(0, 0) / triplets.len() as f64;
                let s = slot(grads, *emb, em);
                let dim = em.cols();
                let mut ua = vec![0.0; dim];
                let mut un = vec![0.0; dim];
                for t in triplets {
                    let (a, p, n) = (em.row(t.anchor), em.row(t.positive), em.row(t.negative));
                    let dap = row_distance(a, p);
                    let dan = row_distance(a, n);
                    // the kink itself takes the inactive side
                    if dap - dan + margin <= 0.0 {
                        continue;
                    }
                    for k in 0..dim {
                        ua[k] = if dap > 0.0 { (a[k] - p[k]) / dap } else { 0.0 };
                        un[k] = if dan > 0.0 { (a[k] - n[k]) / dan } else { 0.0 };
                    }
                    for k in 0..dim {
                        let va = s.get(t.anchor, k) + scale * (ua[k] - un[k]);
                        s.set(t.anchor, k, va);
                        let vp = s.get(t.positive, k) - scale * ua[k];
                        s.set(t.positive, k, vp);
                        let vn = s.get(t.negative, k) + scale * un[k];
                        s.set(t.negative, k, vn);
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.get(0, 0);
                let s = slot(grads, *x, &nodes[x.0].value);
                s.values_mut().iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean(x) => {
                let xm = &nodes[x.0].value;
                if xm.is_empty() {
                    return;
                }
                let gv = g.get(0, 0) / xm.len() as f64;
                let s = slot(grads, *x, xm);
                s.values_mut().iter_mut().for_each(|d| *d += gv);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
