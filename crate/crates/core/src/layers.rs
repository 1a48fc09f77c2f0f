//! EdgeConv graph convolution, GCN blocks with normalization and residual
//! shortcuts, and the feed-forward module.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::numeric::{BatchStats, Matrix, Mode, RunningStats, Tape, Var};

/// Gaussian init with standard deviation `1/sqrt(fan_in)`.
pub(crate) fn init_weight<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, values).expect("length matches")
}

/// Learnables of one EdgeConv layer.
///
/// `theta`/`phi` are `C_mid x C_in` and act on column vectors; `update_w`
/// is `(C_in + C_mid) x C_out` and acts on row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeConvParams {
    pub theta: Matrix,
    pub phi: Matrix,
    pub update_w: Matrix,
}

impl EdgeConvParams {
    pub fn zeros(c_in: usize, c_mid: usize, c_out: usize) -> Self {
        EdgeConvParams {
            theta: Matrix::zeros(c_mid, c_in),
            phi: Matrix::zeros(c_mid, c_in),
            update_w: Matrix::zeros(c_in + c_mid, c_out),
        }
    }

    pub fn random<R: Rng>(c_in: usize, c_mid: usize, c_out: usize, rng: &mut R) -> Self {
        EdgeConvParams {
            theta: init_weight(c_mid, c_in, c_in, rng),
            phi: init_weight(c_mid, c_in, c_in, rng),
            update_w: init_weight(c_in + c_mid, c_out, c_in + c_mid, rng),
        }
    }
}

/// Two-layer perceptron weights: `w1` is `C x H`, `w2` is `H x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfmParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl FfmParams {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        FfmParams {
            w1: Matrix::zeros(width, hidden),
            w2: Matrix::zeros(hidden, width),
        }
    }

    pub fn random<R: Rng>(width: usize, hidden: usize, rng: &mut R) -> Self {
        FfmParams {
            w1: init_weight(width, hidden, width, rng),
            w2: init_weight(hidden, width, hidden, rng),
        }
    }
}

/// Per-channel scale/shift plus running statistics of a normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running: RunningStats,
}

impl NormParams {
    pub fn new(channels: usize) -> Self {
        NormParams {
            gamma: Matrix::filled(1, channels, 1.0),
            beta: Matrix::zeros(1, channels),
            running: RunningStats::new(channels),
        }
    }
}

/// One layer of a GCN block: EdgeConv followed by normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLayerParams {
    pub conv: EdgeConvParams,
    pub norm: NormParams,
}

/// Structure of a GCN block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnBlockConfig {
    pub layers: usize,
    pub width: usize,
    pub residual: bool,
}

impl GcnBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "GCN block needs at least one layer and one channel, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Tape handles of an [`EdgeConvParams`].
#[derive(Clone, Copy, Debug)]
pub struct EdgeConvVars {
    pub theta: Var,
    pub phi: Var,
    pub update_w: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockLayerVars {
    pub conv: EdgeConvVars,
    pub norm: NormVars,
}

#[derive(Clone, Copy, Debug)]
pub struct FfmVars {
    pub w1: Var,
    pub w2: Var,
}

/// Edge features `GeLU(θ·(x_j − x_i) + φ·x_i)`, one row per directed edge in
/// `(vertex, neighbor rank)` order.
pub fn edge_features(tape: &mut Tape, x: Var, graph: &Arc<NeighborGraph>, params: &EdgeConvVars) -> Result<Var> {
    let (n, c_in) = tape.value(x).shape();
    if n != graph.vertex_count() {
        return Err(Error::shape(
            "edge_features",
            format!("{n} rows for a {}-vertex graph", graph.vertex_count()),
        ));
    }
    if tape.value(params.theta).cols() != c_in || tape.value(params.phi).cols() != c_in {
        return Err(Error::shape(
            "edge_features",
            format!(
                "theta {:?} / phi {:?} against {c_in} input channels",
                tape.value(params.theta).shape(),
                tape.value(params.phi).shape()
            ),
        ));
    }
    let p = tape.matmul_bt(x, params.theta)?;
    let q = tape.matmul_bt(x, params.phi)?;
    let pre = tape.relative_edges(p, q, graph)?;
    Ok(tape.gelu(pre))
}

/// EdgeConv: `concat(x_i, max_j e_ij) · W`.
pub fn edge_conv(tape: &mut Tape, x: Var, graph: &Arc<NeighborGraph>, params: &EdgeConvVars) -> Result<Var> {
    let edges = edge_features(tape, x, graph, params)?;
    let aggregated = tape.neighbor_max(edges, graph)?;
    let joined = tape.concat_cols(x, aggregated)?;
    tape.matmul(joined, params.update_w)
}

/// Result of [`gcn_block`].
pub struct BlockOutput {
    pub output: Var,
    /// Vertex features after each layer.
    pub snapshots: Vec<Var>,
    /// Train-mode normalization statistics, one entry per layer.
    pub stats: Vec<Option<BatchStats>>,
}

/// Stacked `GeLU(norm(edge_conv(x)))` layers, each with its own graph and
/// parameters, and an optional vertex-wise residual around every layer.
pub fn gcn_block(
    tape: &mut Tape,
    x: Var,
    graphs: &[Arc<NeighborGraph>],
    layers: &[BlockLayerVars],
    running: &[&RunningStats],
    residual: bool,
    mode: Mode,
) -> Result<BlockOutput> {
    if graphs.len() != layers.len() || running.len() != layers.len() {
        return Err(Error::shape(
            "gcn_block",
            format!(
                "{} graphs, {} layers, {} statistics",
                graphs.len(),
                layers.len(),
                running.len()
            ),
        ));
    }
    let mut h = x;
    let mut snapshots = Vec::with_capacity(layers.len());
    let mut stats = Vec::with_capacity(layers.len());
    for ((graph, layer), run) in graphs.iter().zip(layers).zip(running) {
        let conv = edge_conv(tape, h, graph, &layer.conv)?;
        let (normed, st) = tape.batchnorm(conv, layer.norm.gamma, layer.norm.beta, run, mode)?;
        let y = tape.gelu(normed);
        h = if residual { tape.add(y, h)? } else { y };
        snapshots.push(h);
        stats.push(st);
    }
    Ok(BlockOutput {
        output: h,
        snapshots,
        stats,
    })
}

/// Feed-forward module with residual: `GeLU(X·W1)·W2 + X`.
pub fn ffm(tape: &mut Tape, x: Var, params: &FfmVars) -> Result<Var> {
    let width = tape.value(x).cols();
    let (w1, w2) = (tape.value(params.w1).shape(), tape.value(params.w2).shape());
    if w1.0 != width || w2.1 != width || w1.1 != w2.0 {
        return Err(Error::shape("ffm", format!("w1 {w1:?}, w2 {w2:?} for width {width}")));
    }
    let hidden = tape.matmul(x, params.w1)?;
    let act = tape.gelu(hidden);
    let back = tape.matmul(act, params.w2)?;
    tape.add(back, x)
}

/// Registers a layer's learnables on a tape with keys `key, key+1, ...`,
/// returning the handles and the next free key.
pub fn bind_edge_conv(tape: &mut Tape, p: &EdgeConvParams, key: usize) -> (EdgeConvVars, usize) {
    let vars = EdgeConvVars {
        theta: tape.param(key, &p.theta),
        phi: tape.param(key + 1, &p.phi),
        update_w: tape.param(key + 2, &p.update_w),
    };
    (vars, key + 3)
}

pub fn bind_norm(tape: &mut Tape, p: &NormParams, key: usize) -> (NormVars, usize) {
    let vars = NormVars {
        gamma: tape.param(key, &p.gamma),
        beta: tape.param(key + 1, &p.beta),
    };
    (vars, key + 2)
}

pub fn bind_ffm(tape: &mut Tape, p: &FfmParams, key: usize) -> (FfmVars, usize) {
    let vars = FfmVars {
        w1: tape.param(key, &p.w1),
        w2: tape.param(key + 1, &p.w2),
    };
    (vars, key + 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::knn_graph;
    use crate::numeric::gelu_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        init_weight(rows, cols, 1, rng)
    }

    #[test]
    fn zero_difference_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Two coincident vertices: x_j - x_i vanishes on both edges.
        let row = random_matrix(1, 3, &mut rng);
        let x = Matrix::from_rows(&[row.row(0), row.row(0)]).unwrap();
        let params = EdgeConvParams::random(3, 4, 3, &mut rng);
        let graph = Arc::new(knn_graph(&x, 1).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (vars, _) = bind_edge_conv(&mut tape, &params, 0);
        let e = edge_features(&mut tape, xv, &graph, &vars).unwrap();
        let phix = x.matmul(&params.phi.transpose()).unwrap();
        for r in 0..2 {
            for k in 0..4 {
                let want = gelu_scalar(phix.get(r, k));
                assert!((tape.value(e).get(r, k) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_projection_edges_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(5, 3, &mut rng);
        let graph = Arc::new(knn_graph(&x, 2).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (vars, _) = bind_edge_conv(&mut tape, &EdgeConvParams::zeros(3, 4, 3), 0);
        let e = edge_features(&mut tape, xv, &graph, &vars).unwrap();
        assert!(tape.value(e).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_vertex_uses_zero_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(1, 3, &mut rng);
        let graph = Arc::new(knn_graph(&x, 4).unwrap());
        let params = EdgeConvParams::random(3, 2, 4, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (vars, _) = bind_edge_conv(&mut tape, &params, 0);
        let out = edge_conv(&mut tape, xv, &graph, &vars).unwrap();
        let mut padded = x.row(0).to_vec();
        padded.extend([0.0, 0.0]);
        let want = Matrix::from_rows(&[padded]).unwrap().matmul(&params.update_w).unwrap();
        assert!(tape.value(out).max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn edge_features_rejects_bad_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(4, 3, &mut rng);
        let graph = Arc::new(knn_graph(&x, 2).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (vars, _) = bind_edge_conv(&mut tape, &EdgeConvParams::zeros(5, 2, 3), 0);
        assert!(edge_features(&mut tape, xv, &graph, &vars).is_err());
    }

    #[test]
    fn ffm_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(6, 4, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (vars, _) = bind_ffm(&mut tape, &FfmParams::zeros(4, 8), 0);
        let y = ffm(&mut tape, xv, &vars).unwrap();
        assert_eq!(tape.value(y), &x);

        let zero = tape.constant(Matrix::zeros(3, 4));
        let (vars, _) = bind_ffm(&mut tape, &FfmParams::random(4, 8, &mut rng), 10);
        let y = ffm(&mut tape, zero, &vars).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffm_rejects_mismatched_widths() {
        let mut tape = Tape::new();
        let xv = tape.constant(Matrix::zeros(2, 4));
        let (vars, _) = bind_ffm(&mut tape, &FfmParams::zeros(3, 8), 0);
        assert!(ffm(&mut tape, xv, &vars).is_err());
    }

    #[test]
    fn residual_block_with_zero_params_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(7, 4, &mut rng);
        let graph = Arc::new(knn_graph(&x, 3).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut layers = Vec::new();
        let mut key = 0;
        let mut norms = Vec::new();
        for _ in 0..3 {
            let (conv, k) = bind_edge_conv(&mut tape, &EdgeConvParams::zeros(4, 4, 4), key);
            let mut norm = NormParams::new(4);
            norm.gamma = Matrix::zeros(1, 4);
            let (nv, k) = bind_norm(&mut tape, &norm, k);
            key = k;
            norms.push(norm);
            layers.push(BlockLayerVars { conv, norm: nv });
        }
        let running: Vec<&RunningStats> = norms.iter().map(|n| &n.running).collect();
        let graphs = vec![graph; 3];
        for mode in [Mode::Train, Mode::Infer] {
            let out = gcn_block(&mut tape, xv, &graphs, &layers, &running, true, mode).unwrap();
            assert_eq!(tape.value(out.output), &x);
            assert_eq!(out.snapshots.len(), 3);
        }
    }
}
