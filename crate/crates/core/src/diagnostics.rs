//! Self-checks run by the `grad-check` command and the over-smoothing
//! experiment.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::evaluation::oversmoothing_curve;
use crate::graph::{knn_graph, Minutia, NeighborGraph};
use crate::layers::{
    bind_edge_conv, bind_ffm, bind_norm, edge_conv, edge_features, ffm, gcn_block, init_weight, BlockLayerParams,
    BlockLayerVars, EdgeConvParams, EdgeConvVars, FfmParams, FfmVars, NormParams,
};
use crate::model::{embed_on_tape, ModelConfig, ParameterSet};
use crate::numeric::{analytic_gradient, numeric_gradient, GradCheckReport, Matrix, Mode, RunningStats, Tape, Var};
use crate::rng::{self, StreamRng};
use crate::training::{mine_triplets, pairwise_distances, MiningMode, Triplet};

/// Step for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-6;
/// Largest acceptable relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

/// Components covered by [`gradient_suite`], in report order.
pub const GRAD_CHECK_COMPONENTS: [&str; 8] = [
    "edge_features",
    "edge_conv",
    "gcn_block",
    "ffm",
    "batchnorm",
    "normalization",
    "triplet_loss",
    "full_model",
];

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: &'static str,
    pub report: GradCheckReport,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < GRAD_CHECK_TOLERANCE
    }
}

fn random(rows: usize, cols: usize, r: &mut StreamRng) -> Matrix {
    init_weight(rows, cols, 1, r)
}

/// Reduces a matrix to a scalar with fixed random weights so every entry
/// gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let col = tape.matmul(x, w)?;
    Ok(tape.sum(col))
}

fn check<F>(params: &[Matrix], f: F, flip: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut analytic = analytic_gradient(params, &f)?;
    if flip {
        for g in analytic.iter_mut() {
            g.values_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }
    let numeric = numeric_gradient(params, &f, GRAD_CHECK_STEP)?;
    Ok(GradCheckReport::compare(&analytic, &numeric))
}

fn conv_vars(v: &[Var]) -> EdgeConvVars {
    EdgeConvVars {
        theta: v[0],
        phi: v[1],
        update_w: v[2],
    }
}

fn random_graph(n: usize, k: usize, r: &mut StreamRng) -> Result<Arc<NeighborGraph>> {
    Ok(Arc::new(knn_graph(&random(n, 2, r), k)?))
}

fn fingerprint(n: usize, r: &mut StreamRng) -> Vec<Minutia> {
    (0..n)
        .map(|_| Minutia {
            x: r.random(),
            y: r.random(),
            d: r.random_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

/// Gradient check of every layer type plus the whole model on small random
/// instances. `fault` names a component whose analytic gradient is negated
/// before comparison.
pub fn gradient_suite(seed: u64, fault: Option<&str>) -> Result<Vec<ComponentReport>> {
    let mut r = rng::stream(seed, 0x6000_0000);
    let (n, c_in, c_mid, c_out) = (7, 3, 4, 5);
    let mut out = Vec::new();
    let mut push = |component: &'static str, report: GradCheckReport| out.push(ComponentReport { component, report });
    let flip = |name: &str| fault == Some(name);

    let graph = random_graph(n, 3, &mut r)?;
    let weights = random(c_mid, 1, &mut r);
    let params = [
        random(n, c_in, &mut r),
        random(c_mid, c_in, &mut r),
        random(c_mid, c_in, &mut r),
    ];
    let g = graph.clone();
    let rep = check(
        &params,
        move |t, v| {
            // edge features never read the update weights
            let vars = EdgeConvVars {
                theta: v[1],
                phi: v[2],
                update_w: v[0],
            };
            let e = edge_features(t, v[0], &g, &vars)?;
            weighted_sum(t, e, &weights)
        },
        flip("edge_features"),
    )?;
    push("edge_features", rep);

    let weights = random(c_out, 1, &mut r);
    let mut params = params.to_vec();
    params.push(random(c_in + c_mid, c_out, &mut r));
    let g = graph.clone();
    let rep = check(
        &params,
        move |t, v| {
            let y = edge_conv(t, v[0], &g, &conv_vars(&v[1..]))?;
            weighted_sum(t, y, &weights)
        },
        flip("edge_conv"),
    )?;
    push("edge_conv", rep);

    let width = 4;
    let layers = 2;
    let graphs = vec![graph.clone(), random_graph(n, 2, &mut r)?];
    let weights = random(width, 1, &mut r);
    let mut params = vec![random(n, width, &mut r)];
    for _ in 0..layers {
        let conv = EdgeConvParams::random(width, width, width, &mut r);
        params.extend([conv.theta, conv.phi, conv.update_w]);
        params.push(random(1, width, &mut r));
        params.push(random(1, width, &mut r));
    }
    let running = RunningStats::new(width);
    let rep = check(
        &params,
        move |t, v| {
            let vars: Vec<BlockLayerVars> = v[1..]
                .chunks(5)
                .map(|c| BlockLayerVars {
                    conv: conv_vars(c),
                    norm: crate::layers::NormVars {
                        gamma: c[3],
                        beta: c[4],
                    },
                })
                .collect();
            let stats = vec![&running; layers];
            let b = gcn_block(t, v[0], &graphs, &vars, &stats, true, Mode::Train)?;
            weighted_sum(t, b.output, &weights)
        },
        flip("gcn_block"),
    )?;
    push("gcn_block", rep);

    let (width, hidden) = (4, 6);
    let weights = random(width, 1, &mut r);
    let params = [
        random(n, width, &mut r),
        random(width, hidden, &mut r),
        random(hidden, width, &mut r),
    ];
    let rep = check(
        &params,
        move |t, v| {
            let y = ffm(t, v[0], &FfmVars { w1: v[1], w2: v[2] })?;
            weighted_sum(t, y, &weights)
        },
        flip("ffm"),
    )?;
    push("ffm", rep);

    let weights = random(width, 1, &mut r);
    let params = [
        random(n, width, &mut r),
        random(1, width, &mut r),
        random(1, width, &mut r),
    ];
    let running = RunningStats::new(width);
    let rep = check(
        &params,
        move |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &running, Mode::Train)?;
            weighted_sum(t, y, &weights)
        },
        flip("batchnorm"),
    )?;
    push("batchnorm", rep);

    let weights = random(width, 1, &mut r);
    let params = [random(n, width, &mut r)];
    let rep = check(
        &params,
        move |t, v| {
            let y = t.l2_normalize_rows(v[0]);
            weighted_sum(t, y, &weights)
        },
        flip("normalization"),
    )?;
    push("normalization", rep);

    let emb = random(6, width, &mut r);
    let triplets = vec![
        Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        },
        Triplet {
            anchor: 3,
            positive: 4,
            negative: 5,
        },
        Triplet {
            anchor: 2,
            positive: 5,
            negative: 0,
        },
    ];
    // a large margin keeps every hinge active, away from the kink
    let rep = check(
        &[emb],
        move |t, v| t.triplet_loss(v[0], &triplets, 10.0),
        flip("triplet_loss"),
    )?;
    push("triplet_loss", rep);

    let config = ModelConfig {
        width: 4,
        embed_dim: 5,
        trm_layers: 2,
        cam_layers: 1,
        k_minutia: 3,
        k_fingerprint: 2,
        ffm_hidden: 6,
        ..ModelConfig::default()
    };
    let base = ParameterSet::init(&config, seed)?;
    let fps: Vec<Vec<Minutia>> = (0..6).map(|_| fingerprint(8, &mut r)).collect();
    let labels = [0, 0, 1, 1, 2, 2];
    let triplets = {
        let views: Vec<&[Minutia]> = fps.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let bound = base.bind(&mut tape);
        let e = embed_on_tape(&mut tape, &bound, &base, &views, Mode::Train, &mut Vec::new())?;
        let d = pairwise_distances(tape.value(e))?;
        mine_triplets(&d, &labels, 0.5, MiningMode::Hardest)?
    };
    let params: Vec<Matrix> = base.named_tensors().into_iter().map(|(_, m)| m.clone()).collect();
    let rep = check(
        &params,
        move |t, v| {
            let mut p = base.clone();
            for (slot, &var) in p.tensors_mut().into_iter().zip(v) {
                *slot = t.value(var).clone();
            }
            // keys repeat those of `v`, so binding returns the same leaves
            let bound = p.bind(t);
            let views: Vec<&[Minutia]> = fps.iter().map(Vec::as_slice).collect();
            let e = embed_on_tape(t, &bound, &p, &views, Mode::Train, &mut Vec::new())?;
            t.triplet_loss(e, &triplets, 10.0)
        },
        flip("full_model"),
    )?;
    push("full_model", rep);
    Ok(out)
}

/// Vertex diversity through a deep GCN block on fixed random inputs.
#[derive(Clone, Debug)]
pub struct OversmoothingRun {
    /// Diversity after each layer.
    pub curve: Vec<f64>,
    /// Diversity of the block output, after the feed-forward module when
    /// enabled.
    pub final_diversity: f64,
}

/// Runs `layers` EdgeConv layers of width `width` over a k-NN graph of `n`
/// random points and measures diversity. Inputs and weights depend only on
/// `seed`, so two configurations with the same seed see identical data.
pub fn oversmoothing_run(seed: u64, layers: usize, residual: bool, with_ffm: bool) -> Result<OversmoothingRun> {
    let (n, width, k, hidden) = (48, 16, 8, 32);
    let mut r = rng::stream(seed, 0x7000_0000);
    let graph = random_graph(n, k, &mut r)?;
    let x0 = random(n, width, &mut r);
    let block: Vec<BlockLayerParams> = (0..layers)
        .map(|_| BlockLayerParams {
            conv: EdgeConvParams::random(width, width, width, &mut r),
            norm: NormParams::new(width),
        })
        .collect();
    let ffm_params = FfmParams::random(width, hidden, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(x0);
    let mut key = 0;
    let vars: Vec<BlockLayerVars> = block
        .iter()
        .map(|l| {
            let (conv, k1) = bind_edge_conv(&mut tape, &l.conv, key);
            let (norm, k2) = bind_norm(&mut tape, &l.norm, k1);
            key = k2;
            BlockLayerVars { conv, norm }
        })
        .collect();
    let (fv, _) = bind_ffm(&mut tape, &ffm_params, key);
    let graphs = vec![graph; layers];
    let running: Vec<&RunningStats> = block.iter().map(|l| &l.norm.running).collect();
    let out = gcn_block(&mut tape, x, &graphs, &vars, &running, residual, Mode::Train)?;
    let snapshots: Vec<Matrix> = out.snapshots.iter().map(|&v| tape.value(v).clone()).collect();
    let curve = oversmoothing_curve(&snapshots)?;
    let last = if with_ffm {
        ffm(&mut tape, out.output, &fv)?
    } else {
        out.output
    };
    let final_diversity = crate::evaluation::diversity(tape.value(last))?;
    Ok(OversmoothingRun { curve, final_diversity })
}
