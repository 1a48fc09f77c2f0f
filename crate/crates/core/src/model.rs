//! Minutia-level and fingerprint-level embedding networks.
//!
//! The minutia-level network turns one fingerprint's minutia graph into a
//! fixed-length vector; the fingerprint-level network refines a batch of
//! those vectors over a k-NN graph of the batch and L2-normalizes them.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{layer_graphs, minutia_positions, DilationPlan, Minutia, NeighborGraph};
use crate::layers::{
    bind_edge_conv, bind_ffm, bind_norm, ffm, gcn_block, init_weight, BlockLayerParams, BlockLayerVars, EdgeConvParams,
    FfmParams, FfmVars, GcnBlockConfig, NormParams, NormVars,
};
use crate::numeric::{canonical_sum, BatchStats, Matrix, Mode, RunningStats, Tape, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Vertex feature width inside the minutia-level block.
    pub width: usize,
    /// Embedding width, also the fingerprint-level block width.
    pub embed_dim: usize,
    pub trm_layers: usize,
    pub cam_layers: usize,
    pub k_minutia: usize,
    pub k_fingerprint: usize,
    pub ffm_hidden: usize,
    pub dilation: bool,
    pub residual: bool,
    pub ffm: bool,
    /// Subtract the minutia centroid from positions before the stem.
    pub centering: bool,
    /// Multiplies (centered) positions before the stem.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            embed_dim: 128,
            trm_layers: 6,
            cam_layers: 3,
            k_minutia: 10,
            k_fingerprint: 10,
            ffm_hidden: 256,
            dilation: true,
            residual: true,
            ffm: true,
            centering: true,
            position_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("embed_dim", self.embed_dim),
            ("trm_layers", self.trm_layers),
            ("cam_layers", self.cam_layers),
            ("k_minutia", self.k_minutia),
            ("k_fingerprint", self.k_fingerprint),
            ("ffm_hidden", self.ffm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("model.{name} must be positive")));
            }
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::Validation(format!(
                "model.position_scale must be positive, got {}",
                self.position_scale
            )));
        }
        Ok(())
    }

    pub fn trm_block(&self) -> GcnBlockConfig {
        GcnBlockConfig {
            layers: self.trm_layers,
            width: self.width,
            residual: self.residual,
        }
    }

    pub fn cam_block(&self) -> GcnBlockConfig {
        GcnBlockConfig {
            layers: self.cam_layers,
            width: self.embed_dim,
            residual: self.residual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Minutia,
    Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub level: Level,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Identifies a normalization layer whose running statistics need updating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSlot {
    TrmBlock(usize),
    TrmHead,
    CamBlock(usize),
    CamHead,
}

/// Statistics gathered during a train-mode forward pass, applied in order
/// once the step is finished.
pub type StatUpdates = Vec<(NormSlot, BatchStats)>;

/// Every learnable array of the model plus running normalization state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub config: ModelConfig,
    /// `3 x C` projection of `(x, y, d)`.
    pub stem: Matrix,
    pub trm_block: Vec<BlockLayerParams>,
    /// `C x D`.
    pub trm_linear: Matrix,
    pub trm_norm: NormParams,
    pub trm_ffm: FfmParams,
    pub cam_block: Vec<BlockLayerParams>,
    /// `D x D`.
    pub cam_linear1: Matrix,
    pub cam_norm: NormParams,
    /// `D x D`.
    pub cam_linear2: Matrix,
    pub cam_ffm: FfmParams,
}

/// Tape handles for a whole [`ParameterSet`].
pub struct BoundParams {
    stem: Var,
    trm_block: Vec<BlockLayerVars>,
    trm_linear: Var,
    trm_norm: NormVars,
    trm_ffm: FfmVars,
    cam_block: Vec<BlockLayerVars>,
    cam_linear1: Var,
    cam_norm: NormVars,
    cam_linear2: Var,
    cam_ffm: FfmVars,
}

impl ParameterSet {
    /// Random initialization from the `seed`'s parameter stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::PARAM_INIT);
        Ok(Self::init_with(config, &mut r))
    }

    pub fn init_with<R: Rng>(config: &ModelConfig, r: &mut R) -> Self {
        let (c, d, h) = (config.width, config.embed_dim, config.ffm_hidden);
        let block = |layers: usize, w: usize, r: &mut R| -> Vec<BlockLayerParams> {
            (0..layers)
                .map(|_| BlockLayerParams {
                    conv: EdgeConvParams::random(w, w, w, r),
                    norm: NormParams::new(w),
                })
                .collect()
        };
        ParameterSet {
            config: config.clone(),
            stem: init_weight(3, c, 3, r),
            trm_block: block(config.trm_layers, c, r),
            trm_linear: init_weight(c, d, c, r),
            trm_norm: NormParams::new(d),
            trm_ffm: FfmParams::random(d, h, r),
            cam_block: block(config.cam_layers, d, r),
            cam_linear1: init_weight(d, d, d, r),
            cam_norm: NormParams::new(d),
            cam_linear2: init_weight(d, d, d, r),
            cam_ffm: FfmParams::random(d, h, r),
        }
    }

    /// Learnable arrays with stable names, in tape-key order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        out.push(("stem".to_string(), &self.stem));
        push_block(&mut out, "trm", &self.trm_block);
        out.push(("trm.linear".to_string(), &self.trm_linear));
        push_norm(&mut out, "trm.norm", &self.trm_norm);
        push_ffm(&mut out, "trm.ffm", &self.trm_ffm);
        push_block(&mut out, "cam", &self.cam_block);
        out.push(("cam.linear1".to_string(), &self.cam_linear1));
        push_norm(&mut out, "cam.norm", &self.cam_norm);
        out.push(("cam.linear2".to_string(), &self.cam_linear2));
        push_ffm(&mut out, "cam.ffm", &self.cam_ffm);
        out
    }

    /// Mutable learnables in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.stem];
        for l in &mut self.trm_block {
            out.extend([
                &mut l.conv.theta,
                &mut l.conv.phi,
                &mut l.conv.update_w,
                &mut l.norm.gamma,
                &mut l.norm.beta,
            ]);
        }
        out.push(&mut self.trm_linear);
        out.extend([&mut self.trm_norm.gamma, &mut self.trm_norm.beta]);
        out.extend([&mut self.trm_ffm.w1, &mut self.trm_ffm.w2]);
        for l in &mut self.cam_block {
            out.extend([
                &mut l.conv.theta,
                &mut l.conv.phi,
                &mut l.conv.update_w,
                &mut l.norm.gamma,
                &mut l.norm.beta,
            ]);
        }
        out.push(&mut self.cam_linear1);
        out.extend([&mut self.cam_norm.gamma, &mut self.cam_norm.beta]);
        out.push(&mut self.cam_linear2);
        out.extend([&mut self.cam_ffm.w1, &mut self.cam_ffm.w2]);
        out
    }

    /// Running statistics with stable names.
    pub fn named_stats(&self) -> Vec<(String, &RunningStats)> {
        let mut out = Vec::new();
        for (i, l) in self.trm_block.iter().enumerate() {
            out.push((format!("trm.block.{i}.norm"), &l.norm.running));
        }
        out.push(("trm.norm".to_string(), &self.trm_norm.running));
        for (i, l) in self.cam_block.iter().enumerate() {
            out.push((format!("cam.block.{i}.norm"), &l.norm.running));
        }
        out.push(("cam.norm".to_string(), &self.cam_norm.running));
        out
    }

    /// Mutable running statistics in [`Self::named_stats`] order.
    pub fn stats_mut(&mut self) -> Vec<&mut RunningStats> {
        let mut out: Vec<&mut RunningStats> = self.trm_block.iter_mut().map(|l| &mut l.norm.running).collect();
        out.push(&mut self.trm_norm.running);
        out.extend(self.cam_block.iter_mut().map(|l| &mut l.norm.running));
        out.push(&mut self.cam_norm.running);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Registers every learnable on `tape`; keys follow
    /// [`Self::named_tensors`] order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut key = 0;
        let stem = tape.param(key, &self.stem);
        key += 1;
        let trm_block = bind_block(tape, &self.trm_block, &mut key);
        let trm_linear = tape.param(key, &self.trm_linear);
        key += 1;
        let (trm_norm, k) = bind_norm(tape, &self.trm_norm, key);
        let (trm_ffm, k) = bind_ffm(tape, &self.trm_ffm, k);
        key = k;
        let cam_block = bind_block(tape, &self.cam_block, &mut key);
        let cam_linear1 = tape.param(key, &self.cam_linear1);
        let (cam_norm, k) = bind_norm(tape, &self.cam_norm, key + 1);
        let cam_linear2 = tape.param(k, &self.cam_linear2);
        let (cam_ffm, _) = bind_ffm(tape, &self.cam_ffm, k + 1);
        BoundParams {
            stem,
            trm_block,
            trm_linear,
            trm_norm,
            trm_ffm,
            cam_block,
            cam_linear1,
            cam_norm,
            cam_linear2,
            cam_ffm,
        }
    }

    fn running(&self, slot: NormSlot) -> &RunningStats {
        match slot {
            NormSlot::TrmBlock(l) => &self.trm_block[l].norm.running,
            NormSlot::TrmHead => &self.trm_norm.running,
            NormSlot::CamBlock(l) => &self.cam_block[l].norm.running,
            NormSlot::CamHead => &self.cam_norm.running,
        }
    }

    fn running_mut(&mut self, slot: NormSlot) -> &mut RunningStats {
        match slot {
            NormSlot::TrmBlock(l) => &mut self.trm_block[l].norm.running,
            NormSlot::TrmHead => &mut self.trm_norm.running,
            NormSlot::CamBlock(l) => &mut self.cam_block[l].norm.running,
            NormSlot::CamHead => &mut self.cam_norm.running,
        }
    }

    /// Folds train-mode statistics into the running estimates, in order.
    pub fn apply_stats(&mut self, updates: &StatUpdates) {
        for (slot, stats) in updates {
            self.running_mut(*slot).update(stats);
        }
    }

    /// Checks array shapes against `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = ParameterSet::init_with(&self.config, &mut rng::stream(0, 0));
        let mine = self.named_tensors();
        let want = reference.named_tensors();
        if mine.len() != want.len() {
            return Err(Error::Validation(format!(
                "{} parameter arrays, config implies {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, m), (_, w)) in mine.iter().zip(&want) {
            if m.shape() != w.shape() {
                return Err(Error::Validation(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    m.shape(),
                    w.shape()
                )));
            }
        }
        for ((name, s), (_, w)) in self.named_stats().iter().zip(reference.named_stats()) {
            if s.channels() != w.channels() || s.var.len() != w.channels() {
                return Err(Error::Validation(format!("{name} has wrong channel count")));
            }
        }
        Ok(())
    }
}

fn push_block<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, block: &'a [BlockLayerParams]) {
    for (i, l) in block.iter().enumerate() {
        out.push((format!("{prefix}.block.{i}.theta"), &l.conv.theta));
        out.push((format!("{prefix}.block.{i}.phi"), &l.conv.phi));
        out.push((format!("{prefix}.block.{i}.update_w"), &l.conv.update_w));
        push_norm(out, &format!("{prefix}.block.{i}.norm"), &l.norm);
    }
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, n: &'a NormParams) {
    out.push((format!("{prefix}.gamma"), &n.gamma));
    out.push((format!("{prefix}.beta"), &n.beta));
}

fn push_ffm<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, f: &'a FfmParams) {
    out.push((format!("{prefix}.w1"), &f.w1));
    out.push((format!("{prefix}.w2"), &f.w2));
}

fn bind_block(tape: &mut Tape, block: &[BlockLayerParams], key: &mut usize) -> Vec<BlockLayerVars> {
    block
        .iter()
        .map(|l| {
            let (conv, k) = bind_edge_conv(tape, &l.conv, *key);
            let (norm, k) = bind_norm(tape, &l.norm, k);
            *key = k;
            BlockLayerVars { conv, norm }
        })
        .collect()
}

/// `N x 3` input features `(s·(x - cx), s·(y - cy), d)`; the centroid is
/// zero when `centering` is off.
pub fn minutia_features(minutiae: &[Minutia], centering: bool, scale: f64) -> Matrix {
    let (cx, cy) = if centering && !minutiae.is_empty() {
        let n = minutiae.len() as f64;
        let mut xs: Vec<f64> = minutiae.iter().map(|m| m.x).collect();
        let mut ys: Vec<f64> = minutiae.iter().map(|m| m.y).collect();
        (canonical_sum(&mut xs) / n, canonical_sum(&mut ys) / n)
    } else {
        (0.0, 0.0)
    };
    let mut m = Matrix::zeros(minutiae.len(), 3);
    for (i, p) in minutiae.iter().enumerate() {
        m.row_mut(i)
            .copy_from_slice(&[scale * (p.x - cx), scale * (p.y - cy), p.d]);
    }
    m
}

/// Per-layer minutia graphs for one fingerprint, from spatial positions.
pub fn minutia_graphs(minutiae: &[Minutia], config: &ModelConfig) -> Result<Vec<Arc<NeighborGraph>>> {
    let plan = DilationPlan::new(config.dilation, config.trm_layers);
    Ok(layer_graphs(&minutia_positions(minutiae), config.k_minutia, &plan)?
        .into_iter()
        .map(Arc::new)
        .collect())
}

/// Records the minutia-level network for one fingerprint; returns `1 x D`.
pub fn trm_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParameterSet,
    minutiae: &[Minutia],
    mode: Mode,
    stats: &mut StatUpdates,
) -> Result<Var> {
    trm_on_tape_with_graphs(tape, bound, params, minutiae, None, mode, stats)
}

/// As [`trm_on_tape`], optionally reusing graphs built by the caller.
pub fn trm_on_tape_with_graphs(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParameterSet,
    minutiae: &[Minutia],
    graphs: Option<Vec<Arc<NeighborGraph>>>,
    mode: Mode,
    stats: &mut StatUpdates,
) -> Result<Var> {
    if minutiae.len() < 2 {
        return Err(Error::DataQuality(format!(
            "a minutia graph needs at least 2 minutiae, got {}",
            minutiae.len()
        )));
    }
    let cfg = &params.config;
    let graphs = match graphs {
        Some(g) => g,
        None => minutia_graphs(minutiae, cfg)?,
    };
    let x = tape.constant(minutia_features(minutiae, cfg.centering, cfg.position_scale));
    let h = tape.matmul(x, bound.stem)?;
    let running: Vec<&RunningStats> = (0..cfg.trm_layers)
        .map(|l| params.running(NormSlot::TrmBlock(l)))
        .collect();
    let block = gcn_block(tape, h, &graphs, &bound.trm_block, &running, cfg.residual, mode)?;
    collect(stats, block.stats, NormSlot::TrmBlock);
    let z = tape.matmul(block.output, bound.trm_linear)?;
    let z = tape.gelu(z);
    let (z, st) = tape.batchnorm(
        z,
        bound.trm_norm.gamma,
        bound.trm_norm.beta,
        params.running(NormSlot::TrmHead),
        mode,
    )?;
    if let Some(s) = st {
        stats.push((NormSlot::TrmHead, s));
    }
    let z = if cfg.ffm { ffm(tape, z, &bound.trm_ffm)? } else { z };
    tape.max_pool_rows(z)
}

/// Records the fingerprint-level network over a `B x D` batch; returns the
/// unit-norm `B x D` embeddings.
pub fn cam_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParameterSet,
    batch: Var,
    mode: Mode,
    stats: &mut StatUpdates,
) -> Result<Var> {
    let cfg = &params.config;
    let m = tape.value(batch);
    if m.rows() < 2 {
        return Err(Error::InvalidInput(format!(
            "fingerprint-level batch needs at least 2 entries, got {}",
            m.rows()
        )));
    }
    if m.cols() != cfg.embed_dim {
        return Err(Error::shape(
            "cam",
            format!("{} columns, embedding width {}", m.cols(), cfg.embed_dim),
        ));
    }
    let plan = DilationPlan::new(cfg.dilation, cfg.cam_layers);
    let graphs: Vec<Arc<NeighborGraph>> = layer_graphs(m, cfg.k_fingerprint, &plan)?
        .into_iter()
        .map(Arc::new)
        .collect();
    let running: Vec<&RunningStats> = (0..cfg.cam_layers)
        .map(|l| params.running(NormSlot::CamBlock(l)))
        .collect();
    let block = gcn_block(tape, batch, &graphs, &bound.cam_block, &running, cfg.residual, mode)?;
    collect(stats, block.stats, NormSlot::CamBlock);
    cam_head(tape, bound, params, block.output, mode, stats)
}

/// Linear, GeLU, normalization, linear, feed-forward module and row
/// normalization after the fingerprint-level block.
fn cam_head(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParameterSet,
    x: Var,
    mode: Mode,
    stats: &mut StatUpdates,
) -> Result<Var> {
    let cfg = &params.config;
    let z = tape.matmul(x, bound.cam_linear1)?;
    let z = tape.gelu(z);
    let (z, st) = tape.batchnorm(
        z,
        bound.cam_norm.gamma,
        bound.cam_norm.beta,
        params.running(NormSlot::CamHead),
        mode,
    )?;
    if let Some(s) = st {
        stats.push((NormSlot::CamHead, s));
    }
    let z = tape.matmul(z, bound.cam_linear2)?;
    let z = if cfg.ffm { ffm(tape, z, &bound.cam_ffm)? } else { z };
    Ok(tape.l2_normalize_rows(z))
}

/// Records the full pipeline for a batch of fingerprints; returns `B x D`.
pub fn embed_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParameterSet,
    fingerprints: &[&[Minutia]],
    mode: Mode,
    stats: &mut StatUpdates,
) -> Result<Var> {
    let rows = fingerprints
        .iter()
        .map(|f| trm_on_tape(tape, bound, params, f, mode, stats))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&rows)?;
    cam_on_tape(tape, bound, params, stacked, mode, stats)
}

fn collect(stats: &mut StatUpdates, block: Vec<Option<BatchStats>>, slot: fn(usize) -> NormSlot) {
    for (l, s) in block.into_iter().enumerate() {
        if let Some(s) = s {
            stats.push((slot(l), s));
        }
    }
}

fn rows_to_embeddings(m: &Matrix, level: Level) -> Vec<Embedding> {
    m.row_iter()
        .map(|r| Embedding {
            values: r.to_vec(),
            level,
        })
        .collect()
}

/// Minutia-level embedding of one fingerprint.
pub fn trm_forward(minutiae: &[Minutia], params: &ParameterSet, mode: Mode) -> Result<Embedding> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = trm_on_tape(&mut tape, &bound, params, minutiae, mode, &mut Vec::new())?;
    Ok(Embedding {
        values: tape.value(v).row(0).to_vec(),
        level: Level::Minutia,
    })
}

/// Fingerprint-level embeddings for a batch of minutia-level embeddings, in
/// input order.
pub fn cam_forward(batch: &[Embedding], params: &ParameterSet, mode: Mode) -> Result<Vec<Embedding>> {
    let rows: Vec<&[f64]> = batch.iter().map(|e| e.values.as_slice()).collect();
    let m = Matrix::from_rows(&rows)?;
    cam_matrix(&m, params, mode).map(|out| rows_to_embeddings(&out, Level::Fingerprint))
}

fn cam_matrix(m: &Matrix, params: &ParameterSet, mode: Mode) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.constant(m.clone());
    let out = cam_on_tape(&mut tape, &bound, params, input, mode, &mut Vec::new())?;
    Ok(tape.value(out).clone())
}

/// Minutia-level embeddings as a `B x D` matrix, one tape per fingerprint.
pub fn minutia_embeddings<M: AsRef<[Minutia]>>(
    fingerprints: &[M],
    params: &ParameterSet,
    mode: Mode,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(fingerprints.len(), params.config.embed_dim);
    for (i, f) in fingerprints.iter().enumerate() {
        let e = trm_forward(f.as_ref(), params, mode)?;
        out.row_mut(i).copy_from_slice(&e.values);
    }
    Ok(out)
}

/// Full pipeline for a batch of at least two fingerprints.
pub fn embed_batch<M: AsRef<[Minutia]>>(
    fingerprints: &[M],
    params: &ParameterSet,
    mode: Mode,
) -> Result<Vec<Embedding>> {
    if fingerprints.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "embedding batch needs at least 2 fingerprints, got {}",
            fingerprints.len()
        )));
    }
    let m = minutia_embeddings(fingerprints, params, mode)?;
    cam_matrix(&m, params, mode).map(|out| rows_to_embeddings(&out, Level::Fingerprint))
}

/// Fingerprint-level embedding of a single query, using stored minutia-level
/// gallery embeddings as its batch context.
///
/// The query joins the gallery as one extra vertex of the fingerprint graph;
/// inference-mode normalization makes every row depend only on the graph,
/// so the result equals in-batch embedding with the same neighbors.
pub fn embed_with_gallery(query: &[Minutia], gallery_m: &Matrix, params: &ParameterSet) -> Result<Embedding> {
    let m = trm_forward(query, params, Mode::Infer)?;
    embed_minutia_level_with_gallery(&m, gallery_m, params)
}

/// As [`embed_with_gallery`] for an already computed minutia-level query.
pub fn embed_minutia_level_with_gallery(
    query_m: &Embedding,
    gallery_m: &Matrix,
    params: &ParameterSet,
) -> Result<Embedding> {
    let k = params.config.k_fingerprint;
    if gallery_m.rows() < k {
        return Err(Error::InvalidInput(format!(
            "gallery holds {} embeddings, needs at least {k}",
            gallery_m.rows()
        )));
    }
    if gallery_m.cols() != query_m.values.len() {
        return Err(Error::shape(
            "embed_with_gallery",
            format!(
                "gallery width {} vs query width {}",
                gallery_m.cols(),
                query_m.values.len()
            ),
        ));
    }
    let mut joint = Matrix::zeros(gallery_m.rows() + 1, gallery_m.cols());
    joint.values_mut()[..gallery_m.len()].copy_from_slice(gallery_m.values());
    joint.row_mut(gallery_m.rows()).copy_from_slice(&query_m.values);
    let values = query_row_in_joint_graph(&joint, params)?;
    Ok(Embedding {
        values,
        level: Level::Fingerprint,
    })
}

/// Inference-mode CAM output for the last row of `joint`, evaluated only on
/// the rows inside that row's receptive field. Every other operation is
/// row-wise, so this equals the last row of a full pass over `joint`.
fn query_row_in_joint_graph(joint: &Matrix, params: &ParameterSet) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let plan = DilationPlan::new(cfg.dilation, cfg.cam_layers);
    let graphs = layer_graphs(joint, cfg.k_fingerprint, &plan)?;
    // needed[l]: rows whose layer-l input is required, ascending
    let layers = graphs.len();
    let mut needed = vec![vec![joint.rows() - 1]; layers + 1];
    for l in (0..layers).rev() {
        let mut rows: Vec<usize> = needed[l + 1]
            .iter()
            .flat_map(|&v| std::iter::once(v).chain(graphs[l].neighbors(v).iter().copied()))
            .collect();
        rows.sort_unstable();
        rows.dedup();
        needed[l] = rows;
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut h = Matrix::zeros(needed[0].len(), joint.cols());
    for (i, &v) in needed[0].iter().enumerate() {
        h.row_mut(i).copy_from_slice(joint.row(v));
    }
    for l in 0..layers {
        let local = |v: usize| needed[l].binary_search(&v).expect("receptive field is closed");
        let lists: Vec<Vec<usize>> = needed[l]
            .iter()
            .map(|&v| {
                if needed[l + 1].binary_search(&v).is_ok() {
                    graphs[l].neighbors(v).iter().map(|&u| local(u)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let graph = Arc::new(NeighborGraph::from_lists(cfg.k_fingerprint, &lists)?);
        let x = tape.constant(h);
        let running = [params.running(NormSlot::CamBlock(l))];
        let out = gcn_block(
            &mut tape,
            x,
            &[graph],
            &bound.cam_block[l..=l],
            &running,
            cfg.residual,
            Mode::Infer,
        )?;
        let full = tape.value(out.output);
        h = Matrix::zeros(needed[l + 1].len(), joint.cols());
        for (i, &v) in needed[l + 1].iter().enumerate() {
            h.row_mut(i).copy_from_slice(full.row(local(v)));
        }
    }
    let x = tape.constant(h);
    let out = cam_head(&mut tape, &bound, params, x, Mode::Infer, &mut Vec::new())?;
    Ok(tape.value(out).row(0).to_vec())
}
