//! Similarity scores, verification metrics, closed-set ranking and the
//! vertex-diversity diagnostic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{group_by_identity, Record};
use crate::error::{Error, Result};
use crate::graph::Minutia;
use crate::model::{
    cam_forward, embed_minutia_level_with_gallery, minutia_embeddings, trm_forward, Embedding, Level, ParameterSet,
};
use crate::numeric::Matrix;
use crate::numeric::Mode;
use crate::training::distance;

/// Allowed deviation of an embedding norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

fn check_unit(e: &Embedding) -> Result<()> {
    let n = e.norm();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::InvalidInput(format!("embedding norm {n} is not 1")));
    }
    Ok(())
}

/// Inner product of two unit-norm fingerprint-level embeddings.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.level != Level::Fingerprint || b.level != Level::Fingerprint {
        return Err(Error::InvalidInput(
            "similarity compares fingerprint-level embeddings".into(),
        ));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::shape(
            "similarity",
            format!("{} vs {}", a.values.len(), b.values.len()),
        ));
    }
    check_unit(a)?;
    check_unit(b)?;
    Ok(dot(&a.values, &b.values))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::InvalidInput(format!(
                "metrics need genuine and impostor scores, got {} and {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| s.is_nan()) {
            return Err(Error::InvalidInput("score set contains NaN".into()));
        }
        Ok(())
    }

    /// Candidate thresholds: every distinct score plus one value above all of
    /// them, ascending.
    fn thresholds(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let top = *all.last().expect("nonempty");
        all.push(top.next_up());
        all
    }
}

/// Count of values `>= t` in an ascending slice.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

/// TAR at the smallest candidate threshold whose FAR (impostors `>= t`)
/// does not exceed `far_target`.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<TarAtFar> {
    scores.check()?;
    if !(0.0..=1.0).contains(&far_target) {
        return Err(Error::InvalidInput(format!("FAR target {far_target} outside [0, 1]")));
    }
    let n_imp = scores.impostor.len();
    if (n_imp as f64) * far_target < 1.0 {
        log::warn!("{n_imp} impostor scores cannot resolve FAR {far_target}");
    }
    let gen = sorted(&scores.genuine);
    let imp = sorted(&scores.impostor);
    let threshold = scores
        .thresholds()
        .into_iter()
        .find(|&t| count_at_least(&imp, t) as f64 / n_imp as f64 <= far_target)
        .expect("the top candidate accepts no impostor");
    Ok(TarAtFar {
        far: far_target,
        tar: count_at_least(&gen, threshold) as f64 / gen.len() as f64,
        threshold,
    })
}

/// Equal error rate. FAR and FRR are evaluated at every candidate
/// threshold; where `FAR - FRR` changes sign between neighbours both rates
/// are interpolated linearly to their crossing.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let gen = sorted(&scores.genuine);
    let imp = sorted(&scores.impostor);
    let rates: Vec<(f64, f64)> = scores
        .thresholds()
        .into_iter()
        .map(|t| {
            let far = count_at_least(&imp, t) as f64 / imp.len() as f64;
            let frr = (gen.len() - count_at_least(&gen, t)) as f64 / gen.len() as f64;
            (far, frr)
        })
        .collect();
    if let Some(&(far, frr)) = rates.iter().find(|(a, r)| a == r) {
        return Ok((far + frr) / 2.0);
    }
    for w in rates.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 > 0.0 && d1 < 0.0 {
            let alpha = d0 / (d0 - d1);
            let far = w[0].0 + alpha * (w[1].0 - w[0].0);
            let frr = w[0].1 + alpha * (w[1].1 - w[0].1);
            return Ok((far + frr) / 2.0);
        }
    }
    unreachable!("FAR - FRR runs from +1 to -1 across the candidates")
}

/// Ranked gallery indices and hit rates for a closed-set search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexingResult {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Gallery indices per probe, best first, cut at the largest k.
    pub rankings: Vec<Vec<usize>>,
    /// 1-based rank of the first same-identity gallery entry per probe.
    pub mate_ranks: Vec<usize>,
}

/// Ranks `gallery` by descending similarity for every probe (ties by
/// ascending gallery index) and reports the fraction of probes whose
/// identity appears within the first k entries.
pub fn topk_accuracy(
    probes: &[(Embedding, u64)],
    gallery: &[(Embedding, u64)],
    ks: &[usize],
) -> Result<IndexingResult> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::InvalidInput("top-k needs probes and a gallery".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gallery.len()) {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={}", gallery.len())));
    }
    let ids: BTreeSet<u64> = gallery.iter().map(|(_, l)| *l).collect();
    if let Some((_, l)) = probes.iter().find(|(_, l)| !ids.contains(l)) {
        return Err(Error::OpenSet(format!("probe identity {l} has no mate in the gallery")));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut rankings = Vec::with_capacity(probes.len());
    let mut mate_ranks = Vec::with_capacity(probes.len());
    for (probe, label) in probes {
        let mut scored: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(i, (g, _))| similarity(probe, g).map(|s| (s, i)))
            .collect::<Result<_>>()?;
        // unit norms were checked, so no score is NaN
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let rank = scored
            .iter()
            .position(|&(_, i)| gallery[i].1 == *label)
            .expect("closed set")
            + 1;
        mate_ranks.push(rank);
        rankings.push(scored.iter().take(max_k).map(|&(_, i)| i).collect());
    }
    let accuracy = ks
        .iter()
        .map(|&k| mate_ranks.iter().filter(|&&r| r <= k).count() as f64 / probes.len() as f64)
        .collect();
    Ok(IndexingResult {
        ks: ks.to_vec(),
        accuracy,
        rankings,
        mate_ranks,
    })
}

/// Mean pairwise Euclidean distance among the rows of `x`.
pub fn diversity(x: &Matrix) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "diversity needs at least 2 vertices, got {n}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += distance(x.row(i), x.row(j));
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Diversity of each per-layer snapshot.
pub fn oversmoothing_curve(snapshots: &[Matrix]) -> Result<Vec<f64>> {
    snapshots.iter().map(diversity).collect()
}

/// Contents of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tar_at_far: TarAtFar,
    pub eer: f64,
    /// Accuracy keyed by k.
    pub topk: BTreeMap<usize, f64>,
    pub score_counts: ScoreCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCounts {
    pub genuine: usize,
    pub impostor: usize,
}

/// Scores every probe against every gallery entry.
pub fn score_pairs(probes: &[(Embedding, u64)], gallery: &[(Embedding, u64)]) -> Result<ScoreSet> {
    let mut scores = ScoreSet::default();
    for (p, pl) in probes {
        for (g, gl) in gallery {
            let s = similarity(p, g)?;
            if pl == gl {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    Ok(scores)
}

/// Verification and (when `ks` is nonempty) indexing metrics for probes
/// searched against a gallery.
pub fn metrics_report(
    probes: &[(Embedding, u64)],
    gallery: &[(Embedding, u64)],
    far: f64,
    ks: &[usize],
) -> Result<MetricsReport> {
    let scores = score_pairs(probes, gallery)?;
    let tar = tar_at_far(&scores, far)?;
    let eer = eer(&scores)?;
    let topk = if ks.is_empty() {
        BTreeMap::new()
    } else {
        let idx = topk_accuracy(probes, gallery, ks)?;
        idx.ks.into_iter().zip(idx.accuracy).collect()
    };
    Ok(MetricsReport {
        tar_at_far: tar,
        eer,
        topk,
        score_counts: ScoreCounts {
            genuine: scores.genuine.len(),
            impostor: scores.impostor.len(),
        },
    })
}

/// Per identity, the first `gallery` impressions (by impression id) enroll
/// and the next `probes` are searched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GallerySplit {
    pub gallery: usize,
    pub probes: usize,
}

impl std::str::FromStr for GallerySplit {
    type Err = Error;

    /// Parses `"G/P"`, e.g. `"3/1"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("gallery split {s:?} is not of the form G/P"));
        let (g, p) = s.split_once('/').ok_or_else(bad)?;
        let gallery: usize = g.trim().parse().map_err(|_| bad())?;
        let probes: usize = p.trim().parse().map_err(|_| bad())?;
        if gallery == 0 || probes == 0 {
            return Err(Error::Validation(format!("gallery split {s:?} needs positive counts")));
        }
        Ok(GallerySplit { gallery, probes })
    }
}

/// Labeled fingerprint-level embeddings of a gallery and its probes.
pub struct EmbeddedSplit {
    pub gallery: Vec<(Embedding, u64)>,
    pub probes: Vec<(Embedding, u64)>,
}

/// Embeds the gallery as one inference batch and every probe against the
/// stored minutia-level gallery embeddings.
pub fn embed_split(records: &[Record], params: &ParameterSet, split: GallerySplit) -> Result<EmbeddedSplit> {
    let mut gallery_recs: Vec<&Record> = Vec::new();
    let mut probe_recs: Vec<&Record> = Vec::new();
    for idx in group_by_identity(records).values() {
        for (rank, &i) in idx.iter().enumerate() {
            if rank < split.gallery {
                gallery_recs.push(&records[i]);
            } else if rank < split.gallery + split.probes {
                probe_recs.push(&records[i]);
            }
        }
    }
    if gallery_recs.len() < 2 || probe_recs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "split {}/{} leaves {} gallery and {} probe fingerprints",
            split.gallery,
            split.probes,
            gallery_recs.len(),
            probe_recs.len()
        )));
    }
    let gallery_fps: Vec<&[Minutia]> = gallery_recs.iter().map(|r| r.minutiae.as_slice()).collect();
    let gallery_m = minutia_embeddings(&gallery_fps, params, Mode::Infer)?;
    let gallery_emb = cam_forward(
        &gallery_m
            .row_iter()
            .map(|r| Embedding {
                values: r.to_vec(),
                level: Level::Minutia,
            })
            .collect::<Vec<_>>(),
        params,
        Mode::Infer,
    )?;
    let gallery = gallery_emb
        .into_iter()
        .zip(&gallery_recs)
        .map(|(e, r)| (e, r.identity_id))
        .collect();
    let probes = probe_recs
        .iter()
        .map(|r| {
            let m = trm_forward(&r.minutiae, params, Mode::Infer)?;
            let e = embed_minutia_level_with_gallery(&m, &gallery_m, params)?;
            Ok((e, r.identity_id))
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddedSplit { gallery, probes })
}

/// Embeds a split and computes its metrics document.
pub fn evaluate_records(
    records: &[Record],
    params: &ParameterSet,
    split: GallerySplit,
    far: f64,
    ks: &[usize],
) -> Result<MetricsReport> {
    let e = embed_split(records, params, split)?;
    metrics_report(&e.probes, &e.gallery, far, ks)
}
