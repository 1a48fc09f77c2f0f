//! Seeded randomized checks. Each function builds one instance from its
//! seed and panics with a description on any mismatch, so the same checks
//! back both the unit-style tests and the acceptance run.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use minugraph::data::{gen_dataset, DatasetSpec};
use minugraph::evaluation::{eer, similarity, tar_at_far, topk_accuracy};
use minugraph::graph::{dilated_neighbors, knn_graph, layer_graphs, DilationPlan, Minutia};
use minugraph::model::{embed_batch, minutia_graphs, trm_forward, Embedding, Level, ModelConfig, ParameterSet};
use minugraph::numeric::{Mode, Tape};
use minugraph::rng::{self, StreamRng};
use minugraph::training::{distance, mine_triplets, pairwise_distances, triplet_loss, MiningMode, Triplet};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub fn knn(seed: u64) {
    let mut r = rng::stream(seed, 1);
    let n = r.random_range(2..=100);
    let dim = r.random_range(1..=4);
    let pts = matrix(&mut r, n, dim, seed.is_multiple_of(2));
    let k = r.random_range(1..=n + 2);
    let g = knn_graph(&pts, k).unwrap();
    assert_eq!(g.to_lists(), neighbors(&pts, k, 1), "knn seed {seed}");
}

pub fn dilated(seed: u64) {
    let mut r = rng::stream(seed, 2);
    let n = r.random_range(2..=100);
    let pts = matrix(&mut r, n, 2, seed.is_multiple_of(3));
    let k = r.random_range(1..=12);
    let rate = r.random_range(1..=4);
    let g = dilated_neighbors(&pts, k, rate).unwrap();
    assert_eq!(g.to_lists(), neighbors(&pts, k, rate), "dilated seed {seed}");

    let layers = r.random_range(1..=12);
    let graphs = layer_graphs(&pts, k, &DilationPlan::standard(layers)).unwrap();
    for (l, g) in graphs.iter().enumerate() {
        let rate = (l + 1).div_ceil(4);
        assert_eq!(
            g.to_lists(),
            neighbors(&pts, k, rate),
            "layer plan seed {seed} layer {l}"
        );
    }
}

pub fn pairwise_distance(seed: u64) {
    let mut r = rng::stream(seed, 4);
    let n = r.random_range(2..=100);
    let dim = r.random_range(1..=16);
    let x = matrix(&mut r, n, dim, false);
    let d = pairwise_distances(&x).unwrap();
    let o = pairwise(&x);
    for i in 0..n {
        for j in 0..n {
            assert_eq!(d.get(i, j), o[i][j], "pairwise seed {seed} ({i}, {j})");
        }
    }
}

pub fn mining(seed: u64) {
    let mut r = rng::stream(seed, 5);
    let n = r.random_range(2..=32);
    let x = matrix(&mut r, n, 2, seed.is_multiple_of(2));
    let ids = r.random_range(1..=n.div_ceil(2)) as u64;
    let labels: Vec<u64> = (0..n).map(|_| r.random_range(0..ids) * 7).collect();
    let d = pairwise_distances(&x).unwrap();
    let distinct: BTreeSet<_> = labels.iter().collect();
    for mode in [MiningMode::Hardest, MiningMode::SemiHard, MiningMode::SemiHardAllPairs] {
        let margin = r.random_range(0.0..2.0);
        let got = mine_triplets(&d, &labels, margin, mode).unwrap();
        let want = if distinct.len() < 2 {
            Vec::new()
        } else {
            mine(&d, &labels, margin, mode)
        };
        assert_eq!(got, want, "mining seed {seed} {mode:?}");
    }
}

pub fn tar(seed: u64) {
    let mut r = rng::stream(seed, 6);
    let s = scores(&mut r);
    for far in [0.0, 0.01, 0.1, 0.25, r.random_range(0.0..1.0), 1.0] {
        let got = tar_at_far(&s, far).unwrap();
        let (want, threshold) = super::tar_at_far(&s, far);
        assert_eq!(got.tar, want, "tar seed {seed} far {far}");
        if threshold.is_finite() {
            assert_eq!(got.threshold, threshold, "tar threshold seed {seed} far {far}");
        } else {
            let top = s.genuine.iter().chain(&s.impostor).copied().fold(f64::MIN, f64::max);
            assert!(got.threshold > top, "tar threshold seed {seed} far {far}");
        }
    }
}

pub fn equal_error_rate(seed: u64) {
    let s = scores(&mut rng::stream(seed, 7));
    let got = eer(&s).unwrap();
    let want = super::eer(&s);
    assert!((got - want).abs() <= 1e-12, "eer seed {seed}: {got} vs {want}");
}

pub fn topk(seed: u64) {
    let mut r = rng::stream(seed, 8);
    let dim = r.random_range(2..=8);
    let g = r.random_range(2..=100);
    let ids = r.random_range(1..=g) as u64;
    let mut gallery: Vec<_> = (0..g as u64)
        .map(|i| {
            let label = if i < ids { i } else { r.random_range(0..ids) };
            (unit(&mut r, dim), label)
        })
        .collect();
    // exact duplicates force score ties
    if g > 3 {
        gallery[g - 1].0 = gallery[0].0.clone();
    }
    let probes: Vec<_> = (0..r.random_range(1..=20))
        .map(|_| (unit(&mut r, dim), r.random_range(0..ids)))
        .collect();
    let ks: Vec<usize> = vec![1, g.min(5), g];
    let got = topk_accuracy(&probes, &gallery, &ks).unwrap();
    let want = rank(&probes, &gallery);
    for (p, (order, mate)) in want.iter().enumerate() {
        assert_eq!(got.rankings[p], order[..g], "topk seed {seed} probe {p}");
        assert_eq!(got.mate_ranks[p], *mate, "topk seed {seed} probe {p}");
    }
    for (i, &k) in ks.iter().enumerate() {
        let hits = want.iter().filter(|(_, m)| *m <= k).count();
        assert_eq!(
            got.accuracy[i],
            hits as f64 / probes.len() as f64,
            "topk seed {seed} k {k}"
        );
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        width: 16,
        embed_dim: 24,
        trm_layers: 5,
        cam_layers: 2,
        k_minutia: 6,
        k_fingerprint: 3,
        ffm_hidden: 32,
        ..ModelConfig::default()
    }
}

pub fn fingerprints(seed: u64, count: usize) -> Vec<Vec<Minutia>> {
    let spec = DatasetSpec {
        identities: count.div_ceil(2).max(2),
        impressions: 2,
        seed,
        ..DatasetSpec::default()
    };
    gen_dataset(&spec)
        .unwrap()
        .into_iter()
        .take(count)
        .map(|r| r.minutiae)
        .collect()
}

pub fn bits(e: &Embedding) -> Vec<u64> {
    e.values.iter().map(|v| v.to_bits()).collect()
}

/// Shuffling the minutiae of every fingerprint leaves m_F and M_F unchanged
/// to the bit, in both normalization modes.
pub fn minutia_permutation(seed: u64, mode: Mode) {
    let params = ParameterSet::init(&small_model(), seed).unwrap();
    let mut batch = fingerprints(seed, 5);
    let m_before = trm_forward(&batch[0], &params, mode).unwrap();
    let before = embed_batch(&batch, &params, mode).unwrap();
    let mut r = rng::stream(seed, 1);
    for f in batch.iter_mut() {
        f.shuffle(&mut r);
    }
    let m_after = trm_forward(&batch[0], &params, mode).unwrap();
    let after = embed_batch(&batch, &params, mode).unwrap();
    assert_eq!(bits(&m_before), bits(&m_after), "m_F seed {seed}");
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(bits(b), bits(a), "M_F seed {seed}");
    }
}

/// Rotating and translating the minutiae keeps every per-layer graph.
pub fn rigid_motion(seed: u64) {
    let mut r = rng::stream(seed, 12);
    let angle = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (tx, ty) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
    let cfg = ModelConfig {
        trm_layers: 9,
        ..ModelConfig::default()
    };
    let f = &fingerprints(seed, 1)[0];
    let (s, c) = angle.sin_cos();
    let moved: Vec<Minutia> = f
        .iter()
        .map(|m| Minutia::new(c * m.x - s * m.y + tx, s * m.x + c * m.y + ty, m.d + angle).unwrap())
        .collect();
    let a = minutia_graphs(f, &cfg).unwrap();
    let b = minutia_graphs(&moved, &cfg).unwrap();
    assert_eq!(a.len(), b.len());
    for (l, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x.to_lists(), y.to_lists(), "rigid motion seed {seed} layer {l}");
    }
}

pub fn unit_norm(seed: u64, mode: Mode) {
    let params = ParameterSet::init(&small_model(), seed).unwrap();
    for e in embed_batch(&fingerprints(seed, 4), &params, mode).unwrap() {
        assert_eq!(e.level, Level::Fingerprint);
        assert!((e.norm() - 1.0).abs() <= 1e-9, "norm {} seed {seed}", e.norm());
    }
}

/// `‖a−b‖² = 2 − 2·sim` on `pairs` pairs normalized by the library.
pub fn distance_similarity_identity(seed: u64, pairs: usize) {
    let mut r = rng::stream(seed, 13);
    let raw = matrix(&mut r, 2 * pairs, 16, false);
    let mut tape = Tape::new();
    let x = tape.constant(raw);
    let n = tape.l2_normalize_rows(x);
    let unit = tape.value(n);
    let emb = |row: usize| Embedding {
        values: unit.row(row).to_vec(),
        level: Level::Fingerprint,
    };
    for pair in 0..pairs {
        let (a, b) = (emb(2 * pair), emb(2 * pair + 1));
        let sim = similarity(&a, &b).unwrap();
        let d = distance(&a.values, &b.values);
        assert!((d * d - (2.0 - 2.0 * sim)).abs() <= 1e-9, "pair {pair} seed {seed}");
    }
}

/// The hinge is zero exactly when `d(a,n) ≥ d(a,p) + margin`, over `count`
/// random triples at mixed scales; returns (inactive, active) counts.
pub fn hinge_semantics(seed: u64, count: usize, margin: f64) -> (usize, usize) {
    let mut r: StreamRng = rng::stream(seed, 14);
    let (mut zero, mut positive) = (0, 0);
    for i in 0..count {
        let dim = r.random_range(1..=8);
        let scale = [0.05, 0.3, 1.0, 3.0][i % 4];
        let x = matrix(&mut r, 3, dim, false);
        let v: Vec<Vec<f64>> = (0..3).map(|k| x.row(k).iter().map(|a| a * scale).collect()).collect();
        let loss = triplet_loss(&v[0], &v[1], &v[2], margin);
        let dap = sq_dist(&v[0], &v[1]).sqrt();
        let dan = sq_dist(&v[0], &v[2]).sqrt();
        assert_eq!(loss == 0.0, dan >= dap + margin, "triple {i}: d_ap {dap} d_an {dan}");
        assert!(loss >= 0.0);
        if loss == 0.0 {
            zero += 1;
        } else {
            positive += 1;
        }
        if i % 10 == 0 {
            // the tape op agrees with the scalar form
            let mut tape = Tape::new();
            let e = tape.constant(minugraph::numeric::Matrix::from_rows(&v).unwrap());
            let t = Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            };
            let l = tape.triplet_loss(e, &[t], margin).unwrap();
            assert!((tape.value(l).item().unwrap() - loss).abs() <= 1e-12, "tape triple {i}");
        }
    }
    (zero, positive)
}
