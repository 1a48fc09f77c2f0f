//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.
//!
//! Every oracle here is written independently of the library: plain nested
//! loops, full sorts and exhaustive enumeration.

#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cases;

use std::collections::BTreeMap;

use minugraph::evaluation::ScoreSet;
use minugraph::model::{Embedding, Level};
use minugraph::numeric::Matrix;
use minugraph::rng::StreamRng;
use minugraph::training::{MiningMode, Triplet};
use rand::Rng;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

/// Neighbor lists by full sort of every other row on (squared distance,
/// index), keeping ranks `rate, 2·rate, …, k·rate` within the first
/// `k·rate` candidates.
pub fn neighbors(points: &Matrix, k: usize, rate: usize) -> Vec<Vec<usize>> {
    let n = points.rows();
    let mut out = Vec::new();
    for i in 0..n {
        let mut all = Vec::new();
        for j in 0..n {
            if j != i {
                all.push((sq_dist(points.row(i), points.row(j)), j));
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut list = Vec::new();
        for r in 1..=k {
            let pos = r * rate - 1;
            if pos < all.len() {
                list.push(all[pos].1);
            }
        }
        out.push(list);
    }
    out
}

pub fn pairwise(x: &Matrix) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d[i][j] = sq_dist(x.row(i), x.row(j)).sqrt();
            }
        }
    }
    d
}

/// Per identity (ascending label), the triplet minimizing the key
/// `(d_ap, outside_band, d_an, a, p, n)` over every valid combination.
/// Hardest mining treats every negative as inside the band. The all-pairs
/// mode keys on `(label, a, p)` instead and minimizes `(outside, d_an, n)`.
pub fn mine(dist: &Matrix, labels: &[u64], margin: f64, mode: MiningMode) -> Vec<Triplet> {
    let n = labels.len();
    if mode == MiningMode::SemiHardAllPairs {
        let mut best: BTreeMap<(u64, usize, usize), ((bool, f64, usize), Triplet)> = BTreeMap::new();
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let (dap, dan) = (dist.get(a, p), dist.get(a, q));
                    let key = (!(dan > dap && dan < dap + margin), dan, q);
                    let t = Triplet {
                        anchor: a,
                        positive: p,
                        negative: q,
                    };
                    let entry = best.entry((labels[a], a, p)).or_insert((key, t));
                    if key.partial_cmp(&entry.0) == Some(std::cmp::Ordering::Less) {
                        *entry = (key, t);
                    }
                }
            }
        }
        return best.into_values().map(|(_, t)| t).collect();
    }
    let mut best: BTreeMap<u64, ((f64, bool, f64, usize, usize, usize), Triplet)> = BTreeMap::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let dap = dist.get(a, p);
                let dan = dist.get(a, q);
                let outside = match mode {
                    MiningMode::Hardest => false,
                    _ => !(dan > dap && dan < dap + margin),
                };
                let key = (dap, outside, dan, a, p, q);
                let t = Triplet {
                    anchor: a,
                    positive: p,
                    negative: q,
                };
                let entry = best.entry(labels[a]).or_insert((key, t));
                if key.partial_cmp(&entry.0) == Some(std::cmp::Ordering::Less) {
                    *entry = (key, t);
                }
            }
        }
    }
    best.into_values().map(|(_, t)| t).collect()
}

fn count_ge(v: &[f64], t: f64) -> usize {
    v.iter().filter(|&&s| s >= t).count()
}

/// Every distinct score plus `+inf`, ascending.
fn candidates(scores: &ScoreSet) -> Vec<f64> {
    let mut c: Vec<f64> = Vec::new();
    for &s in scores.genuine.iter().chain(&scores.impostor) {
        if !c.contains(&s) {
            c.push(s);
        }
    }
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c.push(f64::INFINITY);
    c
}

/// `(tar, threshold)` at the smallest candidate meeting the FAR target;
/// the threshold is `+inf` when only the sentinel qualifies.
pub fn tar_at_far(scores: &ScoreSet, target: f64) -> (f64, f64) {
    let ni = scores.impostor.len() as f64;
    let ng = scores.genuine.len() as f64;
    for t in candidates(scores) {
        if count_ge(&scores.impostor, t) as f64 / ni <= target {
            return (count_ge(&scores.genuine, t) as f64 / ng, t);
        }
    }
    unreachable!()
}

pub fn eer(scores: &ScoreSet) -> f64 {
    let ni = scores.impostor.len() as f64;
    let ng = scores.genuine.len() as f64;
    let rates: Vec<(f64, f64)> = candidates(scores)
        .into_iter()
        .map(|t| {
            (
                count_ge(&scores.impostor, t) as f64 / ni,
                (scores.genuine.len() - count_ge(&scores.genuine, t)) as f64 / ng,
            )
        })
        .collect();
    if let Some(&(far, _)) = rates.iter().find(|(far, frr)| far == frr) {
        return far;
    }
    for i in 0..rates.len() - 1 {
        let (f0, r0) = rates[i];
        let (f1, r1) = rates[i + 1];
        let d0 = f0 - r0;
        let d1 = f1 - r1;
        if d0 > 0.0 && d1 < 0.0 {
            let alpha = d0 / (d0 - d1);
            return ((f0 + alpha * (f1 - f0)) + (r0 + alpha * (r1 - r0))) / 2.0;
        }
    }
    unreachable!()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Full ranking of the gallery per probe and the 1-based rank of the first
/// mate.
pub fn rank(probes: &[(Embedding, u64)], gallery: &[(Embedding, u64)]) -> Vec<(Vec<usize>, usize)> {
    probes
        .iter()
        .map(|(p, label)| {
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            let score = |i: usize| dot(&p.values, &gallery[i].0.values);
            // insertion sort on (score desc, index asc)
            for i in 1..order.len() {
                let mut j = i;
                while j > 0 {
                    let (a, b) = (order[j - 1], order[j]);
                    let swap = score(b) > score(a) || (score(b) == score(a) && b < a);
                    if !swap {
                        break;
                    }
                    order.swap(j - 1, j);
                    j -= 1;
                }
            }
            let mate = order.iter().position(|&i| gallery[i].1 == *label).unwrap() + 1;
            (order, mate)
        })
        .collect()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn diversity(x: &Matrix) -> f64 {
    let n = x.rows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                total += sq_dist(x.row(i), x.row(j)).sqrt();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

/// Random `rows x cols` matrix. With `grid`, entries are small integers so
/// distance ties are common.
pub fn matrix(r: &mut StreamRng, rows: usize, cols: usize, grid: bool) -> Matrix {
    let values = (0..rows * cols)
        .map(|_| {
            if grid {
                r.random_range(0..4) as f64
            } else {
                r.random_range(-1.0..1.0)
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, values).unwrap()
}

pub fn unit(r: &mut StreamRng, dim: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            return Embedding {
                values: v.iter().map(|x| x / n).collect(),
                level: Level::Fingerprint,
            };
        }
    }
}

/// Scores drawn from a coarse grid so ties across and within populations
/// are frequent.
pub fn scores(r: &mut StreamRng) -> ScoreSet {
    let ng = r.random_range(1..40);
    let ni = r.random_range(1..60);
    let steps = r.random_range(2..30);
    let draw = |r: &mut StreamRng, shift: i32| {
        let s = r.random_range(0..steps) + shift;
        s as f64 / steps as f64
    };
    let shift = r.random_range(0..4);
    ScoreSet {
        genuine: (0..ng).map(|_| draw(r, shift)).collect(),
        impostor: (0..ni).map(|_| draw(r, 0)).collect(),
    }
}
