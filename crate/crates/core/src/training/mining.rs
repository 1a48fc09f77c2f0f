use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Row indices into the current batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Negative selection rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Nearest different-label sample to the anchor.
    #[default]
    Hardest,
    /// Nearest negative with `d(a,p) < d(a,n) < d(a,p) + margin`, falling
    /// back to the hardest when no such negative exists.
    SemiHard,
    /// Semi-hard negatives for every ordered same-label pair instead of only
    /// the closest one.
    SemiHardAllPairs,
}

/// Euclidean distance between two rows, accumulated left to right.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `B x B` distances between the rows of `embeddings`. Each unordered pair
/// is computed once so the result is exactly symmetric.
pub fn pairwise_distances(embeddings: &Matrix) -> Result<Matrix> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "pairwise distances need at least 2 embeddings, got {n}"
        )));
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(embeddings.row(i), embeddings.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// One triplet per identity with at least two samples in the batch, or
/// one per ordered same-label pair under [`MiningMode::SemiHardAllPairs`].
///
/// The anchor-positive pair is the closest same-label pair. Both orientations
/// of that pair are candidates; among them the one whose anchor has the
/// closer negative wins, then ascending `(anchor, positive, negative)`.
pub fn mine_triplets(dist: &Matrix, labels: &[u64], margin: f64, mode: MiningMode) -> Result<Vec<Triplet>> {
    let n = labels.len();
    if dist.shape() != (n, n) {
        return Err(Error::shape(
            "mine_triplets",
            format!("{:?} distances for {n} labels", dist.shape()),
        ));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (&label, members) in &groups {
        if members.len() < 2 {
            continue;
        }
        let mut all: Vec<(usize, usize)> = Vec::new();
        for &a in members {
            for &p in members {
                if a != p {
                    all.push((a, p));
                }
            }
        }
        if mode == MiningMode::SemiHardAllPairs {
            out.extend(
                all.iter()
                    .map(|&(a, p)| best_negative(dist, labels, label, &[(a, p)], margin, true)),
            );
            continue;
        }
        let best_ap = all.iter().map(|&(a, p)| dist.get(a, p)).fold(f64::INFINITY, f64::min);
        all.retain(|&(a, p)| dist.get(a, p) == best_ap);
        out.push(best_negative(
            dist,
            labels,
            label,
            &all,
            margin,
            mode == MiningMode::SemiHard,
        ));
    }
    Ok(out)
}

/// Lowest `(outside band, d(a,n))` over the given pairs and every negative;
/// ties keep the lowest `(anchor, positive, negative)`.
fn best_negative(
    dist: &Matrix,
    labels: &[u64],
    label: u64,
    pairs: &[(usize, usize)],
    margin: f64,
    semi_hard: bool,
) -> Triplet {
    let mut best: Option<((bool, f64), Triplet)> = None;
    for &(a, p) in pairs {
        let dap = dist.get(a, p);
        for (neg, _) in labels.iter().enumerate().filter(|(_, &l)| l != label) {
            let dan = dist.get(a, neg);
            let outside = semi_hard && !(dan > dap && dan < dap + margin);
            let key = (outside, dan);
            // candidates arrive in ascending (a, p, n) order, so a strict
            // comparison keeps the lowest indices on ties
            if best
                .as_ref()
                .is_none_or(|(k, _)| (!key.0 && k.0) || (key.0 == k.0 && key.1 < k.1))
            {
                let t = Triplet {
                    anchor: a,
                    positive: p,
                    negative: neg,
                };
                best = Some((key, t));
            }
        }
    }
    best.expect("at least two identities").1
}

/// Hinge on one triplet of vectors: `max(d(a,p) - d(a,n) + margin, 0)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (distance(a, p) - distance(a, n) + margin).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances_basic() {
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let d = pairwise_distances(&m).unwrap();
        assert!((d.get(0, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
        assert!(pairwise_distances(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn hinge_examples() {
        let o = [0.0];
        assert_eq!(triplet_loss(&o, &o, &[0.5], 0.5), 0.0);
        let l = triplet_loss(&[0.0], &[1.0], &[0.2], 0.5);
        assert!((l - 1.3).abs() < 1e-12);
    }

    #[test]
    fn picks_nearest_negative() {
        // identity 0 at rows 0,1; identity 1 at rows 2,3
        let m = Matrix::from_rows(&[&[0.0], &[0.1], &[0.2], &[5.0]]).unwrap();
        let d = pairwise_distances(&m).unwrap();
        let t = mine_triplets(&d, &[0, 0, 1, 1], 0.5, MiningMode::Hardest).unwrap();
        assert_eq!(
            t[0],
            Triplet {
                anchor: 1,
                positive: 0,
                negative: 2
            }
        );
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn semi_hard_prefers_margin_band() {
        // d(a,p) = 0.1; one negative sits between the pair, one 0.3 away
        let m = Matrix::from_rows(&[&[0.0], &[0.1], &[0.05], &[-0.3]]).unwrap();
        let d = pairwise_distances(&m).unwrap();
        let labels = [0, 0, 1, 2];
        let hard = mine_triplets(&d, &labels, 0.5, MiningMode::Hardest).unwrap();
        assert_eq!(hard[0].negative, 2);
        let semi = mine_triplets(&d, &labels, 0.5, MiningMode::SemiHard).unwrap();
        assert_eq!((semi[0].anchor, semi[0].positive, semi[0].negative), (0, 1, 3));
    }

    #[test]
    fn single_identity_gives_nothing() {
        let d = pairwise_distances(&Matrix::zeros(3, 2)).unwrap();
        assert!(mine_triplets(&d, &[4, 4, 4], 0.5, MiningMode::Hardest)
            .unwrap()
            .is_empty());
        let d = pairwise_distances(&Matrix::zeros(2, 2)).unwrap();
        assert!(mine_triplets(&d, &[1, 2], 0.5, MiningMode::Hardest).unwrap().is_empty());
    }
}
