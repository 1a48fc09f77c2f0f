//! Minutia records and exact k-nearest-neighbor graph construction.
//!
//! Graphs are directed adjacency lists: vertex `i` aggregates from its own
//! neighbor list. Lists are ordered by ascending Euclidean distance with ties
//! broken by ascending vertex index, so construction is deterministic.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// One minutia: normalized position and ridge orientation in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", try_from = "[f64; 3]")]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    /// Orientation, wrapped into `[0, 2π)`.
    pub d: f64,
}

impl Minutia {
    pub fn new(x: f64, y: f64, d: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && d.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite minutia ({x}, {y}, {d})")));
        }
        Ok(Minutia { x, y, d: wrap_angle(d) })
    }
}

impl From<Minutia> for [f64; 3] {
    fn from(m: Minutia) -> Self {
        [m.x, m.y, m.d]
    }
}

impl TryFrom<[f64; 3]> for Minutia {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Minutia::new(v[0], v[1], v[2])
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Spatial distance between two minutiae. Orientation does not enter the
/// metric.
pub fn minutia_distance(a: &Minutia, b: &Minutia) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// `N x 2` matrix of minutia positions.
pub fn minutia_positions(minutiae: &[Minutia]) -> Matrix {
    let mut m = Matrix::zeros(minutiae.len(), 2);
    for (i, p) in minutiae.iter().enumerate() {
        m.set(i, 0, p.x);
        m.set(i, 1, p.y);
    }
    m
}

/// Per-vertex neighbor lists in compressed row form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    fan_out: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborGraph {
    /// Builds a graph from explicit lists, rejecting self-loops and
    /// out-of-range ids.
    pub fn from_lists(fan_out: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::IndexOutOfRange {
                        op: "neighbor graph",
                        index: j,
                        limit: n,
                    });
                }
                if j == i {
                    return Err(Error::InvalidInput(format!("self-loop at vertex {i}")));
                }
                indices.push(j);
            }
            offsets.push(indices.len());
        }
        Ok(NeighborGraph {
            fan_out,
            offsets,
            indices,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Requested fan-out `K` (lists may be shorter after clamping).
    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn edge_count(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, vertex: usize) -> &[usize] {
        &self.indices[self.offsets[vertex]..self.offsets[vertex + 1]]
    }

    /// Edge-row range belonging to `vertex`.
    pub fn edge_range(&self, vertex: usize) -> std::ops::Range<usize> {
        self.offsets[vertex]..self.offsets[vertex + 1]
    }

    /// All directed edges `(center, neighbor)` in edge-row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.vertex_count()).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        (0..self.vertex_count()).map(|i| self.neighbors(i).to_vec()).collect()
    }
}

/// Distance-ordered candidate lists, one per vertex, truncated to a pool
/// size. Dilated graphs for every layer are selected from one ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborRanking {
    lists: Vec<Vec<usize>>,
}

impl NeighborRanking {
    /// Ranks, for every row of `points`, the `pool` nearest other rows.
    pub fn build(points: &Matrix, pool: usize) -> Result<Self> {
        let n = points.rows();
        if n == 0 {
            return Err(Error::InvalidInput("empty point list".into()));
        }
        let pool = pool.min(n - 1);
        let mut lists = Vec::with_capacity(n);
        let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            candidates.clear();
            let pi = points.row(i);
            for j in (0..n).filter(|&j| j != i) {
                let d2: f64 = pi.iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                candidates.push((d2, j));
            }
            let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if pool < candidates.len() {
                candidates.select_nth_unstable_by(pool, by_distance);
                candidates.truncate(pool);
            }
            candidates.sort_unstable_by(by_distance);
            lists.push(candidates.iter().map(|&(_, j)| j).collect());
        }
        Ok(NeighborRanking { lists })
    }

    pub fn vertex_count(&self) -> usize {
        self.lists.len()
    }

    /// Takes ranks `rate, 2·rate, …, k·rate` (1-based) from each list,
    /// stopping at the end of the pool.
    pub fn select(&self, k: usize, rate: usize) -> Result<NeighborGraph> {
        if k == 0 || rate == 0 {
            return Err(Error::InvalidInput(format!(
                "neighbor count {k} and dilation rate {rate} must be positive"
            )));
        }
        let lists: Vec<Vec<usize>> = self
            .lists
            .iter()
            .map(|list| list.iter().skip(rate - 1).step_by(rate).take(k).copied().collect())
            .collect();
        NeighborGraph::from_lists(k, &lists)
    }
}

/// Exact k-NN graph under Euclidean distance; `k` clamps to `N - 1`.
pub fn knn_graph(points: &Matrix, k: usize) -> Result<NeighborGraph> {
    dilated_neighbors(points, k, 1)
}

/// Dilated k-NN: ranks `k·rate` candidates and keeps every `rate`-th.
pub fn dilated_neighbors(points: &Matrix, k: usize, rate: usize) -> Result<NeighborGraph> {
    if k == 0 || rate == 0 {
        return Err(Error::InvalidInput(format!(
            "neighbor count {k} and dilation rate {rate} must be positive"
        )));
    }
    NeighborRanking::build(points, k.saturating_mul(rate))?.select(k, rate)
}

/// k-NN graph over a batch of embedding rows.
pub fn fingerprint_graph(embeddings: &Matrix, k_f: usize) -> Result<NeighborGraph> {
    if embeddings.rows() < 2 {
        return Err(Error::InvalidInput(format!(
            "fingerprint graph needs a batch of at least 2, got {}",
            embeddings.rows()
        )));
    }
    knn_graph(embeddings, k_f)
}

/// Per-layer dilation rates; layer `l` (1-based) uses `⌈l/4⌉`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DilationPlan {
    rates: Vec<usize>,
}

impl DilationPlan {
    pub fn standard(layers: usize) -> Self {
        DilationPlan {
            rates: (1..=layers).map(|l| l.div_ceil(4)).collect(),
        }
    }

    pub fn undilated(layers: usize) -> Self {
        DilationPlan { rates: vec![1; layers] }
    }

    pub fn new(enabled: bool, layers: usize) -> Self {
        if enabled {
            Self::standard(layers)
        } else {
            Self::undilated(layers)
        }
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }

    pub fn max_rate(&self) -> usize {
        self.rates.iter().copied().max().unwrap_or(1)
    }
}

/// Neighbor graphs for every layer of a block, selected from one ranking.
pub fn layer_graphs(points: &Matrix, k: usize, plan: &DilationPlan) -> Result<Vec<NeighborGraph>> {
    if k == 0 {
        return Err(Error::InvalidInput("neighbor count must be positive".into()));
    }
    let ranking = NeighborRanking::build(points, k.saturating_mul(plan.max_rate()))?;
    plan.rates().iter().map(|&rate| ranking.select(k, rate)).collect()
}
