//! Exact k-nearest-neighbor graph over unit embeddings and cluster proposals
//! from thresholded connected components.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::EmbeddingSet;

#[derive(Debug, thiserror::Error)]
pub enum KnnError {
    #[error("embeddings must be L2-normalized")]
    NotNormalized,
    #[error("k={k} out of range for n={n} (need 1 <= k < n)")]
    KOutOfRange { k: usize, n: usize },
    #[error("threshold list is empty")]
    EmptyThresholds,
    #[error("thresholds must be strictly descending, found {0:?}")]
    UnsortedThresholds(Vec<f64>),
}

/// Row `i` holds the `k` most similar other samples, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
    sims: Vec<f64>,
}

impl KnnGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn sims(&self, i: usize) -> &[f64] {
        &self.sims[i * self.k..(i + 1) * self.k]
    }

    /// Undirected edges `(i, j, sim)` with `i < j`: `j` is a neighbor of `i`
    /// or vice versa. Sorted by `(i, j)`.
    pub fn symmetric_edges(&self) -> Vec<(usize, usize, f64)> {
        let mut edges: Vec<(usize, usize, f64)> = (0..self.n())
            .flat_map(|i| {
                self.neighbors(i)
                    .iter()
                    .zip(self.sims(i))
                    .map(move |(&j, &s)| if i < j { (i, j, s) } else { (j, i, s) })
            })
            .collect();
        edges.sort_by_key(|e| (e.0, e.1));
        edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        edges
    }

    /// `src,dst,sim` rows for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("src,dst,sim\n");
        for i in 0..self.n() {
            for (j, s) in self.neighbors(i).iter().zip(self.sims(i)) {
                writeln!(out, "{i},{j},{s}").unwrap();
            }
        }
        out
    }
}

/// Similarity descending, then index ascending.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

pub fn build_knn_graph(emb: &EmbeddingSet, k: usize) -> Result<KnnGraph, KnnError> {
    if !emb.is_normalized() {
        return Err(KnnError::NotNormalized);
    }
    let n = emb.n();
    if k == 0 || k >= n {
        return Err(KnnError::KOutOfRange { k, n });
    }
    let rows: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (emb.dot(i, j).clamp(-1.0, 1.0), j))
                .collect();
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, rank_order);
                cand.truncate(k);
            }
            cand.sort_by(rank_order);
            cand
        })
        .collect();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut sims = Vec::with_capacity(n * k);
    for row in rows {
        for (s, j) in row {
            neighbors.push(j);
            sims.push(s);
        }
    }
    Ok(KnnGraph { k, neighbors, sims })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProposal {
    /// Sorted, unique sample indices.
    pub members: Vec<usize>,
    pub threshold: f64,
}

impl ClusterProposal {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    /// Component id per node, numbered by smallest member.
    pub fn labels(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut id = vec![usize::MAX; n];
        let mut next = 0;
        (0..n)
            .map(|i| {
                let r = self.find(i);
                if id[r] == usize::MAX {
                    id[r] = next;
                    next += 1;
                }
                id[r]
            })
            .collect()
    }
}

fn components(n: usize, edges: &[(usize, usize, f64)], threshold: f64) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for &(i, j, s) in edges {
        if s >= threshold {
            uf.union(i, j);
        }
    }
    let labels = uf.labels();
    let count = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// `count` strictly descending thresholds at evenly spaced quantiles of the
/// edge-similarity distribution (levels `1/(count+1) .. count/(count+1)`).
pub fn default_thresholds(g: &KnnGraph, count: usize) -> Vec<f64> {
    let mut sims: Vec<f64> = g.symmetric_edges().iter().map(|e| e.2).collect();
    sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = (1..=count)
        .rev()
        .map(|q| {
            let pos = q as f64 / (count + 1) as f64 * (sims.len() - 1) as f64;
            sims[pos.round() as usize]
        })
        .collect();
    out.dedup();
    out
}

/// Connected components of the symmetrized graph at each threshold.
///
/// A component larger than `max_size` is replaced by its sub-components at
/// the next higher threshold, recursively; at the highest threshold it is
/// kept as-is. Member sets already emitted (at a higher threshold) are
/// skipped.
pub fn proposals_from_thresholds(
    g: &KnnGraph,
    thresholds: &[f64],
    max_size: usize,
) -> Result<Vec<ClusterProposal>, KnnError> {
    if thresholds.is_empty() {
        return Err(KnnError::EmptyThresholds);
    }
    if thresholds.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(KnnError::UnsortedThresholds(thresholds.to_vec()));
    }
    let n = g.n();
    let edges = g.symmetric_edges();
    let levels: Vec<Vec<Vec<usize>>> = thresholds.iter().map(|&t| components(n, &edges, t)).collect();
    // component id of each node at each level
    let level_of: Vec<Vec<usize>> = levels
        .iter()
        .map(|comps| {
            let mut id = vec![0; n];
            for (c, members) in comps.iter().enumerate() {
                members.iter().for_each(|&i| id[i] = c);
            }
            id
        })
        .collect();

    fn emit(
        level: usize,
        members: &[usize],
        levels: &[Vec<Vec<usize>>],
        level_of: &[Vec<usize>],
        thresholds: &[f64],
        max_size: usize,
        out: &mut Vec<ClusterProposal>,
    ) {
        if members.len() <= max_size || level == 0 {
            out.push(ClusterProposal {
                members: members.to_vec(),
                threshold: thresholds[level],
            });
            return;
        }
        let mut children: Vec<usize> = members.iter().map(|&i| level_of[level - 1][i]).collect();
        children.sort_unstable();
        children.dedup();
        for c in children {
            emit(
                level - 1,
                &levels[level - 1][c],
                levels,
                level_of,
                thresholds,
                max_size,
                out,
            );
        }
    }

    let mut out = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    for (level, comps) in levels.iter().enumerate() {
        let mut emitted = Vec::new();
        for comp in comps {
            emit(level, comp, &levels, &level_of, thresholds, max_size, &mut emitted);
        }
        for p in emitted {
            if seen.insert(p.members.clone()) {
                out.push(p);
            }
        }
    }
    Ok(out)
}
