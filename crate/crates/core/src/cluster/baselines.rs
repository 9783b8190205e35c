//! Spherical k-means, average-linkage agglomerative clustering and DBSCAN,
//! all on cosine geometry.

use rand::Rng as _;
use rayon::prelude::*;

use super::ClusterError;
use crate::data::{dot, Clustering, EmbeddingSet};
use crate::knn::UnionFind;
use crate::rng;

fn require_normalized(emb: &EmbeddingSet) -> Result<(), ClusterError> {
    if emb.is_normalized() {
        Ok(())
    } else {
        Err(ClusterError::NotNormalized)
    }
}

fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Index of the most similar centroid (lowest index on ties) and its similarity.
fn nearest(x: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, mu) in centroids.chunks_exact(d).enumerate() {
        let s = dot(x, mu);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// Lloyd iterations with k-means++ seeding; centroids are renormalized to
/// the unit sphere after every update.
pub fn kmeans(emb: &EmbeddingSet, k: usize, max_iters: usize, seed: u64) -> Result<Clustering, ClusterError> {
    let (n, d) = (emb.n(), emb.d());
    if k == 0 || k > n {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    require_normalized(emb)?;
    let mut r = rng::stream(seed, 0);

    // k-means++ on squared chord distance 2 - 2 cos
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    let first = r.random_range(0..n);
    centroids.extend_from_slice(emb.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| (2.0 - 2.0 * emb.dot(i, first)).max(0.0)).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // never land on a zero-weight point through rounding
            if dist[chosen] == 0.0 {
                chosen = dist.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        centroids.extend_from_slice(emb.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min((2.0 - 2.0 * emb.dot(i, pick)).max(0.0));
        }
    }

    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let next: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(emb.row(i), &centroids, d))
            .collect();
        let changed = next.iter().zip(&assign).any(|(a, &b)| a.0 != b);
        assign = next.iter().map(|a| a.0).collect();
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            sums[c * d..(c + 1) * d]
                .iter_mut()
                .zip(emb.row(i))
                .for_each(|(s, x)| *s += x);
        }
        // points ordered from worst to best fit, for reseeding empty clusters
        let mut by_fit: Vec<usize> = (0..n).collect();
        by_fit.sort_by(|&a, &b| next[a].1.partial_cmp(&next[b].1).unwrap().then(a.cmp(&b)));
        let mut donors = by_fit.into_iter();
        for c in 0..k {
            let slot = &mut sums[c * d..(c + 1) * d];
            if counts[c] == 0 || !normalize_in_place(slot) {
                let far = donors.next().unwrap_or(0);
                slot.copy_from_slice(emb.row(far));
            }
        }
        centroids = sums;
    }
    Ok(Clustering::from_ids(assign.into_iter().map(Some)))
}

/// Average-linkage agglomeration on cosine distance via nearest-neighbor
/// chains. All merges at distance `<= dist_threshold` are applied.
pub fn hac(emb: &EmbeddingSet, dist_threshold: f64) -> Result<Clustering, ClusterError> {
    let n = emb.n();
    if n < 2 {
        return Err(ClusterError::TooFewSamples { needed: 2, got: n });
    }
    let merges = average_linkage_merges(emb);
    let mut uf = UnionFind::new(n);
    for (a, b, dist) in merges {
        if dist <= dist_threshold {
            uf.union(a, b);
        }
    }
    Ok(Clustering::from_ids(uf.labels().into_iter().map(Some)))
}

/// The `n - 1` merges of the average-linkage dendrogram as
/// `(representative_a, representative_b, distance)`.
pub(crate) fn average_linkage_merges(emb: &EmbeddingSet) -> Vec<(usize, usize, f64)> {
    let n = emb.n();
    let mut dist: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (0..n).map(move |j| (1.0 - emb.dot(i, j)).clamp(0.0, 2.0)))
        .collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let a = *chain.last().unwrap();
        let prev = if chain.len() >= 2 {
            Some(chain[chain.len() - 2])
        } else {
            None
        };
        // nearest active neighbor; the previous chain element wins ties
        let mut best = (usize::MAX, f64::INFINITY);
        if let Some(p) = prev {
            best = (p, dist[a * n + p]);
        }
        for j in 0..n {
            if j != a && active[j] && dist[a * n + j] < best.1 {
                best = (j, dist[a * n + j]);
            }
        }
        let b = best.0;
        if Some(b) == prev {
            chain.pop();
            chain.pop();
            let (keep, gone) = (a.min(b), a.max(b));
            merges.push((keep, gone, best.1));
            let (sk, sg) = (size[keep] as f64, size[gone] as f64);
            for j in 0..n {
                if active[j] && j != keep && j != gone {
                    let v = (sk * dist[keep * n + j] + sg * dist[gone * n + j]) / (sk + sg);
                    dist[keep * n + j] = v;
                    dist[j * n + keep] = v;
                }
            }
            size[keep] += size[gone];
            active[gone] = false;
            remaining -= 1;
        } else {
            chain.push(b);
        }
    }
    merges
}

/// Density clustering on cosine distance. A point is a core point when at
/// least `min_size` points (itself included) lie within `eps`.
pub fn dbscan(emb: &EmbeddingSet, eps: f64, min_size: usize) -> Result<Clustering, ClusterError> {
    let n = emb.n();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| 1.0 - emb.dot(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_size.max(1)).collect();
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || assignment[start].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        assignment[start] = Some(id);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if assignment[q].is_none() {
                    assignment[q] = Some(id);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok(Clustering::new(assignment)?)
}
