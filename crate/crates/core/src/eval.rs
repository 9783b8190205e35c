//! Clustering, verification and identification metrics, and the Fréchet
//! distance between Gaussian fits of two embedding sets.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dot, Clustering, EmbeddingSet, LabelSet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("probe identity {0} has no gallery entry")]
    ProbeIdMissing(usize),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn pairs(m: u64) -> u64 {
    m * m.saturating_sub(1) / 2
}

/// Per-(cluster, label) counts over assigned samples.
fn contingency(c: &Clustering, labels: &LabelSet) -> (HashMap<(usize, usize), u64>, Vec<u64>, HashMap<usize, u64>) {
    let mut joint = HashMap::new();
    let mut clusters = vec![0u64; c.num_clusters()];
    let mut classes = HashMap::new();
    for (i, a) in c.assignment().iter().enumerate() {
        if let Some(k) = *a {
            let l = labels.get(i);
            *joint.entry((k, l)).or_insert(0) += 1;
            clusters[k] += 1;
            *classes.entry(l).or_insert(0) += 1;
        }
    }
    (joint, clusters, classes)
}

/// Pair-counting precision and recall over assigned samples.
///
/// With no same-cluster pairs precision is 1; with no same-label pairs
/// recall is 0.
pub fn pairwise_prf(c: &Clustering, labels: &LabelSet) -> Prf {
    let (joint, clusters, classes) = contingency(c, labels);
    let tp: u64 = joint.values().map(|&v| pairs(v)).sum();
    let same_cluster: u64 = clusters.iter().map(|&v| pairs(v)).sum();
    let same_label: u64 = classes.values().map(|&v| pairs(v)).sum();
    let precision = if same_cluster == 0 {
        1.0
    } else {
        tp as f64 / same_cluster as f64
    };
    let recall = if same_label == 0 {
        0.0
    } else {
        tp as f64 / same_label as f64
    };
    Prf::new(precision, recall)
}

/// Per-sample precision and recall averaged over assigned samples. Class
/// sizes count assigned samples only.
pub fn bcubed_prf(c: &Clustering, labels: &LabelSet) -> Prf {
    let (joint, clusters, classes) = contingency(c, labels);
    let mut p = 0.0;
    let mut r = 0.0;
    let mut n = 0usize;
    for (i, a) in c.assignment().iter().enumerate() {
        if let Some(k) = *a {
            let l = labels.get(i);
            let both = joint[&(k, l)] as f64;
            p += both / clusters[k] as f64;
            r += both / classes[&l] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Prf::new(1.0, 0.0);
    }
    Prf::new(p / n as f64, r / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationProtocol {
    pub pairs: Vec<(usize, usize, bool)>,
    pub folds: Option<Vec<usize>>,
}

impl VerificationProtocol {
    /// Every unordered pair of samples.
    pub fn all_pairs(labels: &LabelSet) -> Self {
        let n = labels.len();
        let pairs = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .map(|(a, b)| (a, b, labels.get(a) == labels.get(b)))
            .collect();
        Self { pairs, folds: None }
    }

    /// Every same-label pair plus as many distinct different-label pairs,
    /// drawn uniformly with `seed`. Falls back to all pairs when negatives
    /// are scarcer than positives.
    pub fn balanced(labels: &LabelSet, seed: u64) -> Self {
        let n = labels.len();
        let mut pairs: Vec<(usize, usize, bool)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| labels.get(a) == labels.get(b))
            .map(|(a, b)| (a, b, true))
            .collect();
        let pos = pairs.len();
        let neg_total = n * n.saturating_sub(1) / 2 - pos;
        if neg_total <= pos {
            return Self::all_pairs(labels);
        }
        let mut rng = crate::rng::stream(seed, 0);
        let mut seen = std::collections::HashSet::with_capacity(pos);
        while seen.len() < pos {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b || labels.get(a) == labels.get(b) {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                pairs.push((key.0, key.1, false));
            }
        }
        Self { pairs, folds: None }
    }

    /// Assigns pair `i` to fold `i % k`.
    pub fn with_folds(mut self, k: usize) -> Self {
        self.folds = Some((0..self.pairs.len()).map(|i| i % k.max(1)).collect());
        self
    }

    fn validate(&self, n: usize) -> Result<(), EvalError> {
        if let Some(&(a, b, _)) = self.pairs.iter().find(|p| p.0 >= n || p.1 >= n) {
            return Err(EvalError::InvalidProtocol(format!(
                "pair ({a}, {b}) out of range for n={n}"
            )));
        }
        if !self.pairs.iter().any(|p| p.2) || self.pairs.iter().all(|p| p.2) {
            return Err(EvalError::InvalidProtocol("need positive and negative pairs".into()));
        }
        if let Some(f) = &self.folds {
            if f.len() != self.pairs.len() {
                return Err(EvalError::InvalidProtocol(
                    "fold list length differs from pair count".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub best_accuracy: f64,
    /// `(far, tar)` in the order requested.
    pub tar_at_far: Vec<(f64, f64)>,
}

/// Best accuracy of the rule `score >= t` over every observed score (and
/// the reject-all rule).
fn best_threshold(scored: &[(f64, bool)]) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());
    let negatives = scored.iter().filter(|s| !s.1).count();
    let mut correct = negatives;
    let mut best = (correct, f64::INFINITY);
    let mut i = 0;
    while i < order.len() {
        let t = scored[order[i]].0;
        while i < order.len() && scored[order[i]].0 == t {
            if scored[order[i]].1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            i += 1;
        }
        if correct > best.0 {
            best = (correct, t);
        }
    }
    (best.0 as f64 / scored.len().max(1) as f64, best.1)
}

fn accuracy_at(scored: &[(f64, bool)], t: f64) -> f64 {
    let ok = scored.iter().filter(|(s, same)| (*s >= t) == *same).count();
    ok as f64 / scored.len().max(1) as f64
}

/// Cosine-similarity verification. Without folds the accuracy is the best
/// single-threshold accuracy; with folds it is the mean held-out accuracy of
/// the threshold chosen on the remaining folds.
pub fn verification_metrics(
    emb: &EmbeddingSet,
    protocol: &VerificationProtocol,
    fars: &[f64],
) -> Result<Verification, EvalError> {
    protocol.validate(emb.n())?;
    let scored: Vec<(f64, bool)> = protocol
        .pairs
        .par_iter()
        .map(|&(a, b, same)| (emb.dot(a, b), same))
        .collect();
    let best_accuracy = match &protocol.folds {
        None => best_threshold(&scored).0,
        Some(folds) => {
            let k = folds.iter().max().map_or(0, |m| m + 1);
            let mut acc = Vec::new();
            for f in 0..k {
                let train: Vec<(f64, bool)> = scored
                    .iter()
                    .zip(folds)
                    .filter(|(_, &g)| g != f)
                    .map(|(s, _)| *s)
                    .collect();
                let test: Vec<(f64, bool)> = scored
                    .iter()
                    .zip(folds)
                    .filter(|(_, &g)| g == f)
                    .map(|(s, _)| *s)
                    .collect();
                if test.is_empty() {
                    continue;
                }
                acc.push(accuracy_at(&test, best_threshold(&train).1));
            }
            acc.iter().sum::<f64>() / acc.len().max(1) as f64
        }
    };
    let mut neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    neg.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let tar_at_far = fars
        .iter()
        .map(|&far| {
            let allowed = (far * neg.len() as f64).floor() as usize;
            let tar = if allowed >= neg.len() {
                1.0
            } else {
                let bar = neg[allowed];
                pos.iter().filter(|&&s| s > bar).count() as f64 / pos.len() as f64
            };
            (far, tar)
        })
        .collect();
    Ok(Verification {
        best_accuracy,
        tar_at_far,
    })
}

/// Fraction of probes whose identity appears among the top-`k` gallery
/// entries by cosine similarity (ties broken by gallery index).
pub fn identification_rank(
    gallery: (&EmbeddingSet, &[usize]),
    probe: (&EmbeddingSet, &[usize]),
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, EvalError> {
    let (gemb, gids) = gallery;
    let (pemb, pids) = probe;
    if gemb.d() != pemb.d() {
        return Err(EvalError::DimensionMismatch(gemb.d(), pemb.d()));
    }
    if let Some(&missing) = pids.iter().find(|id| !gids.contains(id)) {
        return Err(EvalError::ProbeIdMissing(missing));
    }
    let ranks: Vec<usize> = (0..pemb.n())
        .into_par_iter()
        .map(|p| {
            let x = pemb.row(p);
            let sims: Vec<f64> = gemb.rows().map(|g| dot(g, x)).collect();
            // best-ranked gallery entry of the probe's identity
            let target = (0..gemb.n())
                .filter(|&g| gids[g] == pids[p])
                .max_by(|&a, &b| sims[a].partial_cmp(&sims[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            (0..gemb.n())
                .filter(|&g| sims[g] > sims[target] || (sims[g] == sims[target] && g < target))
                .count()
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            (
                k,
                ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len().max(1) as f64,
            )
        })
        .collect())
}

/// Mean and covariance (divisor `n - 1`) of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub const COV_REGULARIZER: f64 = 1e-6;

impl FrechetStats {
    pub fn fit(emb: &EmbeddingSet) -> Result<Self, EvalError> {
        let (n, d) = (emb.n(), emb.d());
        if n < 2 {
            return Err(EvalError::TooFewSamples { needed: 2, got: n });
        }
        let x = DMatrix::from_row_slice(n, d, emb.as_slice());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)` with a
/// small ridge on both covariances.
pub fn frechet_from_stats(a: &FrechetStats, b: &FrechetStats) -> Result<f64, EvalError> {
    if a.mean.len() != b.mean.len() {
        return Err(EvalError::DimensionMismatch(a.mean.len(), b.mean.len()));
    }
    let d = a.mean.len();
    let ridge = DMatrix::identity(d, d) * COV_REGULARIZER;
    let sa = &a.cov + &ridge;
    let sb = &b.cov + &ridge;
    let root_a = sym_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, EvalError> {
    frechet_from_stats(&FrechetStats::fit(a)?, &FrechetStats::fit(b)?)
}
