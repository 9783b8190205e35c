//! Uncertainty of cluster assignments.
//!
//! A multinomial logistic regression is fitted to the pseudo-labels; samples
//! it cannot fit confidently are likely mis-clustered. The confidence signal
//! (class margin by default) is bimodal, and a Weibull fitted to its lower
//! mode turns each sample's score into a probability `p_minus` that its
//! pseudo-label is wrong.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{dot, Clustering, EmbeddingSet, LabelSet};
use crate::evt::{self, EvtError, WeibullParams};
use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeadError {
    #[error("dimension mismatch: head expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite weights")]
    NonFinite,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NoiseError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("need at least 2 clusters to fit a classifier, got {0}")]
    TooFewClusters(usize),
    #[error("clustering covers {clustering} samples, embeddings {embeddings}")]
    LengthMismatch { clustering: usize, embeddings: usize },
    #[error("no positive samples")]
    NoPositives,
    #[error(transparent)]
    Evt(#[from] EvtError),
}

/// `num_classes x dim` weight matrix, row-major, with optional bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    num_classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl LinearHead {
    pub fn new(num_classes: usize, dim: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self, HeadError> {
        if num_classes < 1 {
            return Err(HeadError::TooFewClasses(num_classes));
        }
        if weights.len() != num_classes * dim {
            return Err(HeadError::DimensionMismatch {
                expected: num_classes * dim,
                got: weights.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != num_classes {
                return Err(HeadError::DimensionMismatch {
                    expected: num_classes,
                    got: b.len(),
                });
            }
        }
        if weights.iter().chain(bias.iter().flatten()).any(|w| !w.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        Ok(Self {
            num_classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, HeadError> {
        let dim = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), dim, rows.concat(), None)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn check_dim(&self, d: usize) -> Result<(), HeadError> {
        if d == self.dim {
            Ok(())
        } else {
            Err(HeadError::DimensionMismatch {
                expected: self.dim,
                got: d,
            })
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| dot(self.row(k), x) + self.bias.as_ref().map_or(0.0, |b| b[k]))
            .collect()
    }

    /// Rescales every row to unit L2 norm (zero rows are left alone).
    pub fn normalize_rows(&mut self) {
        for row in self.weights.chunks_exact_mut(self.dim) {
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|w| *w /= n);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        if let Some(b) = &mut self.bias {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 16.0,
            l2: 1e-5,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Mean softmax cross-entropy plus `l2/2 * |W|^2`, and its gradient with
/// respect to the weights (same layout as `LinearHead::weights`).
pub fn logreg_loss_and_grad(head: &LinearHead, xs: &[&[f64]], ys: &[usize], l2: f64) -> (f64, Vec<f64>) {
    let d = head.dim;
    let mut grad = vec![0.0; head.weights.len()];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let p = softmax(&head.logits(x));
        loss -= p[y].max(1e-300).ln();
        for (k, pk) in p.iter().enumerate() {
            let g = pk - if k == y { 1.0 } else { 0.0 };
            grad[k * d..(k + 1) * d]
                .iter_mut()
                .zip(x.iter())
                .for_each(|(gw, xv)| *gw += g * xv);
        }
    }
    let n = xs.len().max(1) as f64;
    grad.iter_mut()
        .zip(&head.weights)
        .for_each(|(g, w)| *g = *g / n + l2 * w);
    let reg = 0.5 * l2 * head.weights.iter().map(|w| w * w).sum::<f64>();
    (loss / n + reg, grad)
}

fn assigned_training_set<'a>(
    emb: &'a EmbeddingSet,
    c: &Clustering,
) -> Result<(Vec<&'a [f64]>, Vec<usize>), NoiseError> {
    if c.len() != emb.n() {
        return Err(NoiseError::LengthMismatch {
            clustering: c.len(),
            embeddings: emb.n(),
        });
    }
    if c.num_clusters() < 2 {
        return Err(NoiseError::TooFewClusters(c.num_clusters()));
    }
    Ok(c.assignment()
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|k| (emb.row(i), k)))
        .unzip())
}

/// Mean cross-entropy of the head on the assigned samples of `c`.
pub fn logreg_loss(head: &LinearHead, emb: &EmbeddingSet, c: &Clustering) -> Result<f64, NoiseError> {
    let (xs, ys) = assigned_training_set(emb, c)?;
    Ok(logreg_loss_and_grad(head, &xs, &ys, 0.0).0)
}

/// Multinomial logistic regression on the cluster assignments by mini-batch
/// gradient descent. Unassigned samples are skipped; no bias.
pub fn train_linear_classifier(
    emb: &EmbeddingSet,
    c: &Clustering,
    cfg: &LogRegConfig,
) -> Result<LinearHead, NoiseError> {
    let (xs, ys) = assigned_training_set(emb, c)?;
    let mut head = LinearHead::zeros(c.num_clusters(), emb.d());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        for chunk in order.chunks(batch) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i]).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let (_, grad) = logreg_loss_and_grad(&head, &bx, &by, cfg.l2);
            head.weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= cfg.lr * g);
        }
    }
    Ok(head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMetric {
    Entropy,
    MaxLogit,
    ClassMargin,
}

impl UncertaintyMetric {
    pub const ALL: [Self; 3] = [Self::ClassMargin, Self::MaxLogit, Self::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::MaxLogit => "max_logit",
            Self::ClassMargin => "class_margin",
        }
    }
}

fn top_two(v: &[f64]) -> (f64, f64) {
    let mut a = f64::NEG_INFINITY;
    let mut b = f64::NEG_INFINITY;
    for &x in v {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    (a, b)
}

pub fn metric_from_logits(logits: &[f64], metric: UncertaintyMetric) -> f64 {
    match metric {
        UncertaintyMetric::Entropy => softmax(logits).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum(),
        UncertaintyMetric::MaxLogit => top_two(logits).0,
        UncertaintyMetric::ClassMargin => {
            let (a, b) = top_two(logits);
            a - b
        }
    }
}

/// Raw metric per sample: entropy in nats, largest logit, or largest minus
/// second-largest logit.
pub fn uncertainty_scores(
    head: &LinearHead,
    emb: &EmbeddingSet,
    metric: UncertaintyMetric,
) -> Result<Vec<f64>, NoiseError> {
    head.check_dim(emb.d())?;
    if metric == UncertaintyMetric::ClassMargin && head.num_classes() < 2 {
        return Err(HeadError::TooFewClasses(head.num_classes()).into());
    }
    Ok(emb
        .rows()
        .map(|x| metric_from_logits(&head.logits(x), metric))
        .collect())
}

/// Scores oriented so that higher means "assignment more likely correct"
/// (entropy is negated).
pub fn confidence_scores(
    head: &LinearHead,
    emb: &EmbeddingSet,
    metric: UncertaintyMetric,
) -> Result<Vec<f64>, NoiseError> {
    let s = uncertainty_scores(head, emb, metric)?;
    Ok(match metric {
        UncertaintyMetric::Entropy => s.into_iter().map(|v| -v).collect(),
        _ => s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub metric: UncertaintyMetric,
    pub otsu_t: f64,
    pub wb_low: WeibullParams,
}

/// Otsu split of the confidence scores, then a Weibull on the lower side.
pub fn fit_noise_model(scores: &[f64], metric: UncertaintyMetric, n_bins: usize) -> Result<NoiseModel, NoiseError> {
    let otsu_t = evt::otsu_threshold(scores, n_bins)?;
    let (below, above) = evt::split_at(scores, otsu_t);
    if below.len() < evt::MIN_FIT_SAMPLES || above.len() < evt::MIN_FIT_SAMPLES {
        return Err(EvtError::OneSidedData {
            low: below.len(),
            high: above.len(),
            needed: evt::MIN_FIT_SAMPLES,
        }
        .into());
    }
    Ok(NoiseModel {
        metric,
        otsu_t,
        wb_low: evt::weibull_fit_mle(&below)?,
    })
}

/// Survival function of the lower-mode Weibull at `score`.
pub fn p_minus(m: &NoiseModel, score: f64) -> f64 {
    m.wb_low.survival(score).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTag {
    Correct,
    /// Identity differs from the cluster's modal identity.
    Outlier,
    /// Identity's sample lies outside the cluster holding most of that identity.
    SplitId,
}

fn argmax_count(counts: &std::collections::BTreeMap<usize, usize>) -> usize {
    // BTreeMap iterates keys ascending; strict > keeps the smaller key on ties.
    let mut best = (0usize, 0usize);
    for (&key, &count) in counts {
        if count > best.1 {
            best = (key, count);
        }
    }
    best.0
}

/// Ground-truth diagnosis of each assigned sample; `None` for unassigned.
pub fn label_cluster_errors(c: &Clustering, labels: &LabelSet) -> Vec<Option<ErrorTag>> {
    use std::collections::BTreeMap;
    let mut per_cluster: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); c.num_clusters()];
    let mut per_id: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); labels.num_ids()];
    for (i, a) in c.assignment().iter().enumerate() {
        if let Some(k) = *a {
            *per_cluster[k].entry(labels.get(i)).or_default() += 1;
            *per_id[labels.get(i)].entry(k).or_default() += 1;
        }
    }
    let modal: Vec<usize> = per_cluster.iter().map(argmax_count).collect();
    let true_cluster: Vec<Option<usize>> = per_id
        .iter()
        .map(|m| if m.is_empty() { None } else { Some(argmax_count(m)) })
        .collect();
    c.assignment()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            a.map(|k| {
                let l = labels.get(i);
                if modal[k] != l {
                    ErrorTag::Outlier
                } else if true_cluster[l] != Some(k) {
                    ErrorTag::SplitId
                } else {
                    ErrorTag::Correct
                }
            })
        })
        .collect()
}

/// Mean precision at the rank of each positive, ranking by score descending
/// with ties kept in index order.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64, NoiseError> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(NoiseError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / total as f64)
}
