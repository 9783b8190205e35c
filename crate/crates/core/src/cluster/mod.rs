//! Clustering engines: classical baselines, the proposal-purity GCN, and
//! the de-overlap step that turns scored proposals into a partition.

mod baselines;
mod gcn;

pub use baselines::{dbscan, hac, kmeans};
pub use gcn::{
    default_hidden, gcn_forward, gcn_mse, gcn_train, gradient_check as gcn_gradient_check, load_model, save_model,
    score_proposals, GcnConfig, GcnModel, ProposalScore,
};

use std::collections::HashMap;

use crate::data::{Clustering, DataError, LabelSet};
use crate::knn::ClusterProposal;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("K={k} out of range for n={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("embeddings must be L2-normalized")]
    NotNormalized,
    #[error("no proposals to train on")]
    NoProposals,
    #[error("{proposals} proposals but {scores} scores")]
    LengthMismatch { proposals: usize, scores: usize },
    #[error("proposal member {index} out of range for n={n}")]
    MemberOutOfRange { index: usize, n: usize },
    #[error("model dimension {model} does not match embeddings {embeddings}")]
    DimensionMismatch { model: usize, embeddings: usize },
    #[error("invalid model file: {0}")]
    BadModel(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// IoU and IoP of a proposal against its modal identity's full sample set.
pub fn proposal_targets(p: &ClusterProposal, labels: &LabelSet) -> (f64, f64) {
    if p.members.is_empty() {
        return (0.0, 0.0);
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &i in &p.members {
        *counts.entry(labels.get(i)).or_default() += 1;
    }
    let (modal, hit) = counts
        .iter()
        .map(|(&l, &c)| (l, c))
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap();
    let class_size = labels.labels().iter().filter(|&&l| l == modal).count();
    let union = p.members.len() + class_size - hit;
    (hit as f64 / union as f64, hit as f64 / p.members.len() as f64)
}

/// Greedy partition of overlapping proposals.
///
/// Proposals are visited by clamped `iou_pred` descending (larger first, then
/// lower index); each takes its not-yet-claimed members. Results smaller than
/// `min_cluster_size` are dropped and their members stay claimable.
pub fn deoverlap(
    proposals: &[ClusterProposal],
    scores: &[ProposalScore],
    min_cluster_size: usize,
    n: usize,
) -> Result<Clustering, ClusterError> {
    if proposals.len() != scores.len() {
        return Err(ClusterError::LengthMismatch {
            proposals: proposals.len(),
            scores: scores.len(),
        });
    }
    if let Some(&index) = proposals.iter().flat_map(|p| &p.members).find(|&&i| i >= n) {
        return Err(ClusterError::MemberOutOfRange { index, n });
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    let key = |i: usize| scores[i].iou_pred.clamp(0.0, 1.0);
    order.sort_by(|&a, &b| {
        key(b)
            .partial_cmp(&key(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(proposals[b].len().cmp(&proposals[a].len()))
            .then(a.cmp(&b))
    });
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in order {
        let rest: Vec<usize> = proposals[i]
            .members
            .iter()
            .copied()
            .filter(|&m| assignment[m].is_none())
            .collect();
        if rest.is_empty() || rest.len() < min_cluster_size {
            continue;
        }
        rest.iter().for_each(|&m| assignment[m] = Some(next));
        next += 1;
    }
    Ok(Clustering::new(assignment)?)
}
