//! Synthetic identity-structured embeddings.
//!
//! Stands in for a trained feature extractor: each identity has a prototype
//! drawn uniformly on the unit sphere, and each sample is the prototype plus
//! isotropic gaussian noise, optionally plus a "nuisance" component confined
//! to a low-rank subspace shared by all identities (pose/illumination-like
//! variation that a retrained encoder can learn to suppress), renormalized.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Clustering, DataError, EmbeddingSet, LabelSet};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("insufficient ids: {0}")]
    InsufficientIds(String),
    #[error("noise rate {0} outside [0, 1)")]
    RateOutOfRange(f64),
    #[error("outlier noise needs at least two clusters, found {0}")]
    TooFewClusters(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplesPerId {
    Fixed(usize),
    /// Long-tailed: log-uniform over `[min, max]`.
    Range([usize; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub samples_per_id: SamplesPerId,
    pub dim: usize,
    pub within_id_sigma: f64,
    /// Rank of the shared nuisance subspace (0 disables it).
    #[serde(default)]
    pub nuisance_rank: usize,
    #[serde(default)]
    pub nuisance_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_ids: usize, samples_per_id: usize, dim: usize, within_id_sigma: f64, seed: u64) -> Self {
        Self {
            num_ids,
            samples_per_id: SamplesPerId::Fixed(samples_per_id),
            dim,
            within_id_sigma,
            nuisance_rank: 0,
            nuisance_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.num_ids < 2 {
            return bad(format!("num_ids must be >= 2, got {}", self.num_ids));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if !(self.within_id_sigma >= 0.0) || !(self.nuisance_sigma >= 0.0) {
            return bad("sigmas must be >= 0".into());
        }
        if self.nuisance_rank > self.dim {
            return bad(format!("nuisance_rank {} exceeds dim {}", self.nuisance_rank, self.dim));
        }
        match self.samples_per_id {
            SamplesPerId::Fixed(0) => bad("samples_per_id must be >= 1".into()),
            SamplesPerId::Range([lo, hi]) if lo == 0 || lo > hi => {
                bad(format!("bad samples_per_id range [{lo}, {hi}]"))
            }
            _ => Ok(()),
        }
    }
}

fn gaussian_vec(rng: &mut rng::Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = crate::data::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Orthonormal `rank` columns in `dim` dimensions, returned as row vectors.
fn random_basis(rng: &mut rng::Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p = crate::data::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if crate::data::norm(&v) > 1e-8 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Draws identities and their samples. Identity `i` uses its own random
/// stream, so output is independent of thread count.
pub fn generate_identities(cfg: &SynthConfig) -> Result<(EmbeddingSet, LabelSet), SynthError> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut master = rng::stream(cfg.seed, 0);
    let counts: Vec<usize> = (0..cfg.num_ids)
        .map(|_| match cfg.samples_per_id {
            SamplesPerId::Fixed(m) => m,
            SamplesPerId::Range([lo, hi]) => {
                let (a, b) = ((lo as f64).ln(), ((hi + 1) as f64).ln());
                let v = master.random_range(a..b).exp().floor() as usize;
                v.clamp(lo, hi)
            }
        })
        .collect();
    let nuisance = if cfg.nuisance_rank > 0 && cfg.nuisance_sigma > 0.0 {
        random_basis(&mut rng::stream(cfg.seed, u64::MAX), d, cfg.nuisance_rank)
    } else {
        Vec::new()
    };

    let per_id: Vec<Vec<f64>> = (0..cfg.num_ids)
        .into_par_iter()
        .map(|id| {
            let mut r = rng::stream(cfg.seed, id as u64 + 1);
            let mut proto = gaussian_vec(&mut r, d);
            normalize(&mut proto);
            let mut rows = Vec::with_capacity(counts[id] * d);
            for _ in 0..counts[id] {
                let mut x = proto.clone();
                if cfg.within_id_sigma > 0.0 {
                    for v in x.iter_mut() {
                        let g: f64 = StandardNormal.sample(&mut r);
                        *v += cfg.within_id_sigma * g;
                    }
                }
                for b in &nuisance {
                    let z: f64 = StandardNormal.sample(&mut r);
                    x.iter_mut().zip(b).for_each(|(v, u)| *v += cfg.nuisance_sigma * z * u);
                }
                normalize(&mut x);
                rows.extend_from_slice(&x);
            }
            rows
        })
        .collect();

    let n: usize = counts.iter().sum();
    let rows = per_id.concat();
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(id, &m)| std::iter::repeat_n(id, m))
        .collect();
    let emb = EmbeddingSet::new_normalized(n, d, rows)?;
    Ok((emb, LabelSet::from_contiguous(labels)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labeled_id_fraction: f64,
    pub overlap_id_fraction: f64,
    pub seed: u64,
}

/// Labeled/unlabeled partition of sample indices (both sorted ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Aligned with `unlabeled`: the sample's identity also occurs in `labeled`.
    pub gt_overlap_mask: Vec<bool>,
    pub overlap_ids: Vec<usize>,
    pub labeled_only_ids: Vec<usize>,
    pub unlabeled_only_ids: Vec<usize>,
}

/// Partitions identities into overlap / labeled-only / unlabeled-only
/// groups. Overlap ids contribute half (rounded down) of their samples to
/// the labeled split.
pub fn make_overlap_split(labels: &LabelSet, spec: &SplitSpec) -> Result<OverlapSplit, SynthError> {
    let (fl, fo) = (spec.labeled_id_fraction, spec.overlap_id_fraction);
    if !(fl > 0.0 && fl <= 1.0) {
        return Err(SynthError::InvalidSplit(format!(
            "labeled_id_fraction {fl} outside (0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&fo) {
        return Err(SynthError::InvalidSplit(format!(
            "overlap_id_fraction {fo} outside [0, 1]"
        )));
    }
    let num_ids = labels.num_ids();
    let n_overlap = (fo * num_ids as f64).round() as usize;
    let rest = num_ids - n_overlap;
    let n_labeled_only = (fl * rest as f64).round() as usize;
    let n_unlabeled_only = rest - n_labeled_only;
    if fo > 0.0 && n_overlap == 0 {
        return Err(SynthError::InsufficientIds(format!(
            "overlap fraction {fo} of {num_ids} ids rounds to zero"
        )));
    }
    if rest > 0 && n_labeled_only == 0 {
        return Err(SynthError::InsufficientIds(format!(
            "labeled fraction {fl} of {rest} non-overlap ids rounds to zero"
        )));
    }
    if rest > 0 && fl < 1.0 && n_unlabeled_only == 0 {
        return Err(SynthError::InsufficientIds(format!(
            "unlabeled fraction {} of {rest} non-overlap ids rounds to zero",
            1.0 - fl
        )));
    }

    let mut r = rng::stream(spec.seed, 0);
    let mut ids: Vec<usize> = (0..num_ids).collect();
    ids.shuffle(&mut r);
    let mut overlap_ids = ids[..n_overlap].to_vec();
    let mut labeled_only_ids = ids[n_overlap..n_overlap + n_labeled_only].to_vec();
    let mut unlabeled_only_ids = ids[n_overlap + n_labeled_only..].to_vec();
    overlap_ids.sort_unstable();
    labeled_only_ids.sort_unstable();
    unlabeled_only_ids.sort_unstable();

    #[derive(Clone, Copy, PartialEq)]
    enum Group {
        Labeled,
        Overlap,
        Unlabeled,
    }
    let mut group = vec![Group::Unlabeled; num_ids];
    overlap_ids.iter().for_each(|&i| group[i] = Group::Overlap);
    labeled_only_ids.iter().for_each(|&i| group[i] = Group::Labeled);

    let mut members = vec![Vec::new(); num_ids];
    for (i, &l) in labels.labels().iter().enumerate() {
        members[l].push(i);
    }
    let mut is_labeled = vec![false; labels.len()];
    for (id, m) in members.iter_mut().enumerate() {
        match group[id] {
            Group::Labeled => m.iter().for_each(|&i| is_labeled[i] = true),
            Group::Unlabeled => {}
            Group::Overlap => {
                let mut r = rng::stream(spec.seed, id as u64 + 1);
                m.shuffle(&mut r);
                m[..m.len() / 2].iter().for_each(|&i| is_labeled[i] = true);
            }
        }
    }
    let labeled: Vec<usize> = (0..labels.len()).filter(|&i| is_labeled[i]).collect();
    let unlabeled: Vec<usize> = (0..labels.len()).filter(|&i| !is_labeled[i]).collect();
    let mut id_in_labeled = vec![false; num_ids];
    labeled.iter().for_each(|&i| id_in_labeled[labels.get(i)] = true);
    let gt_overlap_mask = unlabeled.iter().map(|&i| id_in_labeled[labels.get(i)]).collect();

    Ok(OverlapSplit {
        labeled,
        unlabeled,
        gt_overlap_mask,
        overlap_ids,
        labeled_only_ids,
        unlabeled_only_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Move samples into a different existing cluster.
    Outlier,
    /// Split clusters in half.
    SplitId,
}

/// Corrupts a (ground-truth derived) clustering with structured label noise.
/// Any noise probabilities on the input are dropped.
pub fn inject_label_noise(c: &Clustering, rate: f64, mode: NoiseMode, seed: u64) -> Result<Clustering, SynthError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SynthError::RateOutOfRange(rate));
    }
    let mut assignment = c.assignment().to_vec();
    let mut r = rng::stream(seed, mode as u64);
    match mode {
        NoiseMode::Outlier => {
            let mut assigned: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i].is_some()).collect();
            let count = (rate * assigned.len() as f64).floor() as usize;
            if count > 0 && c.num_clusters() < 2 {
                return Err(SynthError::TooFewClusters(c.num_clusters()));
            }
            assigned.shuffle(&mut r);
            for &i in &assigned[..count] {
                let old = assignment[i].unwrap();
                let mut new = r.random_range(0..c.num_clusters() - 1);
                if new >= old {
                    new += 1;
                }
                assignment[i] = Some(new);
            }
        }
        NoiseMode::SplitId => {
            let mut members = c.members();
            let count = (rate * c.num_clusters() as f64).floor() as usize;
            let mut chosen: Vec<usize> = (0..c.num_clusters()).collect();
            chosen.shuffle(&mut r);
            let mut next = c.num_clusters();
            for &k in &chosen[..count] {
                let m = &mut members[k];
                m.shuffle(&mut r);
                let moved = m.len() / 2;
                if moved == 0 {
                    continue;
                }
                m[..moved].iter().for_each(|&i| assignment[i] = Some(next));
                next += 1;
            }
        }
    }
    Ok(Clustering::new(assignment)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_cosines(emb: &EmbeddingSet, labels: &LabelSet) -> (f64, f64) {
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..emb.n() {
            for j in i + 1..emb.n() {
                let s = emb.dot(i, j);
                if labels.get(i) == labels.get(j) {
                    within += s;
                    nw += 1;
                } else {
                    cross += s;
                    nc += 1;
                }
            }
        }
        (within / nw as f64, cross / nc as f64)
    }

    #[test]
    fn zero_sigma_gives_prototypes() {
        let (emb, labels) = generate_identities(&SynthConfig::new(4, 5, 8, 0.0, 3)).unwrap();
        for i in 0..emb.n() {
            let first = labels.labels().iter().position(|&l| l == labels.get(i)).unwrap();
            assert_eq!(emb.row(i), emb.row(first));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = SynthConfig::new(10, 7, 16, 0.3, 42);
        cfg.nuisance_rank = 3;
        cfg.nuisance_sigma = 0.5;
        let a = generate_identities(&cfg).unwrap();
        let b = generate_identities(&cfg).unwrap();
        assert_eq!(a, b);
        for r in a.0.rows() {
            assert!((crate::data::norm(r) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn within_id_more_similar_than_cross_id() {
        let (emb, labels) = generate_identities(&SynthConfig::new(50, 40, 32, 0.25, 1)).unwrap();
        let (within, cross) = mean_cosines(&emb, &labels);
        assert!(within > cross, "within {within} cross {cross}");
    }

    #[test]
    fn long_tail_counts_within_range() {
        let mut cfg = SynthConfig::new(30, 1, 4, 0.1, 9);
        cfg.samples_per_id = SamplesPerId::Range([3, 40]);
        let (_, labels) = generate_identities(&cfg).unwrap();
        let mut counts = vec![0; labels.num_ids()];
        labels.labels().iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| (3..=40).contains(&c)));
        assert!(counts.iter().max() > counts.iter().min());
    }

    #[test]
    fn invalid_config() {
        assert!(generate_identities(&SynthConfig::new(1, 5, 8, 0.1, 0)).is_err());
        assert!(generate_identities(&SynthConfig::new(3, 5, 1, 0.1, 0)).is_err());
        assert!(generate_identities(&SynthConfig::new(3, 5, 4, -0.1, 0)).is_err());
    }

    fn labels_of(num_ids: usize, per: usize) -> LabelSet {
        LabelSet::from_contiguous((0..num_ids).flat_map(|i| std::iter::repeat_n(i, per)).collect())
    }

    fn brute_force_mask(labels: &LabelSet, split: &OverlapSplit) -> Vec<bool> {
        split
            .unlabeled
            .iter()
            .map(|&u| split.labeled.iter().any(|&l| labels.get(l) == labels.get(u)))
            .collect()
    }

    #[test]
    fn split_group_sizes() {
        let labels = labels_of(100, 6);
        let spec = SplitSpec {
            labeled_id_fraction: 0.5,
            overlap_id_fraction: 0.2,
            seed: 5,
        };
        let s = make_overlap_split(&labels, &spec).unwrap();
        assert_eq!(s.overlap_ids.len(), 20);
        assert_eq!(s.labeled_only_ids.len(), 40);
        assert_eq!(s.unlabeled_only_ids.len(), 40);
        assert_eq!(s.labeled.len(), 40 * 6 + 20 * 3);
        assert_eq!(s.gt_overlap_mask, brute_force_mask(&labels, &s));
        assert_eq!(s.gt_overlap_mask.iter().filter(|&&m| m).count(), 20 * 3);
    }

    #[test]
    fn split_degenerate_fractions() {
        let labels = labels_of(10, 4);
        let disjoint = make_overlap_split(
            &labels,
            &SplitSpec {
                labeled_id_fraction: 0.5,
                overlap_id_fraction: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert!(disjoint.gt_overlap_mask.iter().all(|&m| !m));

        let all = make_overlap_split(
            &labels,
            &SplitSpec {
                labeled_id_fraction: 1.0,
                overlap_id_fraction: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        assert!(!all.unlabeled.is_empty());
        assert!(all.gt_overlap_mask.iter().all(|&m| m));

        let err = make_overlap_split(
            &labels,
            &SplitSpec {
                labeled_id_fraction: 0.5,
                overlap_id_fraction: 0.01,
                seed: 1,
            },
        );
        assert!(matches!(err, Err(SynthError::InsufficientIds(_))));
    }

    #[test]
    fn noise_rate_zero_is_identity() {
        let c = Clustering::from_labels(&labels_of(10, 10));
        for mode in [NoiseMode::Outlier, NoiseMode::SplitId] {
            assert_eq!(inject_label_noise(&c, 0.0, mode, 1).unwrap(), c);
        }
        assert!(matches!(
            inject_label_noise(&c, 1.0, NoiseMode::Outlier, 1),
            Err(SynthError::RateOutOfRange(_))
        ));
    }

    #[test]
    fn split_id_moves_half() {
        let c = Clustering::from_labels(&labels_of(10, 10));
        let noisy = inject_label_noise(&c, 0.1, NoiseMode::SplitId, 3).unwrap();
        assert_eq!(noisy.num_clusters(), 11);
        let moved = (0..100).filter(|&i| noisy.get(i) != c.get(i)).count();
        assert_eq!(moved, 5);
        assert_eq!(noisy.sizes()[10], 5);
    }

    #[test]
    fn outlier_changes_exact_count() {
        let c = Clustering::from_labels(&labels_of(10, 10));
        let noisy = inject_label_noise(&c, 0.2, NoiseMode::Outlier, 3).unwrap();
        let changed = (0..100).filter(|&i| noisy.get(i) != c.get(i)).count();
        assert_eq!(changed, 20);
        assert_eq!(noisy.num_clusters(), 10);
    }

    proptest::proptest! {
        #[test]
        fn split_is_partition(num_ids in 4usize..40, per in 1usize..6,
                              fl in 0.2f64..1.0, fo in 0.0f64..0.6, seed in 0u64..100) {
            let labels = labels_of(num_ids, per);
            let spec = SplitSpec { labeled_id_fraction: fl, overlap_id_fraction: fo, seed };
            if let Ok(s) = make_overlap_split(&labels, &spec) {
                let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).copied().collect();
                all.sort_unstable();
                proptest::prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
                proptest::prop_assert_eq!(&s.gt_overlap_mask, &brute_force_mask(&labels, &s));
            }
        }
    }
}
