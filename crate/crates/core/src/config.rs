//! Pipeline configuration, read from a TOML file with one table per stage.
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::GcnConfig;
use crate::evt::Anchor;
use crate::noise::{LogRegConfig, UncertaintyMetric};
use crate::synth::SamplesPerId;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub knn: KnnSection,
    pub cluster: ClusterSection,
    pub evt: EvtSection,
    pub noise: NoiseSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthSection::default(),
            split: SplitSection::default(),
            knn: KnnSection::default(),
            cluster: ClusterSection::default(),
            evt: EvtSection::default(),
            noise: NoiseSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub num_ids: usize,
    pub samples_per_id: SamplesPerId,
    pub dim: usize,
    pub within_id_sigma: f64,
    pub nuisance_rank: usize,
    pub nuisance_sigma: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            num_ids: 250,
            samples_per_id: SamplesPerId::Fixed(20),
            dim: 32,
            within_id_sigma: 0.12,
            nuisance_rank: 6,
            nuisance_sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Fraction of non-overlap training identities that are labeled.
    pub labeled_id_fraction: f64,
    /// Fraction of training identities present in both splits.
    pub overlap_id_fraction: f64,
    /// Identities held out entirely for verification and identification.
    pub test_id_fraction: f64,
    /// Samples per test identity placed in the identification gallery.
    pub gallery_per_id: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            labeled_id_fraction: 0.5,
            overlap_id_fraction: 0.0,
            test_id_fraction: 0.2,
            gallery_per_id: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSection {
    pub k: usize,
    /// Explicit descending similarity thresholds; quantiles of the edge
    /// similarities when absent.
    pub thresholds: Option<Vec<f64>>,
    pub num_thresholds: usize,
    pub max_size: usize,
}

impl Default for KnnSection {
    fn default() -> Self {
        Self {
            k: 20,
            thresholds: None,
            num_thresholds: 16,
            max_size: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gcn,
    Kmeans,
    Hac,
    Dbscan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub algorithm: Algorithm,
    pub min_cluster_size: usize,
    /// Also run the classical baselines on the same features and report them.
    pub compare_baselines: bool,
    /// K for k-means; the number of identities among the clustered samples
    /// when absent.
    pub kmeans_k: Option<usize>,
    pub kmeans_iters: usize,
    /// Cosine distance; the default is Euclidean distance 0.85 between unit
    /// vectors (d^2 / 2).
    pub hac_threshold: f64,
    /// Cosine distance; Euclidean 0.8 between unit vectors.
    pub dbscan_eps: f64,
    pub dbscan_min_size: usize,
    pub gcn: GcnConfig,
    /// The purity regressor trains on out-of-fold features of the labeled
    /// split, from models fit to the other folds' identities. 0 or 1
    /// trains on the in-sample features instead.
    pub crossfit_folds: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gcn,
            min_cluster_size: 2,
            compare_baselines: false,
            kmeans_k: None,
            kmeans_iters: 50,
            hac_threshold: 0.36125,
            dbscan_eps: 0.32,
            dbscan_min_size: 2,
            gcn: GcnConfig::default(),
            crossfit_folds: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvtMode {
    /// Separate only when the split has overlapping identities.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvtSection {
    pub mode: EvtMode,
    pub n_bins: usize,
    pub confidence: f64,
    pub em_iterations: usize,
    pub anchor: Anchor,
    pub sse_bins: usize,
}

impl Default for EvtSection {
    fn default() -> Self {
        Self {
            mode: EvtMode::Auto,
            n_bins: crate::evt::DEFAULT_OTSU_BINS,
            confidence: 0.95,
            em_iterations: 0,
            anchor: Anchor::Likelihood,
            sse_bins: crate::evt::DEFAULT_SSE_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectMode {
    Outlier,
    SplitId,
    /// Outliers at half the rate, then splits of `rate` of the clusters.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub metric: UncertaintyMetric,
    pub gamma: f64,
    pub n_bins: usize,
    /// Structured noise added to the pseudo-labels before noise modeling.
    pub inject_rate: f64,
    pub inject_mode: InjectMode,
    pub logreg: LogRegConfig,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            metric: UncertaintyMetric::ClassMargin,
            gamma: 1.0,
            n_bins: crate::evt::DEFAULT_OTSU_BINS,
            inject_rate: 0.0,
            inject_mode: InjectMode::Mixed,
            logreg: LogRegConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub margin_m: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Which retrained variant drives a second clustering iteration.
    pub use_weights: bool,
    pub encoder: bool,
    /// 2 re-clusters the unlabeled data with the retrained features.
    pub iterations: usize,
    /// Experimental: add samples judged overlapping to the labeled set under
    /// the baseline head's argmax class.
    pub merge_overlap: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alpha: 16.0,
            margin_m: 0.35,
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            use_weights: true,
            encoder: true,
            iterations: 1,
            merge_overlap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fars: Vec<f64>,
    pub ks: Vec<usize>,
    pub pairs: PairProtocol,
    /// Cross-validated accuracy folds; 0 uses the single best threshold.
    pub folds: usize,
}

/// Which test pairs verification scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairProtocol {
    /// All positives plus an equal number of sampled negatives.
    Balanced,
    /// Every unordered pair (negatives dominate; accuracy saturates).
    AllPairs,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fars: vec![1e-3, 1e-4],
            ks: vec![1, 5],
            pairs: PairProtocol::Balanced,
            folds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Artifact directory (overridden by `--out`).
    pub out: Option<PathBuf>,
    /// External embeddings (EMB1 file) used instead of the synthetic harness.
    pub embeddings: Option<PathBuf>,
    /// Labels CSV for `embeddings`.
    pub labels: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, key: &'static str, message: impl Into<String>) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    message: message.into(),
                })
            }
        }
        let s = &self.split;
        check(
            s.labeled_id_fraction > 0.0 && s.labeled_id_fraction <= 1.0,
            "split.labeled_id_fraction",
            "must lie in (0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&s.overlap_id_fraction),
            "split.overlap_id_fraction",
            "must lie in [0, 1]",
        )?;
        check(
            s.test_id_fraction > 0.0 && s.test_id_fraction < 1.0,
            "split.test_id_fraction",
            "must lie in (0, 1)",
        )?;
        check(s.gallery_per_id >= 1, "split.gallery_per_id", "must be >= 1")?;
        check(self.knn.k >= 1, "knn.k", "must be >= 1")?;
        check(self.knn.num_thresholds >= 1, "knn.num_thresholds", "must be >= 1")?;
        check(self.knn.max_size >= 1, "knn.max_size", "must be >= 1")?;
        if let Some(t) = &self.knn.thresholds {
            check(
                !t.is_empty() && t.windows(2).all(|w| w[0] > w[1]),
                "knn.thresholds",
                "must be non-empty and strictly descending",
            )?;
        }
        check(
            self.cluster.min_cluster_size >= 1,
            "cluster.min_cluster_size",
            "must be >= 1",
        )?;
        check(self.cluster.dbscan_eps > 0.0, "cluster.dbscan_eps", "must be > 0")?;
        check(self.cluster.gcn.epochs >= 1, "cluster.gcn.epochs", "must be >= 1")?;
        check(
            self.evt.confidence > 0.5 && self.evt.confidence < 1.0,
            "evt.confidence",
            "must lie in (0.5, 1)",
        )?;
        check(self.evt.n_bins >= 2, "evt.n_bins", "must be >= 2")?;
        check(self.evt.sse_bins >= 2, "evt.sse_bins", "must be >= 2")?;
        check(self.noise.gamma >= 0.0, "noise.gamma", "must be >= 0")?;
        check(self.noise.n_bins >= 2, "noise.n_bins", "must be >= 2")?;
        check(
            (0.0..1.0).contains(&self.noise.inject_rate),
            "noise.inject_rate",
            "must lie in [0, 1)",
        )?;
        check(self.train.alpha > 0.0, "train.alpha", "must be > 0")?;
        check(
            (0.0..=1.0).contains(&self.train.margin_m),
            "train.margin_m",
            "must lie in [0, 1]",
        )?;
        check(self.train.lr > 0.0, "train.lr", "must be > 0")?;
        check(
            (1..=2).contains(&self.train.iterations),
            "train.iterations",
            "must be 1 or 2",
        )?;
        check(
            self.train.iterations == 1 || self.train.encoder,
            "train.iterations",
            "a second iteration needs train.encoder = true",
        )?;
        check(
            self.eval.fars.iter().all(|f| (0.0..=1.0).contains(f)),
            "eval.fars",
            "values must lie in [0, 1]",
        )?;
        check(self.eval.ks.iter().all(|&k| k >= 1), "eval.ks", "values must be >= 1")?;
        check(
            self.paths.embeddings.is_some() == self.paths.labels.is_some(),
            "paths",
            "embeddings and labels must be given together",
        )?;
        if self.paths.embeddings.is_none() {
            let synth = crate::synth::SynthConfig {
                num_ids: self.synth.num_ids,
                samples_per_id: self.synth.samples_per_id,
                dim: self.synth.dim,
                within_id_sigma: self.synth.within_id_sigma,
                nuisance_rank: self.synth.nuisance_rank,
                nuisance_sigma: self.synth.nuisance_sigma,
                seed: self.seed,
            };
            synth.validate().map_err(|e| ConfigError::Invalid {
                key: "synth",
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The configuration as echoed in reports: the output location is left
    /// out so that identical runs in different directories match.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(paths) = v.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("out");
        }
        v
    }
}
