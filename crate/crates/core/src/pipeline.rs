//! Staged pipeline over an artifact directory.
//!
//! Every stage reads what earlier stages wrote and persists its own outputs,
//! so running the stages one by one and running them all in a single process
//! produce the same files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{self, GcnConfig};
use crate::config::{Algorithm, EvtMode, InjectMode, PairProtocol, PipelineConfig};
use crate::data::{self, Clustering, EmbeddingSet, LabelSet};
use crate::eval::{self, VerificationProtocol};
use crate::evt::{self, Decision, EvtError, MixtureOptions};
use crate::knn::{self, ClusterProposal, KnnGraph};
use crate::noise::{self, ErrorTag, LogRegConfig, NoiseError, UncertaintyMetric};
use crate::rng;
use crate::synth::{self, NoiseMode, SplitSpec, SynthConfig};
use crate::train::{self, LossConfig, PseudoSet, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Separate,
    Cluster,
    Noise,
    Retrain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Gen,
        Stage::Separate,
        Stage::Cluster,
        Stage::Noise,
        Stage::Retrain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Separate => "separate",
            Stage::Cluster => "cluster",
            Stage::Noise => "noise",
            Stage::Retrain => "retrain",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: missing artifact {path} (run the earlier stages first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::MissingArtifact { stage, .. } | PipelineError::Stage { stage, .. } => stage,
        }
    }
}

fn fail<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage: stage.name(),
        message: e.to_string(),
    }
}

pub mod artifact {
    pub const EMBEDDINGS: &str = "embeddings.emb";
    pub const LABELS: &str = "labels.csv";
    pub const SPLIT: &str = "split.json";
    pub const BASELINE: &str = "model_baseline.bin";
    pub const HARD: &str = "model_hard.bin";
    pub const SOFT: &str = "model_soft.bin";
    pub const DECISIONS: &str = "separation.csv";
    pub const MIXTURE: &str = "mixture.json";
    pub const GCN: &str = "gcn.bin";
    pub const PSEUDO: &str = "pseudo_labels.csv";
    pub const PSEUDO_PMINUS: &str = "pseudo_labels_pminus.csv";
    pub const NOISE_MODEL: &str = "noise_model.json";
    pub const REPORT: &str = "report.json";
}

pub fn stage_summary_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("stage_{}.json", stage.name()))
}

fn require(out: &Path, stage: Stage, name: &str) -> Result<PathBuf, PipelineError> {
    let path = out.join(name);
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact {
            stage: stage.name(),
            path,
        })
    }
}

fn write_json(path: &Path, v: &impl Serialize, stage: Stage) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(v).map_err(fail(stage))?;
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::Stage {
        stage: stage.name(),
        message: format!("{}: {e}", path.display()),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(out: &Path, stage: Stage, name: &str) -> Result<T, PipelineError> {
    let path = require(out, stage, name)?;
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Stage {
        stage: stage.name(),
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
        stage: stage.name(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Seed tags for the per-stage random streams.
mod tag {
    pub const SPLIT: u64 = 2;
    pub const TEST_IDS: u64 = 3;
    pub const BASELINE: u64 = 4;
    pub const GCN: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const LOGREG: u64 = 7;
    pub const INJECT: u64 = 8;
    pub const RETRAIN: u64 = 9;
    pub const ITER2: u64 = 10;
    pub const CROSSFIT: u64 = 11;
    pub const CROSSFIT2: u64 = 12;
    pub const PAIRS: u64 = 13;
}

/// Sample indices of each role, all into `embeddings.emb`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Aligned with `unlabeled`.
    pub gt_overlap_mask: Vec<bool>,
    pub test_gallery: Vec<usize>,
    pub test_probe: Vec<usize>,
}

impl SplitIndex {
    pub fn test(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.test_gallery.iter().chain(&self.test_probe).copied().collect();
        t.sort_unstable();
        t
    }
}

/// Everything `gen` persisted, reloaded and renormalized.
pub struct Dataset {
    pub emb: EmbeddingSet,
    pub labels: LabelSet,
    pub split: SplitIndex,
}

impl Dataset {
    pub fn part(&self, idx: &[usize]) -> (EmbeddingSet, LabelSet) {
        (
            self.emb.subset(idx).expect("indices from split"),
            self.labels.subset(idx),
        )
    }
}

pub fn load_dataset(out: &Path, stage: Stage) -> Result<Dataset, PipelineError> {
    let emb_path = require(out, stage, artifact::EMBEDDINGS)?;
    let lab_path = require(out, stage, artifact::LABELS)?;
    let emb = data::load_embeddings(&emb_path).map_err(fail(stage))?;
    let emb = data::l2_normalize(&emb).map_err(fail(stage))?;
    let labels = data::load_labels(&lab_path).map_err(fail(stage))?;
    let split: SplitIndex = read_json(out, stage, artifact::SPLIT)?;
    Ok(Dataset { emb, labels, split })
}

fn stage_seed(cfg: &PipelineConfig, t: u64) -> u64 {
    rng::derive(cfg.seed, t)
}

fn train_config(cfg: &PipelineConfig, seed: u64, use_weights: bool) -> TrainConfig {
    TrainConfig {
        loss: LossConfig {
            alpha: cfg.train.alpha,
            margin_m: cfg.train.margin_m,
            gamma: cfg.noise.gamma,
        },
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        momentum: cfg.train.momentum,
        batch_size: cfg.train.batch_size,
        seed,
        use_weights,
        encoder: cfg.train.encoder,
    }
}

fn features(model: &TrainedModel, emb: &EmbeddingSet) -> EmbeddingSet {
    match train::embed(model, emb) {
        Ok(e) => e,
        Err(_) => emb.clone(),
    }
}

fn prf_json(p: &eval::Prf) -> Value {
    json!({"precision": p.precision, "recall": p.recall, "f1": p.f1})
}

fn clustering_json(c: &Clustering, labels: &LabelSet) -> Value {
    json!({
        "pairwise": prf_json(&eval::pairwise_prf(c, labels)),
        "bcubed": prf_json(&eval::bcubed_prf(c, labels)),
        "coverage": c.coverage(),
        "num_clusters": c.num_clusters(),
    })
}

// ---------------------------------------------------------------- gen

fn stage_gen(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Gen;
    let (emb, labels) = match (&cfg.paths.embeddings, &cfg.paths.labels) {
        (Some(e), Some(l)) => {
            let emb = data::load_embeddings(e).map_err(fail(st))?;
            let labels = data::load_labels(l).map_err(fail(st))?;
            if labels.len() != emb.n() {
                return Err(PipelineError::Stage {
                    stage: st.name(),
                    message: format!(
                        "{} has {} rows, {} has {}",
                        e.display(),
                        emb.n(),
                        l.display(),
                        labels.len()
                    ),
                });
            }
            (data::l2_normalize(&emb).map_err(fail(st))?, labels)
        }
        _ => {
            let s = &cfg.synth;
            synth::generate_identities(&SynthConfig {
                num_ids: s.num_ids,
                samples_per_id: s.samples_per_id,
                dim: s.dim,
                within_id_sigma: s.within_id_sigma,
                nuisance_rank: s.nuisance_rank,
                nuisance_sigma: s.nuisance_sigma,
                seed: cfg.seed,
            })
            .map_err(fail(st))?
        }
    };

    let num_ids = labels.num_ids();
    let n_test = ((cfg.split.test_id_fraction * num_ids as f64).round() as usize).clamp(1, num_ids.saturating_sub(2));
    if num_ids < 3 {
        return Err(PipelineError::Stage {
            stage: st.name(),
            message: format!("need at least 3 identities, got {num_ids}"),
        });
    }
    let mut ids: Vec<usize> = (0..num_ids).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng::stream(stage_seed(cfg, tag::TEST_IDS), 0));
    let mut is_test = vec![false; num_ids];
    ids[..n_test].iter().for_each(|&i| is_test[i] = true);

    let pool: Vec<usize> = (0..emb.n()).filter(|&i| !is_test[labels.get(i)]).collect();
    let pool_labels = labels.subset(&pool);
    let split = synth::make_overlap_split(
        &pool_labels,
        &SplitSpec {
            labeled_id_fraction: cfg.split.labeled_id_fraction,
            overlap_id_fraction: cfg.split.overlap_id_fraction,
            seed: stage_seed(cfg, tag::SPLIT),
        },
    )
    .map_err(fail(st))?;

    let mut seen = vec![0usize; num_ids];
    let (mut gallery, mut probe) = (Vec::new(), Vec::new());
    for i in 0..emb.n() {
        let l = labels.get(i);
        if is_test[l] {
            if seen[l] < cfg.split.gallery_per_id {
                gallery.push(i);
            } else {
                probe.push(i);
            }
            seen[l] += 1;
        }
    }
    let index = SplitIndex {
        labeled: split.labeled.iter().map(|&i| pool[i]).collect(),
        unlabeled: split.unlabeled.iter().map(|&i| pool[i]).collect(),
        gt_overlap_mask: split.gt_overlap_mask.clone(),
        test_gallery: gallery,
        test_probe: probe,
    };
    if index.labeled.is_empty() || index.unlabeled.is_empty() || index.test_probe.is_empty() {
        return Err(PipelineError::Stage {
            stage: st.name(),
            message: "split leaves the labeled, unlabeled or probe set empty".into(),
        });
    }

    data::save_embeddings(&emb, &out.join(artifact::EMBEDDINGS)).map_err(fail(st))?;
    data::save_labels(&labels, &out.join(artifact::LABELS)).map_err(fail(st))?;
    write_json(&out.join(artifact::SPLIT), &index, st)?;

    // domain gap between the labeled and unlabeled splits, on the reloaded data
    let ds = load_dataset(out, st)?;
    let (le, _) = ds.part(&ds.split.labeled);
    let (ue, _) = ds.part(&ds.split.unlabeled);
    let frechet = eval::frechet_distance(&le, &ue).map_err(fail(st))?;
    Ok(json!({
        "num_samples": emb.n(),
        "dim": emb.d(),
        "num_ids": num_ids,
        "test_ids": n_test,
        "labeled_samples": index.labeled.len(),
        "unlabeled_samples": index.unlabeled.len(),
        "overlap_ids": split.overlap_ids.len(),
        "labeled_only_ids": split.labeled_only_ids.len(),
        "unlabeled_only_ids": split.unlabeled_only_ids.len(),
        "unlabeled_overlap_samples": index.gt_overlap_mask.iter().filter(|&&m| m).count(),
        "gallery_samples": index.test_gallery.len(),
        "probe_samples": index.test_probe.len(),
        "frechet_labeled_unlabeled": frechet,
    }))
}

// ---------------------------------------------------------------- separate

fn evt_active(cfg: &PipelineConfig) -> bool {
    match cfg.evt.mode {
        EvtMode::On => true,
        EvtMode::Off => false,
        EvtMode::Auto => cfg.split.overlap_id_fraction > 0.0,
    }
}

/// False-positive rate (disjoint judged overlap) and false-negative rate
/// (overlap judged disjoint); rejected samples count as neither.
pub fn separation_errors(decisions: &[Decision], gt_overlap: &[bool]) -> (f64, f64) {
    let disjoint = gt_overlap.iter().filter(|&&m| !m).count();
    let overlap = gt_overlap.len() - disjoint;
    let fp = decisions
        .iter()
        .zip(gt_overlap)
        .filter(|(d, &m)| !m && **d == Decision::Overlap)
        .count();
    let fneg = decisions
        .iter()
        .zip(gt_overlap)
        .filter(|(d, &m)| m && **d == Decision::Disjoint)
        .count();
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (rate(fp, disjoint), rate(fneg, overlap))
}

fn decisions_csv(decisions: &[Decision]) -> String {
    let mut s = String::from("index,decision\n");
    for (i, d) in decisions.iter().enumerate() {
        let name = match d {
            Decision::Disjoint => "disjoint",
            Decision::Overlap => "overlap",
            Decision::Rejected => "rejected",
        };
        s.push_str(&format!("{i},{name}\n"));
    }
    s
}

fn load_decisions(out: &Path, stage: Stage, n: usize) -> Result<Vec<Decision>, PipelineError> {
    let path = require(out, stage, artifact::DECISIONS)?;
    let text = std::fs::read_to_string(&path).map_err(fail(stage))?;
    let bad = |m: String| PipelineError::Stage {
        stage: stage.name(),
        message: format!("{}: {m}", path.display()),
    };
    let mut out = Vec::with_capacity(n);
    for (line, row) in text.lines().skip(1).enumerate() {
        let (idx, name) = row
            .split_once(',')
            .ok_or_else(|| bad(format!("line {}: malformed", line + 2)))?;
        if idx.parse::<usize>().ok() != Some(line) {
            return Err(bad(format!("line {}: index out of order", line + 2)));
        }
        out.push(match name {
            "disjoint" => Decision::Disjoint,
            "overlap" => Decision::Overlap,
            "rejected" => Decision::Rejected,
            other => return Err(bad(format!("line {}: unknown decision {other:?}", line + 2))),
        });
    }
    if out.len() != n {
        return Err(bad(format!("{} decisions for {n} unlabeled samples", out.len())));
    }
    Ok(out)
}

fn stage_separate(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Separate;
    let ds = load_dataset(out, st)?;
    let (le, ll) = ds.part(&ds.split.labeled);
    let tc = train_config(cfg, stage_seed(cfg, tag::BASELINE), false);
    let baseline = train::train_head((&le, &ll), None, &tc).map_err(fail(st))?;
    train::save_trained(&baseline, &out.join(artifact::BASELINE)).map_err(fail(st))?;
    let baseline = train::load_trained(&out.join(artifact::BASELINE)).map_err(fail(st))?;

    let (ue, _) = ds.part(&ds.split.unlabeled);
    let gt = &ds.split.gt_overlap_mask;
    let mut metrics = serde_json::Map::new();
    metrics.insert("active".into(), json!(evt_active(cfg)));
    let decisions = if evt_active(cfg) {
        let uf = features(&baseline, &ue);
        let z = evt::max_logits(&baseline.head, &uf).map_err(fail(st))?;
        let mean_of = |want: bool| {
            let v: Vec<f64> = z.iter().zip(gt).filter(|(_, &m)| m == want).map(|(s, _)| *s).collect();
            if v.is_empty() {
                Value::Null
            } else {
                json!(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        metrics.insert("mean_max_logit_overlap".into(), mean_of(true));
        metrics.insert("mean_max_logit_disjoint".into(), mean_of(false));
        let opts = MixtureOptions {
            n_bins: cfg.evt.n_bins,
            confidence: cfg.evt.confidence,
            em_iterations: cfg.evt.em_iterations,
            anchor: cfg.evt.anchor,
        };
        match evt::fit_two_weibull_mixture(&z, &opts) {
            Ok(mix) => {
                let decisions = evt::separate_overlap(&z, &mix);
                let naive = evt::separate_at_threshold(&z, mix.otsu_t);
                let (fp, fneg) = separation_errors(&decisions, gt);
                let (nfp, nfn) = separation_errors(&naive, gt);
                let sse_w = evt::fit_sse(&mix.density(), &z, cfg.evt.sse_bins).map_err(fail(st))?;
                let sse_g =
                    evt::fit_sse(&evt::gaussian_mixture_at(&z, mix.otsu_t), &z, cfg.evt.sse_bins).map_err(fail(st))?;
                write_json(&out.join(artifact::MIXTURE), &mix, st)?;
                metrics.insert("overlap_detected".into(), json!(true));
                metrics.insert(
                    "weibull".into(),
                    json!({"false_positive_rate": fp, "false_negative_rate": fneg, "sse": sse_w,
                           "lower_cut": mix.lower_cut, "upper_cut": mix.upper_cut, "otsu_t": mix.otsu_t}),
                );
                metrics.insert(
                    "naive_otsu".into(),
                    json!({"false_positive_rate": nfp, "false_negative_rate": nfn}),
                );
                metrics.insert("gaussian".into(), json!({"sse": sse_g}));
                decisions
            }
            Err(EvtError::OneSidedData { .. }) => {
                metrics.insert("overlap_detected".into(), json!(false));
                vec![Decision::Disjoint; ue.n()]
            }
            Err(e) => return Err(fail(st)(e)),
        }
    } else {
        vec![Decision::Disjoint; ue.n()]
    };
    std::fs::write(out.join(artifact::DECISIONS), decisions_csv(&decisions)).map_err(fail(st))?;
    let count = |d: Decision| decisions.iter().filter(|&&x| x == d).count();
    metrics.insert("disjoint".into(), json!(count(Decision::Disjoint)));
    metrics.insert("overlap".into(), json!(count(Decision::Overlap)));
    metrics.insert("rejected".into(), json!(count(Decision::Rejected)));
    Ok(Value::Object(metrics))
}

// ---------------------------------------------------------------- cluster

fn thresholds_for(cfg: &PipelineConfig, g: &KnnGraph) -> Vec<f64> {
    cfg.knn
        .thresholds
        .clone()
        .unwrap_or_else(|| knn::default_thresholds(g, cfg.knn.num_thresholds))
}

fn proposals_for(
    cfg: &PipelineConfig,
    emb: &EmbeddingSet,
    st: Stage,
) -> Result<(KnnGraph, Vec<ClusterProposal>), PipelineError> {
    let k = cfg.knn.k.min(emb.n().saturating_sub(1)).max(1);
    let g = knn::build_knn_graph(emb, k).map_err(fail(st))?;
    let th = thresholds_for(cfg, &g);
    let p = knn::proposals_from_thresholds(&g, &th, cfg.knn.max_size).map_err(fail(st))?;
    Ok((g, p))
}

/// Labeled features for training the purity regressor. With cross-fitting,
/// identities are dealt into folds and each fold is embedded by a model
/// trained without it, so the regressor sees features of unseen identities.
fn regressor_features<F>(
    cfg: &PipelineConfig,
    le: &EmbeddingSet,
    ll: &LabelSet,
    in_sample: &TrainedModel,
    fit: F,
) -> Result<EmbeddingSet, PipelineError>
where
    F: Fn(&EmbeddingSet, &LabelSet, usize) -> Result<TrainedModel, PipelineError>,
{
    let folds = cfg.cluster.crossfit_folds;
    if folds < 2 || ll.num_ids() < folds {
        return Ok(features(in_sample, le));
    }
    let mut rows = vec![0.0; le.n() * le.d()];
    for f in 0..folds {
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..le.n()).partition(|&i| ll.get(i) % folds == f);
        let m = fit(&le.subset(&outside).expect("fold indices"), &ll.subset(&outside), f)?;
        let emb = features(&m, &le.subset(&inside).expect("fold indices"));
        for (r, &i) in inside.iter().enumerate() {
            rows[i * le.d()..(i + 1) * le.d()].copy_from_slice(emb.row(r));
        }
    }
    EmbeddingSet::new_normalized(le.n(), le.d(), rows).map_err(fail(Stage::Cluster))
}

/// GCN clustering: train the purity regressor on labeled features, then
/// score and de-overlap proposals on the target features.
fn gcn_cluster(
    cfg: &PipelineConfig,
    labeled: (&EmbeddingSet, &LabelSet),
    target: &EmbeddingSet,
    seed: u64,
    st: Stage,
    save: Option<&Path>,
) -> Result<(Clustering, Value), PipelineError> {
    let (lg, lp) = proposals_for(cfg, labeled.0, st)?;
    let gc = GcnConfig {
        seed,
        ..cfg.cluster.gcn
    };
    let mut model = cluster::gcn_train(&lp, labeled.0, &lg, labeled.1, &gc).map_err(fail(st))?;
    if let Some(path) = save {
        cluster::save_model(&model, path).map_err(fail(st))?;
        model = cluster::load_model(path).map_err(fail(st))?;
    }
    let train_mse = cluster::gcn_mse(&model, &lp, labeled.0, &lg, labeled.1).map_err(fail(st))?;
    let (tg, tp) = proposals_for(cfg, target, st)?;
    let scores = cluster::score_proposals(&model, &tp, target, &tg).map_err(fail(st))?;
    let c = cluster::deoverlap(&tp, &scores, cfg.cluster.min_cluster_size, target.n()).map_err(fail(st))?;
    Ok((
        c,
        json!({"train_proposals": lp.len(), "train_mse": train_mse, "proposals": tp.len()}),
    ))
}

fn run_algorithm(
    alg: Algorithm,
    cfg: &PipelineConfig,
    labeled: (&EmbeddingSet, &LabelSet),
    target: &EmbeddingSet,
    target_ids: usize,
    st: Stage,
    save: Option<&Path>,
) -> Result<(Clustering, Value), PipelineError> {
    let c = &cfg.cluster;
    match alg {
        Algorithm::Gcn => gcn_cluster(cfg, labeled, target, stage_seed(cfg, tag::GCN), st, save),
        Algorithm::Kmeans => {
            let k = c.kmeans_k.unwrap_or(target_ids).clamp(1, target.n());
            let r = cluster::kmeans(target, k, c.kmeans_iters, stage_seed(cfg, tag::KMEANS)).map_err(fail(st))?;
            Ok((r, json!({"k": k})))
        }
        Algorithm::Hac => Ok((cluster::hac(target, c.hac_threshold).map_err(fail(st))?, json!({}))),
        Algorithm::Dbscan => Ok((
            cluster::dbscan(target, c.dbscan_eps, c.dbscan_min_size).map_err(fail(st))?,
            json!({}),
        )),
    }
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Gcn => "gcn",
        Algorithm::Kmeans => "kmeans",
        Algorithm::Hac => "hac",
        Algorithm::Dbscan => "dbscan",
    }
}

/// Lifts a clustering of `kept` samples to all `n` unlabeled samples.
fn lift(c: &Clustering, kept: &[usize], n: usize) -> Clustering {
    let mut a = vec![None; n];
    kept.iter().zip(c.assignment()).for_each(|(&i, &v)| a[i] = v);
    Clustering::new(a).expect("ids preserved")
}

fn kept_indices(decisions: &[Decision]) -> Vec<usize> {
    (0..decisions.len())
        .filter(|&i| decisions[i] == Decision::Disjoint)
        .collect()
}

fn stage_cluster(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Cluster;
    let ds = load_dataset(out, st)?;
    let baseline = train::load_trained(&require(out, st, artifact::BASELINE)?).map_err(fail(st))?;
    let decisions = load_decisions(out, st, ds.split.unlabeled.len())?;
    let kept = kept_indices(&decisions);
    let (le, ll) = ds.part(&ds.split.labeled);
    let (ue, ul) = ds.part(&ds.split.unlabeled);
    let lf = if cfg.cluster.algorithm == Algorithm::Gcn || cfg.cluster.compare_baselines {
        let crossfit = stage_seed(cfg, tag::CROSSFIT);
        regressor_features(cfg, &le, &ll, &baseline, |e, l, f| {
            let tc = train_config(cfg, rng::derive(crossfit, f as u64), false);
            train::train_head((e, l), None, &tc).map_err(fail(st))
        })?
    } else {
        features(&baseline, &le)
    };
    let uf = features(&baseline, &ue);
    let kf = uf.subset(&kept).map_err(fail(st))?;
    let kl = ul.subset(&kept);

    let (c, extra) = run_algorithm(
        cfg.cluster.algorithm,
        cfg,
        (&lf, &ll),
        &kf,
        kl.num_ids(),
        st,
        Some(&out.join(artifact::GCN)),
    )?;
    let full = lift(&c, &kept, ue.n());
    data::save_clustering(&full, &out.join(artifact::PSEUDO)).map_err(fail(st))?;

    let mut metrics = serde_json::Map::new();
    metrics.insert("algorithm".into(), json!(algorithm_name(cfg.cluster.algorithm)));
    metrics.insert("clustered_samples".into(), json!(kept.len()));
    metrics.insert("result".into(), clustering_json(&c, &kl));
    metrics.insert("details".into(), extra);
    if cfg.cluster.compare_baselines {
        let mut cmp = serde_json::Map::new();
        for alg in [Algorithm::Gcn, Algorithm::Kmeans, Algorithm::Hac, Algorithm::Dbscan] {
            if alg == cfg.cluster.algorithm {
                continue;
            }
            let (r, _) = run_algorithm(alg, cfg, (&lf, &ll), &kf, kl.num_ids(), st, None)?;
            cmp.insert(algorithm_name(alg).into(), clustering_json(&r, &kl));
        }
        metrics.insert("baselines".into(), Value::Object(cmp));
    }
    Ok(Value::Object(metrics))
}

// ---------------------------------------------------------------- noise

/// Adds structured noise to pseudo-labels.
pub fn inject(c: &Clustering, rate: f64, mode: InjectMode, seed: u64) -> Result<Clustering, synth::SynthError> {
    if rate == 0.0 {
        return Ok(c.clone().without_p_minus());
    }
    match mode {
        InjectMode::Outlier => synth::inject_label_noise(c, rate, NoiseMode::Outlier, seed),
        InjectMode::SplitId => synth::inject_label_noise(c, rate, NoiseMode::SplitId, seed),
        InjectMode::Mixed => {
            let first = synth::inject_label_noise(c, rate / 2.0, NoiseMode::Outlier, seed)?;
            synth::inject_label_noise(&first, rate, NoiseMode::SplitId, seed.wrapping_add(1))
        }
    }
}

/// Per-sample p⁻ for the assigned samples of `c` (0 for unassigned).
/// Returns the fitted model, or `None` when one mode is too small to fit.
pub fn estimate_p_minus(
    feats: &EmbeddingSet,
    c: &Clustering,
    metric: UncertaintyMetric,
    n_bins: usize,
    logreg: &LogRegConfig,
) -> Result<(Vec<f64>, Option<noise::NoiseModel>, Vec<f64>, noise::LinearHead), NoiseError> {
    let head = noise::train_linear_classifier(feats, c, logreg)?;
    let conf = noise::confidence_scores(&head, feats, metric)?;
    let assigned: Vec<f64> = (0..c.len()).filter(|&i| c.get(i).is_some()).map(|i| conf[i]).collect();
    let model = match noise::fit_noise_model(&assigned, metric, n_bins) {
        Ok(m) => Some(m),
        Err(NoiseError::Evt(EvtError::OneSidedData { .. })) | Err(NoiseError::Evt(EvtError::DegenerateScores)) => None,
        Err(e) => return Err(e),
    };
    let p = (0..c.len())
        .map(|i| match (&model, c.get(i)) {
            (Some(m), Some(_)) => noise::p_minus(m, conf[i]),
            _ => 0.0,
        })
        .collect();
    Ok((p, model, conf, head))
}

fn stage_noise(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Noise;
    let ds = load_dataset(out, st)?;
    let baseline = train::load_trained(&require(out, st, artifact::BASELINE)?).map_err(fail(st))?;
    let pseudo = data::load_clustering(&require(out, st, artifact::PSEUDO)?).map_err(fail(st))?;
    let (ue, ul) = ds.part(&ds.split.unlabeled);
    let uf = features(&baseline, &ue);
    let c = inject(
        &pseudo,
        cfg.noise.inject_rate,
        cfg.noise.inject_mode,
        stage_seed(cfg, tag::INJECT),
    )
    .map_err(fail(st))?;

    let mut metrics = serde_json::Map::new();
    metrics.insert("injected_rate".into(), json!(cfg.noise.inject_rate));
    metrics.insert("pseudo_labels".into(), clustering_json(&c, &ul));
    let tags = noise::label_cluster_errors(&c, &ul);
    let tag_count = |t: ErrorTag| tags.iter().filter(|x| **x == Some(t)).count();
    metrics.insert(
        "error_tags".into(),
        json!({"correct": tag_count(ErrorTag::Correct), "outlier": tag_count(ErrorTag::Outlier),
               "split_id": tag_count(ErrorTag::SplitId)}),
    );

    let logreg = LogRegConfig {
        seed: stage_seed(cfg, tag::LOGREG),
        ..cfg.noise.logreg
    };
    let with_p = if c.num_clusters() >= 2 {
        let (p, model, _, head) =
            estimate_p_minus(&uf, &c, cfg.noise.metric, cfg.noise.n_bins, &logreg).map_err(fail(st))?;
        write_json(&out.join(artifact::NOISE_MODEL), &json!({"model": model}), st)?;
        metrics.insert("noise_model_fitted".into(), json!(model.is_some()));

        let assigned: Vec<usize> = (0..c.len()).filter(|&i| c.get(i).is_some()).collect();
        let positives: Vec<bool> = assigned.iter().map(|&i| tags[i] == Some(ErrorTag::Correct)).collect();
        let mut ap = serde_json::Map::new();
        for metric in UncertaintyMetric::ALL {
            let conf = noise::confidence_scores(&head, &uf, metric).map_err(fail(st))?;
            let s: Vec<f64> = assigned.iter().map(|&i| conf[i]).collect();
            let v = noise::average_precision(&s, &positives)
                .map(|a| json!(a))
                .unwrap_or(Value::Null);
            ap.insert(metric.name().into(), v);
        }
        metrics.insert("average_precision".into(), Value::Object(ap));
        let mean_p = |want: bool| {
            let v: Vec<f64> = assigned
                .iter()
                .filter(|&&i| (tags[i] == Some(ErrorTag::Correct)) == want)
                .map(|&i| p[i])
                .collect();
            if v.is_empty() {
                Value::Null
            } else {
                json!(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        metrics.insert("mean_p_minus_correct".into(), mean_p(true));
        metrics.insert("mean_p_minus_wrong".into(), mean_p(false));
        c.clone().with_p_minus(p).map_err(fail(st))?
    } else {
        write_json(&out.join(artifact::NOISE_MODEL), &json!({"model": null}), st)?;
        metrics.insert("noise_model_fitted".into(), json!(false));
        let n = c.len();
        c.clone().with_p_minus(vec![0.0; n]).map_err(fail(st))?
    };
    data::save_clustering(&with_p, &out.join(artifact::PSEUDO_PMINUS)).map_err(fail(st))?;
    Ok(Value::Object(metrics))
}

// ---------------------------------------------------------------- retrain

fn stage_retrain(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Retrain;
    let ds = load_dataset(out, st)?;
    let baseline = train::load_trained(&require(out, st, artifact::BASELINE)?).map_err(fail(st))?;
    let pseudo = data::load_clustering(&require(out, st, artifact::PSEUDO_PMINUS)?).map_err(fail(st))?;
    let (mut le, mut ll) = ds.part(&ds.split.labeled);
    let (ue, ul) = ds.part(&ds.split.unlabeled);
    let mut metrics = serde_json::Map::new();

    if cfg.train.merge_overlap {
        let decisions = load_decisions(out, st, ue.n())?;
        let merged: Vec<usize> = (0..ue.n()).filter(|&i| decisions[i] == Decision::Overlap).collect();
        if !merged.is_empty() {
            let mf = features(&baseline, &ue.subset(&merged).map_err(fail(st))?);
            let classes: Vec<usize> = mf
                .rows()
                .map(|x| {
                    let l = baseline.head.logits(x);
                    (0..l.len()).fold(0, |b, k| if l[k] > l[b] { k } else { b })
                })
                .collect();
            let correct = merged
                .iter()
                .zip(&classes)
                .filter(|(&i, &k)| ul.original_id(ul.get(i)) == ll.original_id(k))
                .count();
            let mut rows = le.as_slice().to_vec();
            merged.iter().for_each(|&i| rows.extend_from_slice(ue.row(i)));
            let mut labs: Vec<usize> = ll.labels().to_vec();
            labs.extend(&classes);
            le = EmbeddingSet::new_normalized(le.n() + merged.len(), le.d(), rows).map_err(fail(st))?;
            let num = ll.num_ids();
            ll = LabelSet::from_contiguous(labs);
            debug_assert_eq!(ll.num_ids(), num);
            metrics.insert(
                "merged_overlap".into(),
                json!({"samples": merged.len(), "correct_class": correct}),
            );
        }
    }

    let offset = ll.num_ids();
    let set = PseudoSet {
        emb: &ue,
        clustering: &pseudo,
        class_offset: offset,
    };
    let seed = stage_seed(cfg, tag::RETRAIN);
    let mut variants = serde_json::Map::new();
    let mut primary = None;
    for (name, weights, file) in [("hard", false, artifact::HARD), ("soft", true, artifact::SOFT)] {
        let tc = train_config(cfg, seed, weights);
        let m = train::train_head((&le, &ll), Some(set), &tc).map_err(fail(st))?;
        let init = train::initial_model(m.head.num_classes(), le.d(), &tc);
        let l0 = train::training_loss(&init, (&le, &ll), Some(set), &tc).map_err(fail(st))?;
        let l1 = train::training_loss(&m, (&le, &ll), Some(set), &tc).map_err(fail(st))?;
        train::save_trained(&m, &out.join(file)).map_err(fail(st))?;
        variants.insert(
            name.into(),
            json!({"classes": m.head.num_classes(), "initial_loss": l0, "final_loss": l1}),
        );
        if weights == cfg.train.use_weights {
            primary = Some(train::load_trained(&out.join(file)).map_err(fail(st))?);
        }
    }
    metrics.insert("variants".into(), Value::Object(variants));
    metrics.insert("pseudo_samples".into(), json!(pseudo.num_assigned()));
    let mean_w = pseudo
        .assignment()
        .iter()
        .zip(pseudo.p_minus().unwrap_or(&vec![0.0; pseudo.len()]))
        .filter(|(a, _)| a.is_some())
        .map(|(_, p)| train::weighted_loss(1.0, *p, cfg.noise.gamma))
        .sum::<f64>()
        / pseudo.num_assigned().max(1) as f64;
    metrics.insert("mean_pseudo_weight".into(), json!(mean_w));

    if cfg.train.iterations == 2 {
        let primary = primary.expect("one variant matches use_weights");
        let decisions = load_decisions(out, st, ue.n())?;
        let kept = kept_indices(&decisions);
        let (le0, ll0) = ds.part(&ds.split.labeled);
        let crossfit = stage_seed(cfg, tag::CROSSFIT2);
        let lf = regressor_features(cfg, &le0, &ll0, &primary, |e, l, f| {
            let tc = train_config(cfg, rng::derive(crossfit, f as u64), cfg.train.use_weights);
            let fold_pseudo = PseudoSet {
                class_offset: l.num_ids(),
                ..set
            };
            train::train_head((e, l), Some(fold_pseudo), &tc).map_err(fail(st))
        })?;
        let kf = features(&primary, &ue.subset(&kept).map_err(fail(st))?);
        let kl = ul.subset(&kept);
        let (c2, _) = gcn_cluster(cfg, (&lf, &ll0), &kf, stage_seed(cfg, tag::ITER2), st, None)?;
        metrics.insert("iteration2".into(), clustering_json(&c2, &kl));
    }
    Ok(Value::Object(metrics))
}

// ---------------------------------------------------------------- evaluate

/// Verification and identification on the held-out identities.
pub fn evaluate_model(
    model: Option<&TrainedModel>,
    ds: &Dataset,
    cfg: &PipelineConfig,
) -> Result<Value, eval::EvalError> {
    let test = ds.split.test();
    let (te, tl) = ds.part(&test);
    let tf = match model {
        Some(m) => features(m, &te),
        None => te,
    };
    let mut proto = match cfg.eval.pairs {
        PairProtocol::Balanced => VerificationProtocol::balanced(&tl, stage_seed(cfg, tag::PAIRS)),
        PairProtocol::AllPairs => VerificationProtocol::all_pairs(&tl),
    };
    if cfg.eval.folds > 1 {
        proto = proto.with_folds(cfg.eval.folds);
    }
    let v = eval::verification_metrics(&tf, &proto, &cfg.eval.fars)?;
    let pos: std::collections::HashMap<usize, usize> = test.iter().enumerate().map(|(a, &i)| (i, a)).collect();
    let gi: Vec<usize> = ds.split.test_gallery.iter().map(|i| pos[i]).collect();
    let pi: Vec<usize> = ds.split.test_probe.iter().map(|i| pos[i]).collect();
    let gids: Vec<usize> = gi.iter().map(|&i| tl.get(i)).collect();
    let pids: Vec<usize> = pi.iter().map(|&i| tl.get(i)).collect();
    let ge = tf.subset(&gi).expect("gallery indices");
    let pe = tf.subset(&pi).expect("probe indices");
    let ranks = eval::identification_rank((&ge, gids.as_slice()), (&pe, pids.as_slice()), &cfg.eval.ks)?;
    let tar: serde_json::Map<String, Value> = v.tar_at_far.iter().map(|(f, t)| (format!("{f:e}"), json!(t))).collect();
    let rank: serde_json::Map<String, Value> = ranks.iter().map(|(k, r)| (format!("rank{k}"), json!(r))).collect();
    Ok(json!({
        "verification_accuracy": v.best_accuracy,
        "tar_at_far": tar,
        "identification": rank,
    }))
}

fn stage_evaluate(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Evaluate;
    let ds = load_dataset(out, st)?;
    let baseline = train::load_trained(&require(out, st, artifact::BASELINE)?).map_err(fail(st))?;
    let mut rows = serde_json::Map::new();
    rows.insert(
        "input_features".into(),
        evaluate_model(None, &ds, cfg).map_err(fail(st))?,
    );
    rows.insert(
        "baseline".into(),
        evaluate_model(Some(&baseline), &ds, cfg).map_err(fail(st))?,
    );
    for (name, file) in [("hard", artifact::HARD), ("soft", artifact::SOFT)] {
        let path = out.join(file);
        if path.exists() {
            let m = train::load_trained(&path).map_err(fail(st))?;
            rows.insert(name.into(), evaluate_model(Some(&m), &ds, cfg).map_err(fail(st))?);
        }
    }
    Ok(Value::Object(rows))
}

// ---------------------------------------------------------------- report

#[derive(Serialize, Deserialize)]
struct StageSummary {
    metrics: Value,
    wall_clock_s: f64,
}

fn stage_report(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let st = Stage::Report;
    let mut stages = serde_json::Map::new();
    let mut timing = serde_json::Map::new();
    for s in Stage::ALL {
        if s == Stage::Report {
            continue;
        }
        let path = stage_summary_path(out, s);
        if !path.exists() {
            if s == Stage::Gen {
                return Err(PipelineError::MissingArtifact { stage: st.name(), path });
            }
            continue;
        }
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let summary: StageSummary = read_json(out, st, &name)?;
        stages.insert(s.name().into(), summary.metrics);
        timing.insert(s.name().into(), json!(summary.wall_clock_s));
    }
    let report = json!({
        "config": cfg.echo(),
        "seed": cfg.seed,
        "stages": stages,
        "timing": timing,
    });
    check_finite(&report).map_err(|m| PipelineError::Stage {
        stage: st.name(),
        message: m,
    })?;
    write_json(&out.join(artifact::REPORT), &report, st)?;
    Ok(report)
}

fn check_finite(v: &Value) -> Result<(), String> {
    match v {
        Value::Number(n) if n.as_f64().is_some_and(|f| !f.is_finite()) => Err(format!("non-finite number {n}")),
        Value::Array(a) => a.iter().try_for_each(check_finite),
        Value::Object(o) => o.values().try_for_each(check_finite),
        _ => Ok(()),
    }
}

/// Wall-clock fields removed, for comparing reports across runs.
pub fn without_timing(report: &Value) -> Value {
    let mut r = report.clone();
    if let Some(o) = r.as_object_mut() {
        o.remove("timing");
    }
    r
}

/// Runs one stage and records its summary (and, for `report`, the merged report).
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    std::fs::create_dir_all(out).map_err(|e| PipelineError::Stage {
        stage: stage.name(),
        message: format!("{}: {e}", out.display()),
    })?;
    let start = Instant::now();
    let metrics = match stage {
        Stage::Gen => stage_gen(cfg, out)?,
        Stage::Separate => stage_separate(cfg, out)?,
        Stage::Cluster => stage_cluster(cfg, out)?,
        Stage::Noise => stage_noise(cfg, out)?,
        Stage::Retrain => stage_retrain(cfg, out)?,
        Stage::Evaluate => stage_evaluate(cfg, out)?,
        Stage::Report => return stage_report(cfg, out),
    };
    let summary = StageSummary {
        metrics: metrics.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    write_json(&stage_summary_path(out, stage), &summary, stage)?;
    Ok(metrics)
}

/// Every stage in order; returns the merged report.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<Value, PipelineError> {
    let mut last = Value::Null;
    for s in Stage::ALL {
        last = run_stage(s, cfg, out)?;
    }
    Ok(last)
}
