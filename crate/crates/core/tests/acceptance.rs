//! Acceptance suite. Every criterion writes one `criterion N: PASS|FAIL`
//! line straight to stderr (visible without `--nocapture`) and then asserts.
//!
//! The pipeline criteria share one harness of three configurations over
//! seeds 1..=5, built once per test binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use forge::cluster::{deoverlap, gcn_gradient_check, GcnModel, ProposalScore};
use forge::config::{EvtMode, PipelineConfig};
use forge::data::{Clustering, EmbeddingSet, LabelSet};
use forge::eval::{frechet_distance, pairwise_prf};
use forge::evt::{otsu_threshold, weibull_fit_mle, WeibullParams};
use forge::knn::{build_knn_graph, default_thresholds, proposals_from_thresholds, ClusterProposal};
use forge::pipeline::{run_pipeline, without_timing};
use forge::rng;
use forge::synth::{generate_identities, SynthConfig};
use forge::train::{gradient_check, train_head, TrainConfig};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Weibull};
use serde_json::Value;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Seeds that must satisfy a "≥ 4 of 5" ordering.
const MAJORITY: usize = 4;

fn verdict(id: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Criteria run one at a time so their runtime limits measure themselves,
/// not each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

// ------------------------------------------------------------------ harness

struct Run {
    report: Value,
    wall_s: f64,
}

impl Run {
    fn at(&self, path: &[&str]) -> f64 {
        let mut v = &self.report["stages"];
        for p in path {
            v = &v[*p];
        }
        v.as_f64()
            .unwrap_or_else(|| panic!("missing number at stages.{}", path.join(".")))
    }

    fn stage_s(&self, stages: &[&str]) -> f64 {
        stages.iter().map(|s| self.report["timing"][*s].as_f64().unwrap()).sum()
    }
}

struct Harness {
    /// 30% overlapping ids, 20% injected mixed noise, separation on (auto).
    separated: Vec<Run>,
    /// Same as `separated` with separation disabled.
    naive: Vec<Run>,
    /// Disjoint ids, no injected noise.
    clean: Vec<Run>,
}

fn run(cfg: &PipelineConfig) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let report = run_pipeline(cfg, dir.path()).expect("pipeline");
    Run {
        report,
        wall_s: t.elapsed().as_secs_f64(),
    }
}

fn harness() -> &'static Harness {
    static H: OnceLock<Harness> = OnceLock::new();
    H.get_or_init(|| {
        let mut noisy = PipelineConfig::default();
        noisy.split.overlap_id_fraction = 0.3;
        noisy.noise.inject_rate = 0.2;
        let mut naive = noisy.clone();
        naive.evt.mode = EvtMode::Off;
        let clean = PipelineConfig::default();
        let over = |base: &PipelineConfig| -> Vec<Run> {
            SEEDS
                .iter()
                .map(|&s| {
                    let mut c = base.clone();
                    c.seed = s;
                    run(&c)
                })
                .collect()
        };
        Harness {
            separated: over(&noisy),
            naive: over(&naive),
            clean: over(&clean),
        }
    })
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------- criterion 1

/// Between-class variance of splitting a histogram at every interior edge,
/// from bin-center values; first maximum wins.
fn exhaustive_otsu(scores: &[f64], n_bins: usize) -> f64 {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = (hi - lo) / n_bins as f64;
    let mut hist = vec![0usize; n_bins];
    for &s in scores {
        hist[(((s - lo) / w).floor() as usize).min(n_bins - 1)] += 1;
    }
    let n = scores.len() as f64;
    let center = |b: usize| lo + (b as f64 + 0.5) * w;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for edge in 1..n_bins {
        let (c0, c1): (f64, f64) = (
            hist[..edge].iter().sum::<usize>() as f64,
            hist[edge..].iter().sum::<usize>() as f64,
        );
        if c0 == 0.0 || c1 == 0.0 {
            continue;
        }
        let m0 = (0..edge).map(|b| hist[b] as f64 * center(b)).sum::<f64>() / c0;
        let m1 = (edge..n_bins).map(|b| hist[b] as f64 * center(b)).sum::<f64>() / c1;
        let between = (c0 / n) * (c1 / n) * (m0 - m1).powi(2);
        if between > best.0 * (1.0 + 1e-12) {
            best = (between, edge);
        }
    }
    lo + best.1 as f64 * w
}

#[test]
fn criterion_01_otsu_matches_exhaustive_search() {
    let _guard = serial();
    let t = Instant::now();
    let mut r = rng::stream(101, 0);
    let mut mismatches = 0;
    for case in 0..100 {
        let n_bins = r.random_range(2..=64);
        let a = Normal::new(r.random_range(-2.0..0.0), r.random_range(0.1..1.0)).unwrap();
        let b = Normal::new(r.random_range(0.0..3.0), r.random_range(0.1..1.0)).unwrap();
        let mix: f64 = r.random_range(0.1..0.9);
        let scores: Vec<f64> = (0..200)
            .map(|_| {
                if r.random::<f64>() < mix {
                    a.sample(&mut r)
                } else {
                    b.sample(&mut r)
                }
            })
            .collect();
        let got = otsu_threshold(&scores, n_bins).unwrap();
        if got != exhaustive_otsu(&scores, n_bins) {
            mismatches += 1;
            eprintln!("case {case}: n_bins {n_bins} got {got}");
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 5.0;
    verdict(
        "1",
        pass,
        &format!("(otsu oracle) mismatches {mismatches}/100, {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_weibull_mle_recovers_generator() {
    let _guard = serial();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for (i, &(k, lambda)) in [(1.0, 2.0), (2.0, 1.5), (3.5, 0.8)].iter().enumerate() {
        let mut r = rng::stream(202, i as u64);
        let dist = Weibull::new(lambda, k).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut r)).collect();
        let fit = weibull_fit_mle(&xs).unwrap();
        worst = worst
            .max((fit.shape_k - k).abs() / k)
            .max((fit.scale_lambda - lambda).abs() / lambda);
        let p = WeibullParams::new(k, lambda, 0.0);
        // up to the 0.999 quantile, where 1 - cdf still carries precision
        let top = lambda * (-(0.001f64).ln()).powf(1.0 / k);
        for j in 1..200 {
            let x = j as f64 * top / 200.0;
            let back = p.quantile(p.cdf(x)).unwrap();
            worst_identity = worst_identity.max((back - x).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 0.05 && worst_identity < 1e-9 && secs < 5.0;
    verdict(
        "2",
        pass,
        &format!(
            "(weibull mle) max rel err {worst:.4} < 0.05, quantile(cdf) err {worst_identity:.1e} < 1e-9, {secs:.2}s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_weibull_separation_beats_naive_otsu() {
    let _guard = serial();
    let h = harness();
    let fp_w: Vec<f64> = h
        .separated
        .iter()
        .map(|r| r.at(&["separate", "weibull", "false_positive_rate"]))
        .collect();
    let fp_o: Vec<f64> = h
        .separated
        .iter()
        .map(|r| r.at(&["separate", "naive_otsu", "false_positive_rate"]))
        .collect();
    let sse_w: Vec<f64> = h
        .separated
        .iter()
        .map(|r| r.at(&["separate", "weibull", "sse"]))
        .collect();
    let sse_g: Vec<f64> = h
        .separated
        .iter()
        .map(|r| r.at(&["separate", "gaussian", "sse"]))
        .collect();
    let fp_wins = fp_w.iter().zip(&fp_o).filter(|(w, o)| w < o).count();
    let sse_wins = sse_w.iter().zip(&sse_g).filter(|(w, g)| w <= g).count();
    let slowest = h
        .separated
        .iter()
        .map(|r| r.stage_s(&["gen", "separate"]))
        .fold(0.0, f64::max);
    let pass = fp_wins >= MAJORITY && sse_wins == SEEDS.len() && slowest < 30.0;
    verdict(
        "3",
        pass,
        &format!(
            "(overlap separation) FP weibull<otsu {fp_wins}/5 [{}] vs [{}]; SSE weibull<=gaussian {sse_wins}/5 [{}] vs [{}]; {slowest:.2}s",
            fmt(&fp_w),
            fmt(&fp_o),
            fmt(&sse_w),
            fmt(&sse_g)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

fn brute_pairwise(assign: &[Option<usize>], labels: &[usize]) -> (f64, f64, f64) {
    let idx: Vec<usize> = (0..assign.len()).filter(|&i| assign[i].is_some()).collect();
    let (mut tp, mut sc, mut sl) = (0u64, 0u64, 0u64);
    for (x, &i) in idx.iter().enumerate() {
        for &j in &idx[x + 1..] {
            let c = assign[i] == assign[j];
            let l = labels[i] == labels[j];
            tp += (c && l) as u64;
            sc += c as u64;
            sl += l as u64;
        }
    }
    let p = if sc == 0 { 1.0 } else { tp as f64 / sc as f64 };
    let rc = if sl == 0 { 0.0 } else { tp as f64 / sl as f64 };
    let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
    (p, rc, f)
}

#[test]
fn criterion_04_pairwise_prf_matches_pair_enumeration() {
    let _guard = serial();
    let mut r = rng::stream(404, 0);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = r.random_range(2..=300);
        let k = r.random_range(1..=20);
        let ids = r.random_range(1..=20);
        let assign: Vec<Option<usize>> = (0..n)
            .map(|_| (r.random::<f64>() > 0.1).then(|| r.random_range(0..k)))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..ids)).collect();
        let got = pairwise_prf(
            &Clustering::from_ids(assign.clone()),
            &LabelSet::from_contiguous(labels.clone()),
        );
        if (got.precision, got.recall, got.f1) != brute_pairwise(&assign, &labels) {
            mismatches += 1;
        }
    }
    let ex = pairwise_prf(
        &Clustering::from_ids([1, 1, 2, 2, 2].map(Some)),
        &LabelSet::from_contiguous(vec![0, 0, 0, 1, 1]),
    );
    let example_ok = (ex.precision, ex.recall, ex.f1) == (0.5, 0.5, 0.5);
    let pass = mismatches == 0 && example_ok;
    verdict(
        "4",
        pass,
        &format!(
            "(pairwise prf oracle) mismatches {mismatches}/50, worked example {:?}",
            (ex.precision, ex.recall, ex.f1)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_gradients_match_finite_differences() {
    let _guard = serial();
    let t = Instant::now();
    let h = 1e-6;

    let (emb, labels) = generate_identities(&SynthConfig::new(6, 8, 8, 0.3, 5)).unwrap();
    let g = build_knn_graph(&emb, 5).unwrap();
    let props = proposals_from_thresholds(&g, &default_thresholds(&g, 4), 50).unwrap();
    let chosen: Vec<ClusterProposal> = props.into_iter().filter(|p| p.len() >= 3).take(3).collect();
    let gcn = GcnModel::init(&[8, 6, 4], true, 11);
    let gcn_err = gcn_gradient_check(&gcn, &chosen, &emb, &g, &labels, h).unwrap();

    let (emb, labels) = generate_identities(&SynthConfig::new(3, 4, 6, 0.4, 2)).unwrap();
    // a few epochs so the encoder's second layer is non-zero
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let m = train_head((&emb, &labels), None, &cfg).unwrap();
    let head_err = gradient_check(&m, (&emb, &labels), None, &cfg, h).unwrap();

    let secs = t.elapsed().as_secs_f64();
    let pass = gcn_err < 1e-4 && head_err < 1e-4 && secs < 10.0;
    verdict(
        "5",
        pass,
        &format!("(gradient checks) gcn {gcn_err:.2e}, cosine head {head_err:.2e} (< 1e-4), {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_deoverlap_is_a_partition() {
    let _guard = serial();
    let mut r = rng::stream(606, 0);
    let mut violations = 0;
    for _ in 0..200 {
        let n = r.random_range(5..200);
        let min_size = r.random_range(1..=4);
        let count = r.random_range(1..40);
        let all: Vec<usize> = (0..n).collect();
        let proposals: Vec<ClusterProposal> = (0..count)
            .map(|_| {
                let size = r.random_range(1..=n.min(30));
                let mut members: Vec<usize> = all.choose_multiple(&mut r, size).copied().collect();
                members.sort_unstable();
                ClusterProposal {
                    members,
                    threshold: 0.5,
                }
            })
            .collect();
        let scores: Vec<ProposalScore> = proposals
            .iter()
            .map(|_| {
                let iou: f64 = r.random();
                ProposalScore {
                    iou_pred: iou,
                    iop_pred: r.random_range(iou..=1.0),
                }
            })
            .collect();
        let c = deoverlap(&proposals, &scores, min_size, n).unwrap();
        let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, a) in c.assignment().iter().enumerate() {
            if let Some(k) = a {
                clusters.entry(*k).or_default().push(i);
            }
        }
        let covered: usize = clusters.values().map(Vec::len).sum();
        let assigned = c.assignment().iter().flatten().count();
        let ok = c.len() == n
            && covered == assigned
            && clusters.values().all(|m| m.len() >= min_size)
            && clusters.values().all(|m| {
                proposals
                    .iter()
                    .any(|p| m.iter().all(|i| p.members.binary_search(i).is_ok()))
            });
        violations += !ok as usize;
    }
    let pass = violations == 0;
    verdict(
        "6",
        pass,
        &format!("(de-overlap partition) violations {violations}/200"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_class_margin_ranks_errors_at_least_as_well_as_entropy() {
    let _guard = serial();
    let h = harness();
    let cm: Vec<f64> = h
        .separated
        .iter()
        .map(|r| r.at(&["noise", "average_precision", "class_margin"]))
        .collect();
    let en: Vec<f64> = h
        .separated
        .iter()
        .map(|r| r.at(&["noise", "average_precision", "entropy"]))
        .collect();
    let wins = cm.iter().zip(&en).filter(|(c, e)| c >= e).count();
    let slowest = h
        .separated
        .iter()
        .map(|r| r.stage_s(&["gen", "separate", "cluster", "noise"]))
        .fold(0.0, f64::max);
    let pass = wins >= MAJORITY && slowest < 60.0;
    verdict(
        "7",
        pass,
        &format!(
            "(uncertainty AP) class_margin>=entropy {wins}/5 [{}] vs [{}]; {slowest:.2}s",
            fmt(&cm),
            fmt(&en)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_soft_weighting_helps_under_noise() {
    let _guard = serial();
    let h = harness();
    let acc = |runs: &[Run], v: &str| -> Vec<f64> {
        runs.iter()
            .map(|r| r.at(&["evaluate", v, "verification_accuracy"]))
            .collect()
    };
    let (soft, hard) = (acc(&h.separated, "soft"), acc(&h.separated, "hard"));
    let wins = soft.iter().zip(&hard).filter(|(s, h)| s >= h).count();
    let (soft0, hard0) = (acc(&h.clean, "soft"), acc(&h.clean, "hard"));
    let gap0 = soft0.iter().zip(&hard0).map(|(s, h)| (s - h).abs()).fold(0.0, f64::max);
    let pass = wins >= MAJORITY && gap0 < 0.01;
    verdict(
        "8",
        pass,
        &format!(
            "(noise-robust retraining) 20% noise soft>=hard {wins}/5 [{}] vs [{}]; 0% noise max |soft-hard| {gap0:.4} < 0.01",
            fmt(&soft),
            fmt(&hard)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_09_end_to_end_trends() {
    let _guard = serial();
    let h = harness();
    let rank1 = |runs: &[Run], v: &str| -> Vec<f64> {
        runs.iter()
            .map(|r| r.at(&["evaluate", v, "identification", "rank1"]))
            .collect()
    };
    let (base, pseudo) = (rank1(&h.clean, "baseline"), rank1(&h.clean, "hard"));
    let a_wins = pseudo.iter().zip(&base).filter(|(p, b)| p > b).count();
    let (sep, naive) = (rank1(&h.separated, "soft"), rank1(&h.naive, "soft"));
    let b_wins = sep.iter().zip(&naive).filter(|(s, n)| s > n).count();
    let slowest = h
        .separated
        .iter()
        .chain(&h.naive)
        .chain(&h.clean)
        .map(|r| r.wall_s)
        .fold(0.0, f64::max);
    let pass = a_wins >= MAJORITY && b_wins >= MAJORITY && slowest < 300.0;
    verdict(
        "9",
        pass,
        &format!(
            "(end-to-end) (a) pseudo>baseline rank-1 {a_wins}/5 [{}] vs [{}]; (b) separated>naive rank-1 {b_wins}/5 [{}] vs [{}]; slowest run {slowest:.1}s",
            fmt(&pseudo),
            fmt(&base),
            fmt(&sep),
            fmt(&naive)
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_frechet_sanity() {
    let _guard = serial();
    let mut r = rng::stream(1010, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = EmbeddingSet::new(500, 8, (0..4000).map(|_| normal.sample(&mut r)).collect()).unwrap();
    let y = EmbeddingSet::new(400, 8, (0..3200).map(|_| 0.5 + 2.0 * normal.sample(&mut r)).collect()).unwrap();
    let self_d = frechet_distance(&x, &x).unwrap();
    let asym = (frechet_distance(&x, &y).unwrap() - frechet_distance(&y, &x).unwrap()).abs();
    let n = 100_000;
    // sets need d >= 2; the second coordinate is N(0,1) in both and adds ~0
    let a = EmbeddingSet::new(n, 2, (0..2 * n).map(|_| normal.sample(&mut r)).collect()).unwrap();
    let b = EmbeddingSet::new(
        n,
        2,
        (0..2 * n)
            .map(|i| (i % 2 == 0) as u8 as f64 + normal.sample(&mut r))
            .collect(),
    )
    .unwrap();
    let one_d = frechet_distance(&a, &b).unwrap();
    let pass = self_d < 1e-6 && (one_d - 1.0).abs() < 0.05 && asym < 1e-8;
    verdict(
        "10",
        pass,
        &format!("(frechet) d(X,X) {self_d:.1e}, 1-D {one_d:.4} (1 +/- 0.05), |d(A,B)-d(B,A)| {asym:.1e}"),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 11

fn small_config(path: &Path) {
    std::fs::write(
        path,
        "seed = 11\n[synth]\nnum_ids = 60\n[split]\noverlap_id_fraction = 0.3\n[noise]\ninject_rate = 0.2\n",
    )
    .unwrap();
}

fn cli_report(config: &Path, out: &Path, threads: usize) -> String {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", &threads.to_string()])
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    serde_json::to_string_pretty(&without_timing(&report)).unwrap()
}

#[test]
fn criterion_11_reports_are_deterministic() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    small_config(&cfg);
    let one = cli_report(&cfg, &dir.path().join("a"), 1);
    let again = cli_report(&cfg, &dir.path().join("b"), 1);
    let threaded = cli_report(&cfg, &dir.path().join("c"), 4);
    let pass = one == again && one == threaded;
    verdict(
        "11",
        pass,
        &format!(
            "(determinism) repeat identical: {}, --threads 4 identical: {}",
            one == again,
            one == threaded
        ),
    );
    assert!(pass);
}
