//! Retraining on labeled plus pseudo-labeled embeddings with a large-margin
//! cosine loss. Pseudo-labeled samples can be down-weighted by their
//! estimated probability of carrying a wrong label.
//!
//! The optional encoder is a residual map
//! `f = normalize(W x + W2 relu(W1 x + b1))` initialized to the identity, so
//! retraining can reshape the feature space used by later clustering and
//! evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dot, Clustering, EmbeddingSet, LabelSet};
use crate::noise::LinearHead;
use crate::rng;

const UNIT_TOLERANCE: f64 = 1e-5;
const SHARDS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("features and head rows must be unit-norm")]
    NotNormalized,
    #[error("pseudo class offset {offset} collides with {labeled} labeled classes")]
    LabelCollision { offset: usize, labeled: usize },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("model has no encoder")]
    NoEncoder,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dimension mismatch: model {model}, data {data}")]
    DimensionMismatch { model: usize, data: usize },
    #[error("invalid model file: {0}")]
    BadModel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub margin_m: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 16.0,
            margin_m: 0.35,
            gamma: 1.0,
        }
    }
}

fn is_unit(v: &[f64]) -> bool {
    (dot(v, v).sqrt() - 1.0).abs() <= UNIT_TOLERANCE
}

/// Softmax probabilities of the margin logits `alpha (w_k . f - m [k = label])`.
fn margin_softmax(cos: &[f64], label: usize, cfg: &LossConfig) -> Vec<f64> {
    let z: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(k, c)| cfg.alpha * (c - if k == label { cfg.margin_m } else { 0.0 }))
        .collect();
    crate::noise::softmax(&z)
}

pub fn cosine_loss(feature: &[f64], head: &LinearHead, label: usize, cfg: &LossConfig) -> Result<f64, TrainError> {
    if !is_unit(feature) || (0..head.num_classes()).any(|k| !is_unit(head.row(k))) {
        return Err(TrainError::NotNormalized);
    }
    if label >= head.num_classes() {
        return Err(TrainError::LabelOutOfRange {
            label,
            classes: head.num_classes(),
        });
    }
    head.check_dim(feature.len())
        .map_err(|_| TrainError::DimensionMismatch {
            model: head.dim(),
            data: feature.len(),
        })?;
    let cos: Vec<f64> = (0..head.num_classes()).map(|k| dot(head.row(k), feature)).collect();
    Ok(-margin_softmax(&cos, label, cfg)[label].ln())
}

pub fn weighted_loss(loss: f64, p_minus: f64, gamma: f64) -> f64 {
    (1.0 - p_minus).powf(gamma) * loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    dim: usize,
    /// `W`, `W1`, `b1`, `W2` concatenated; matrices are `dim x dim` row-major.
    params: Vec<f64>,
}

impl Encoder {
    /// `W = I`, `W2 = 0`, small random `W1`.
    pub fn identity(dim: usize, seed: u64) -> Self {
        let mut params = vec![0.0; 3 * dim * dim + dim];
        (0..dim).for_each(|i| params[i * dim + i] = 1.0);
        let mut r = rng::stream(seed, u64::MAX);
        let s = 1.0 / (dim as f64).sqrt();
        for p in &mut params[dim * dim..2 * dim * dim] {
            let g: f64 = StandardNormal.sample(&mut r);
            *p = s * g;
        }
        Self { dim, params }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn parts(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let d = self.dim;
        let (w, rest) = self.params.split_at(d * d);
        let (w1, rest) = rest.split_at(d * d);
        let (b1, w2) = rest.split_at(d);
        (w, w1, b1, w2)
    }

    /// Returns `(f, u, hidden pre-activation)`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let (w, w1, b1, w2) = self.parts();
        let a: Vec<f64> = (0..d).map(|i| dot(&w1[i * d..(i + 1) * d], x) + b1[i]).collect();
        let r: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        let u: Vec<f64> = (0..d)
            .map(|i| dot(&w[i * d..(i + 1) * d], x) + dot(&w2[i * d..(i + 1) * d], &r))
            .collect();
        let n = dot(&u, &u).sqrt().max(1e-12);
        (u.iter().map(|v| v / n).collect(), u, a)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: Option<Encoder>,
    pub head: LinearHead,
}

impl TrainedModel {
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        match &self.encoder {
            Some(e) => e.apply(x),
            None => x.to_vec(),
        }
    }
}

/// Pseudo-labeled samples; cluster `c` trains class `class_offset + c`.
#[derive(Debug, Clone, Copy)]
pub struct PseudoSet<'a> {
    pub emb: &'a EmbeddingSet,
    pub clustering: &'a Clustering,
    pub class_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_weights: bool,
    pub encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            use_weights: true,
            encoder: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Sample<'a> {
    x: &'a [f64],
    label: usize,
    weight: f64,
}

/// Flat view of every trainable parameter: encoder (if any) then head.
fn flat_len(m: &TrainedModel) -> usize {
    m.encoder.as_ref().map_or(0, |e| e.params.len()) + m.head.weights().len()
}

fn apply_step(m: &mut TrainedModel, delta: &[f64]) {
    let enc_len = m.encoder.as_ref().map_or(0, |e| e.params.len());
    if let Some(e) = &mut m.encoder {
        e.params.iter_mut().zip(&delta[..enc_len]).for_each(|(p, d)| *p += d);
    }
    m.head
        .weights_mut()
        .iter_mut()
        .zip(&delta[enc_len..])
        .for_each(|(p, d)| *p += d);
}

/// Weighted loss of one sample; gradient accumulated into `grad`.
fn sample_loss_grad(m: &TrainedModel, s: &Sample, cfg: &LossConfig, scale: f64, grad: &mut [f64]) -> f64 {
    let k = m.head.num_classes();
    let (f, u, a) = match &m.encoder {
        Some(e) => e.forward(s.x),
        None => (s.x.to_vec(), Vec::new(), Vec::new()),
    };
    let cos: Vec<f64> = (0..k).map(|c| dot(m.head.row(c), &f)).collect();
    let p = margin_softmax(&cos, s.label, cfg);
    let loss = -p[s.label].max(1e-300).ln();
    let w = s.weight * scale;
    if w == 0.0 {
        return s.weight * loss;
    }
    let d = f.len();
    let enc_len = m.encoder.as_ref().map_or(0, |e| e.params.len());
    let mut df = vec![0.0; d];
    for c in 0..k {
        let g = cfg.alpha * (p[c] - if c == s.label { 1.0 } else { 0.0 }) * w;
        if g == 0.0 {
            continue;
        }
        let row = m.head.row(c);
        let gh = &mut grad[enc_len + c * d..enc_len + (c + 1) * d];
        for j in 0..d {
            gh[j] += g * f[j];
            df[j] += g * row[j];
        }
    }
    if let Some(e) = &m.encoder {
        let n = dot(&u, &u).sqrt().max(1e-12);
        let fd = dot(&f, &df);
        let du: Vec<f64> = (0..d).map(|j| (df[j] - f[j] * fd) / n).collect();
        let (_, _, _, w2) = e.parts();
        let (gw, rest) = grad[..enc_len].split_at_mut(d * d);
        let (gw1, rest) = rest.split_at_mut(d * d);
        let (gb1, gw2) = rest.split_at_mut(d);
        let mut dr = vec![0.0; d];
        for i in 0..d {
            if du[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                gw[i * d + j] += du[i] * s.x[j];
                gw2[i * d + j] += du[i] * a[j].max(0.0);
                dr[j] += w2[i * d + j] * du[i];
            }
        }
        for i in 0..d {
            if a[i] > 0.0 && dr[i] != 0.0 {
                for j in 0..d {
                    gw1[i * d + j] += dr[i] * s.x[j];
                }
                gb1[i] += dr[i];
            }
        }
    }
    s.weight * loss
}

/// Mean weighted loss over `samples` and its gradient. Work is split into a
/// fixed number of shards reduced in order, so results do not depend on the
/// thread count.
pub(crate) fn loss_and_grad(m: &TrainedModel, samples: &[Sample], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let scale = 1.0 / samples.len().max(1) as f64;
    let shard = samples.len().div_ceil(SHARDS).max(1);
    let parts: Vec<(f64, Vec<f64>)> = samples
        .par_chunks(shard)
        .map(|chunk| {
            let mut g = vec![0.0; flat_len(m)];
            let l: f64 = chunk.iter().map(|s| sample_loss_grad(m, s, cfg, scale, &mut g)).sum();
            (l, g)
        })
        .collect();
    let mut grad = vec![0.0; flat_len(m)];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss * scale, grad)
}

fn collect_samples<'a>(
    labeled: (&'a EmbeddingSet, &'a LabelSet),
    pseudo: Option<PseudoSet<'a>>,
    cfg: &TrainConfig,
) -> Result<(Vec<Sample<'a>>, usize), TrainError> {
    let (lemb, llab) = labeled;
    let dim = lemb.d();
    let mut samples: Vec<Sample> = (0..lemb.n())
        .map(|i| Sample {
            x: lemb.row(i),
            label: llab.get(i),
            weight: 1.0,
        })
        .collect();
    let mut classes = llab.num_ids();
    if let Some(p) = pseudo {
        if p.class_offset < llab.num_ids() {
            return Err(TrainError::LabelCollision {
                offset: p.class_offset,
                labeled: llab.num_ids(),
            });
        }
        if p.emb.d() != dim && p.clustering.num_assigned() > 0 {
            return Err(TrainError::DimensionMismatch {
                model: dim,
                data: p.emb.d(),
            });
        }
        if p.clustering.num_clusters() > 0 {
            classes = classes.max(p.class_offset + p.clustering.num_clusters());
        }
        for (i, a) in p.clustering.assignment().iter().enumerate() {
            if let Some(c) = *a {
                let pm = p.clustering.p_minus().map_or(0.0, |v| v[i]);
                samples.push(Sample {
                    x: p.emb.row(i),
                    label: p.class_offset + c,
                    weight: if cfg.use_weights {
                        weighted_loss(1.0, pm, cfg.loss.gamma)
                    } else {
                        1.0
                    },
                });
            }
        }
    }
    if samples.is_empty() || classes == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    if samples.iter().any(|s| !is_unit(s.x)) {
        return Err(TrainError::NotNormalized);
    }
    Ok((samples, classes))
}

fn random_unit_head(classes: usize, dim: usize, seed: u64) -> LinearHead {
    let mut r = rng::stream(seed, 0);
    let w: Vec<f64> = (0..classes * dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut r);
            g
        })
        .collect();
    let mut head = LinearHead::new(classes, dim, w, None).expect("shape is consistent");
    head.normalize_rows();
    head
}

/// Mean weighted training loss of `m` on the same sample set `train_head` uses.
pub fn training_loss(
    m: &TrainedModel,
    labeled: (&EmbeddingSet, &LabelSet),
    pseudo: Option<PseudoSet>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let (samples, _) = collect_samples(labeled, pseudo, cfg)?;
    let mut total = 0.0;
    for s in &samples {
        let f = m.features(s.x);
        total += s.weight * cosine_loss(&f, &m.head, s.label, &cfg.loss)?;
    }
    Ok(total / samples.len() as f64)
}

/// Largest relative gap between the analytic gradient of the mean training
/// loss and a central difference with step `h`, over every parameter whose
/// gradient magnitude exceeds 1e-7.
pub fn gradient_check(
    m: &TrainedModel,
    labeled: (&EmbeddingSet, &LabelSet),
    pseudo: Option<PseudoSet>,
    cfg: &TrainConfig,
    h: f64,
) -> Result<f64, TrainError> {
    let (samples, _) = collect_samples(labeled, pseudo, cfg)?;
    let (_, grad) = loss_and_grad(m, &samples, &cfg.loss);
    let mut worst: f64 = 0.0;
    let mut delta = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        delta[i] = h;
        let mut plus = m.clone();
        apply_step(&mut plus, &delta);
        delta[i] = -h;
        let mut minus = m.clone();
        apply_step(&mut minus, &delta);
        delta[i] = 0.0;
        let fd =
            (loss_and_grad(&plus, &samples, &cfg.loss).0 - loss_and_grad(&minus, &samples, &cfg.loss).0) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs());
        if denom > 1e-7 {
            worst = worst.max((fd - grad[i]).abs() / denom);
        }
    }
    Ok(worst)
}

/// Initial model `train_head` starts from: identity encoder, random unit head.
pub fn initial_model(classes: usize, dim: usize, cfg: &TrainConfig) -> TrainedModel {
    TrainedModel {
        encoder: cfg.encoder.then(|| Encoder::identity(dim, cfg.seed)),
        head: random_unit_head(classes, dim, cfg.seed),
    }
}

/// SGD with momentum on the mean weighted cosine-margin loss. Head rows are
/// projected back to the unit sphere after every step.
pub fn train_head(
    labeled: (&EmbeddingSet, &LabelSet),
    pseudo: Option<PseudoSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    let (samples, classes) = collect_samples(labeled, pseudo, cfg)?;
    let mut m = initial_model(classes, labeled.0.d(), cfg);
    let mut velocity = vec![0.0; flat_len(&m)];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let (_, grad) = loss_and_grad(&m, &batch, &cfg.loss);
            velocity
                .iter_mut()
                .zip(&grad)
                .for_each(|(v, g)| *v = cfg.momentum * *v - cfg.lr * g);
            apply_step(&mut m, &velocity);
            m.head.normalize_rows();
        }
    }
    Ok(m)
}

/// Maps rows through the trained encoder.
pub fn embed(m: &TrainedModel, emb: &EmbeddingSet) -> Result<EmbeddingSet, TrainError> {
    let e = m.encoder.as_ref().ok_or(TrainError::NoEncoder)?;
    if e.dim != emb.d() {
        return Err(TrainError::DimensionMismatch {
            model: e.dim,
            data: emb.d(),
        });
    }
    let rows: Vec<f64> = (0..emb.n())
        .into_par_iter()
        .flat_map_iter(|i| e.apply(emb.row(i)))
        .collect();
    EmbeddingSet::new_normalized(emb.n(), emb.d(), rows).map_err(|_| TrainError::NotNormalized)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    num_classes: usize,
    encoder: bool,
    num_params: usize,
    dtype: String,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.to_path_buf();
    move |source| TrainError::Io { path, source }
}

/// Little-endian `f32` blob (encoder parameters, then head) with a JSON sidecar.
pub fn save_trained(m: &TrainedModel, blob: &Path) -> Result<(), TrainError> {
    let enc: &[f64] = m.encoder.as_ref().map_or(&[], |e| &e.params);
    let all: Vec<u8> = enc
        .iter()
        .chain(m.head.weights())
        .flat_map(|&p| (p as f32).to_le_bytes())
        .collect();
    std::fs::write(blob, all).map_err(io_err(blob))?;
    let side = Sidecar {
        dim: m.head.dim(),
        num_classes: m.head.num_classes(),
        encoder: m.encoder.is_some(),
        num_params: enc.len() + m.head.weights().len(),
        dtype: "f32le".into(),
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| TrainError::BadModel(e.to_string()))?;
    let path = sidecar_path(blob);
    std::fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_trained(blob: &Path) -> Result<TrainedModel, TrainError> {
    let path = sidecar_path(blob);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| TrainError::BadModel(e.to_string()))?;
    let d = side.dim;
    let enc_len = if side.encoder { 3 * d * d + d } else { 0 };
    if side.dtype != "f32le" || side.num_params != enc_len + side.num_classes * d {
        return Err(TrainError::BadModel("sidecar shape is inconsistent".into()));
    }
    let bytes = std::fs::read(blob).map_err(io_err(blob))?;
    if bytes.len() != side.num_params * 4 {
        return Err(TrainError::BadModel(format!(
            "blob has {} bytes, expected {}",
            bytes.len(),
            side.num_params * 4
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let (enc, head) = vals.split_at(enc_len);
    let head =
        LinearHead::new(side.num_classes, d, head.to_vec(), None).map_err(|e| TrainError::BadModel(e.to_string()))?;
    Ok(TrainedModel {
        encoder: side.encoder.then(|| Encoder {
            dim: d,
            params: enc.to_vec(),
        }),
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_identities, SynthConfig};

    #[test]
    fn cosine_loss_examples() {
        let head = LinearHead::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let plain = LossConfig {
            alpha: 1.0,
            margin_m: 0.0,
            gamma: 1.0,
        };
        let l = cosine_loss(&[1.0, 0.0], &head, 0, &plain).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
        let margin = LossConfig {
            margin_m: 0.35,
            ..plain
        };
        let l = cosine_loss(&[1.0, 0.0], &head, 0, &margin).unwrap();
        assert!((l - (1.0 + (-0.65f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.420055).abs() < 1e-6);

        let twin = LinearHead::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        for f in [[1.0, 0.0], [0.0, 1.0], [0.8, -0.6]] {
            assert!((cosine_loss(&f, &twin, 1, &plain).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            cosine_loss(&[2.0, 0.0], &head, 0, &plain),
            Err(TrainError::NotNormalized)
        ));
    }

    #[test]
    fn weighted_loss_examples() {
        assert_eq!(weighted_loss(3.0, 0.0, 1.0), 3.0);
        assert_eq!(weighted_loss(3.0, 1.0, 1.0), 0.0);
        assert_eq!(weighted_loss(2.0, 0.5, 1.0), 1.0);
        assert_eq!(weighted_loss(2.0, 0.7, 0.0), 2.0);
    }

    proptest::proptest! {
        #[test]
        fn cosine_loss_decreases_with_target_similarity(t1 in -1.0f64..1.0, t2 in -1.0f64..1.0, other in -1.0f64..1.0) {
            proptest::prop_assume!((t1 - t2).abs() > 1e-6);
            let cfg = LossConfig::default();
            let probs = |t: f64| -margin_softmax(&[t, other, -other], 0, &cfg)[0].ln();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            proptest::prop_assert!(probs(hi) < probs(lo));
        }
    }

    fn toy() -> (EmbeddingSet, LabelSet) {
        generate_identities(&SynthConfig::new(3, 10, 6, 0.4, 2)).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (emb, labels) = toy();
        let cfg = TrainConfig::default();
        let mut m = initial_model(3, 6, &cfg);
        // move away from the W2 = 0 start so every block has signal
        let enc = m.encoder.as_mut().unwrap();
        let mut r = rng::stream(4, 4);
        for p in enc.params.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut r);
            *p += 0.3 * g;
        }
        let samples: Vec<Sample> = [0usize, 11, 22, 5]
            .iter()
            .zip([1.0, 0.5, 0.8, 1.0])
            .map(|(&i, w)| Sample {
                x: emb.row(i),
                label: labels.get(i),
                weight: w,
            })
            .collect();
        let (_, grad) = loss_and_grad(&m, &samples, &cfg.loss);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let mut delta = vec![0.0; grad.len()];
            delta[i] = h;
            let mut plus = m.clone();
            apply_step(&mut plus, &delta);
            delta[i] = -h;
            let mut minus = m.clone();
            apply_step(&mut minus, &delta);
            let fd = (loss_and_grad(&plus, &samples, &cfg.loss).0 - loss_and_grad(&minus, &samples, &cfg.loss).0)
                / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs());
            if denom > 1e-7 {
                worst = worst.max((fd - grad[i]).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn identity_encoder_is_identity() {
        let (emb, _) = toy();
        let m = initial_model(3, 6, &TrainConfig::default());
        let out = embed(&m, &emb).unwrap();
        for (a, b) in out.as_slice().iter().zip(emb.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let no_enc = TrainedModel { encoder: None, ..m };
        assert!(matches!(embed(&no_enc, &emb), Err(TrainError::NoEncoder)));
    }

    fn mean_within_id_cos(emb: &EmbeddingSet, labels: &LabelSet) -> f64 {
        let (mut s, mut c) = (0.0, 0);
        for i in 0..emb.n() {
            for j in i + 1..emb.n() {
                if labels.get(i) == labels.get(j) {
                    s += emb.dot(i, j);
                    c += 1;
                }
            }
        }
        s / c as f64
    }

    #[test]
    fn training_tightens_identities_and_lowers_loss() {
        let (emb, labels) = generate_identities(&SynthConfig::new(8, 20, 12, 0.5, 5)).unwrap();
        let cfg = TrainConfig::default();
        let m = train_head((&emb, &labels), None, &cfg).unwrap();
        let init = initial_model(8, 12, &cfg);
        assert!(
            training_loss(&m, (&emb, &labels), None, &cfg).unwrap()
                < training_loss(&init, (&emb, &labels), None, &cfg).unwrap()
        );
        let out = embed(&m, &emb).unwrap();
        assert!(mean_within_id_cos(&out, &labels) > mean_within_id_cos(&emb, &labels));
        for k in 0..m.head.num_classes() {
            assert!((norm(m.head.row(k)) - 1.0).abs() < 1e-5);
        }
        assert_eq!(m, train_head((&emb, &labels), None, &cfg).unwrap());
    }

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn pseudo_set_rules() {
        let (emb, labels) = toy();
        let c = Clustering::from_labels(&labels);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let clash = PseudoSet {
            emb: &emb,
            clustering: &c,
            class_offset: 1,
        };
        assert!(matches!(
            train_head((&emb, &labels), Some(clash), &cfg),
            Err(TrainError::LabelCollision { offset: 1, labeled: 3 })
        ));
        let ok = PseudoSet {
            class_offset: 3,
            ..clash
        };
        let m = train_head((&emb, &labels), Some(ok), &cfg).unwrap();
        assert_eq!(m.head.num_classes(), 6);
        // an empty pseudo set is the supervised baseline
        let empty_c = Clustering::new(vec![None; emb.n()]).unwrap();
        let empty = PseudoSet {
            emb: &emb,
            clustering: &empty_c,
            class_offset: 3,
        };
        assert_eq!(
            train_head((&emb, &labels), Some(empty), &cfg).unwrap(),
            train_head((&emb, &labels), None, &cfg).unwrap()
        );
    }

    #[test]
    fn certain_noise_has_no_effect() {
        // pseudo samples with p_minus = 1 carry zero weight
        let (emb, labels) = toy();
        let c = Clustering::from_labels(&labels)
            .with_p_minus(vec![1.0; emb.n()])
            .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let p = PseudoSet {
            emb: &emb,
            clustering: &c,
            class_offset: 3,
        };
        let m = train_head((&emb, &labels), Some(p), &cfg).unwrap();
        let loss = training_loss(&m, (&emb, &labels), Some(p), &cfg).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn persistence_roundtrip() {
        let (emb, labels) = toy();
        let m = train_head(
            (&emb, &labels),
            None,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_trained(&m, &path).unwrap();
        let back = load_trained(&path).unwrap();
        assert_eq!(back.head.num_classes(), 3);
        for (a, b) in back.head.weights().iter().zip(m.head.weights()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(back.encoder.is_some());
    }
}
