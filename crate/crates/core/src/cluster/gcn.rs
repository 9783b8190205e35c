//! Proposal-purity regressor.
//!
//! Each proposal is a small graph: its members' embeddings joined by the
//! k-NN edges that fall inside the proposal. Two graph-convolution layers
//! `relu(W_self H + W_agg D^-1 A H)` are followed by a max-pool over members
//! and a linear head predicting (IoU, IoP) against the modal identity.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{proposal_targets, ClusterError};
use crate::data::{EmbeddingSet, LabelSet};
use crate::knn::{ClusterProposal, KnnGraph};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalScore {
    pub iou_pred: f64,
    pub iop_pred: f64,
}

/// Layer widths `dims[0] -> dims[1] -> ... ` followed by a 2-output head.
/// Parameters live in one flat vector: per layer `W_self` then `W_agg`
/// (each `out x in`, row-major), then the head `2 x h` and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    dims: Vec<usize>,
    center_features: bool,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    /// Hidden widths; `None` picks `max(d/2, 8)` and `max(d/8, 8)`.
    pub hidden: Option<[usize; 2]>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Subtract the proposal's mean embedding from its member features.
    pub center_features: bool,
    /// Apply a fresh random rotation to each training proposal's features
    /// at every step. Targets and adjacency are rotation invariant.
    pub rotate: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            epochs: 60,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
            center_features: true,
            rotate: true,
        }
    }
}

pub fn default_hidden(d: usize) -> [usize; 2] {
    [(d / 2).max(8), (d / 8).max(8)]
}

impl GcnModel {
    pub fn zeros(dims: &[usize], center_features: bool) -> Self {
        let mut m = Self {
            dims: dims.to_vec(),
            center_features,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.num_params()];
        m
    }

    /// Glorot-uniform layer weights, zero head bias.
    pub fn init(dims: &[usize], center_features: bool, seed: u64) -> Self {
        let mut m = Self::zeros(dims, center_features);
        let mut r = rng::stream(seed, 0);
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (i, o) = (dims[l], dims[l + 1]);
            let a = (6.0 / (i + o) as f64).sqrt();
            for p in &mut m.params[off..off + 2 * i * o] {
                *p = r.random_range(-a..a);
            }
            off += 2 * i * o;
        }
        let h = *dims.last().unwrap();
        let a = (6.0 / (h + 2) as f64).sqrt();
        for p in &mut m.params[off..off + 2 * h] {
            *p = r.random_range(-a..a);
        }
        m
    }

    pub fn from_params(dims: &[usize], center_features: bool, params: Vec<f64>) -> Result<Self, ClusterError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ClusterError::BadModel(format!("invalid layer widths {dims:?}")));
        }
        let mut m = Self::zeros(dims, center_features);
        if params.len() != m.params.len() {
            return Err(ClusterError::BadModel(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ClusterError::BadModel("non-finite parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn center_features(&self) -> bool {
        self.center_features
    }

    fn num_params(&self) -> usize {
        let layers: usize = self.dims.windows(2).map(|w| 2 * w[0] * w[1]).sum();
        layers + 2 * self.dims.last().unwrap() + 2
    }

    fn head_offset(&self) -> usize {
        self.dims.windows(2).map(|w| 2 * w[0] * w[1]).sum()
    }
}

/// Row-normalized adjacency restricted to one proposal.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    s: usize,
    x: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

pub(crate) fn prepare(p: &ClusterProposal, emb: &EmbeddingSet, g: &KnnGraph, center: bool) -> Prepared {
    let s = p.members.len();
    let d = emb.d();
    let local: HashMap<usize, usize> = p.members.iter().enumerate().map(|(a, &i)| (i, a)).collect();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); s];
    for (a, &i) in p.members.iter().enumerate() {
        for (&j, &sim) in g.neighbors(i).iter().zip(g.sims(i)) {
            if let Some(&b) = local.get(&j) {
                if a != b {
                    let w = sim.max(0.0);
                    adj[a].push((b, w));
                    adj[b].push((a, w));
                }
            }
        }
    }
    for row in &mut adj {
        row.sort_by_key(|x| x.0);
        row.dedup_by_key(|e| e.0);
        let deg: f64 = row.iter().map(|e| e.1).sum();
        if deg > 0.0 {
            row.iter_mut().for_each(|e| e.1 /= deg);
        } else {
            row.clear();
        }
    }
    let mut x = Vec::with_capacity(s * d);
    p.members.iter().for_each(|&i| x.extend_from_slice(emb.row(i)));
    if center && s > 0 {
        let mut mean = vec![0.0; d];
        x.chunks_exact(d)
            .for_each(|r| mean.iter_mut().zip(r).for_each(|(m, v)| *m += v));
        mean.iter_mut().for_each(|m| *m /= s as f64);
        x.chunks_exact_mut(d)
            .for_each(|r| r.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m));
    }
    Prepared { s, x, adj }
}

fn aggregate(adj: &[Vec<(usize, f64)>], h: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for (r, row) in adj.iter().enumerate() {
        let dst = &mut out[r * width..(r + 1) * width];
        for &(c, w) in row {
            dst.iter_mut()
                .zip(&h[c * width..(c + 1) * width])
                .for_each(|(o, v)| *o += w * v);
        }
    }
    out
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    aggregated: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    out: [f64; 2],
}

fn forward(m: &GcnModel, p: &Prepared) -> Trace {
    let s = p.s;
    let mut h = p.x.clone();
    let mut off = 0;
    let mut inputs = Vec::new();
    let mut aggregated = Vec::new();
    let mut pre = Vec::new();
    for l in 0..m.dims.len() - 1 {
        let (i, o) = (m.dims[l], m.dims[l + 1]);
        let ws = &m.params[off..off + o * i];
        let wa = &m.params[off + o * i..off + 2 * o * i];
        off += 2 * o * i;
        let ph = aggregate(&p.adj, &h, i);
        let mut z = vec![0.0; s * o];
        for r in 0..s {
            let hr = &h[r * i..(r + 1) * i];
            let pr = &ph[r * i..(r + 1) * i];
            for k in 0..o {
                let a: f64 = ws[k * i..(k + 1) * i].iter().zip(hr).map(|(w, v)| w * v).sum();
                let b: f64 = wa[k * i..(k + 1) * i].iter().zip(pr).map(|(w, v)| w * v).sum();
                z[r * o + k] = a + b;
            }
        }
        let next: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        inputs.push(std::mem::replace(&mut h, next));
        aggregated.push(ph);
        pre.push(z);
    }
    let w = *m.dims.last().unwrap();
    let mut pooled = vec![f64::NEG_INFINITY; w];
    let mut argmax = vec![0; w];
    for r in 0..s {
        for k in 0..w {
            if h[r * w + k] > pooled[k] {
                pooled[k] = h[r * w + k];
                argmax[k] = r;
            }
        }
    }
    if s == 0 {
        pooled.iter_mut().for_each(|v| *v = 0.0);
    }
    let head = &m.params[off..off + 2 * w];
    let bias = &m.params[off + 2 * w..off + 2 * w + 2];
    let mut out = [0.0; 2];
    for (t, o) in out.iter_mut().enumerate() {
        *o = bias[t]
            + head[t * w..(t + 1) * w]
                .iter()
                .zip(&pooled)
                .map(|(a, b)| a * b)
                .sum::<f64>();
    }
    Trace {
        inputs,
        aggregated,
        pre,
        pooled,
        argmax,
        out,
    }
}

/// Gradient of `0.5 * sum_t (out_t - target_t)^2 * scale` with respect to
/// all parameters, accumulated into `grad`.
fn backward(m: &GcnModel, p: &Prepared, tr: &Trace, target: [f64; 2], scale: f64, grad: &mut [f64]) {
    let w = *m.dims.last().unwrap();
    let hoff = m.head_offset();
    let dout = [(tr.out[0] - target[0]) * scale, (tr.out[1] - target[1]) * scale];
    let mut dpooled = vec![0.0; w];
    for t in 0..2 {
        for k in 0..w {
            grad[hoff + t * w + k] += dout[t] * tr.pooled[k];
            dpooled[k] += dout[t] * m.params[hoff + t * w + k];
        }
        grad[hoff + 2 * w + t] += dout[t];
    }
    if p.s == 0 {
        return;
    }
    let mut dh = vec![0.0; p.s * w];
    for k in 0..w {
        dh[tr.argmax[k] * w + k] += dpooled[k];
    }
    let mut offsets: Vec<usize> = Vec::new();
    let mut off = 0;
    for win in m.dims.windows(2) {
        offsets.push(off);
        off += 2 * win[0] * win[1];
    }
    for l in (0..m.dims.len() - 1).rev() {
        let (i, o) = (m.dims[l], m.dims[l + 1]);
        let off = offsets[l];
        let dz: Vec<f64> = dh
            .iter()
            .zip(&tr.pre[l])
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let h = &tr.inputs[l];
        let ph = &tr.aggregated[l];
        let mut dph = vec![0.0; p.s * i];
        let mut dprev = vec![0.0; p.s * i];
        for r in 0..p.s {
            for k in 0..o {
                let g = dz[r * o + k];
                if g == 0.0 {
                    continue;
                }
                let ws = off + k * i;
                let wa = off + o * i + k * i;
                for c in 0..i {
                    grad[ws + c] += g * h[r * i + c];
                    grad[wa + c] += g * ph[r * i + c];
                    dprev[r * i + c] += g * m.params[ws + c];
                    dph[r * i + c] += g * m.params[wa + c];
                }
            }
        }
        if l == 0 {
            break;
        }
        // transpose of the row-normalized aggregation
        for (r, row) in p.adj.iter().enumerate() {
            for &(c, wgt) in row {
                for q in 0..i {
                    dprev[c * i + q] += wgt * dph[r * i + q];
                }
            }
        }
        dh = dprev;
    }
}

fn check_dims(m: &GcnModel, emb: &EmbeddingSet) -> Result<(), ClusterError> {
    if m.dims[0] != emb.d() {
        return Err(ClusterError::DimensionMismatch {
            model: m.dims[0],
            embeddings: emb.d(),
        });
    }
    Ok(())
}

pub fn gcn_forward(
    m: &GcnModel,
    p: &ClusterProposal,
    emb: &EmbeddingSet,
    g: &KnnGraph,
) -> Result<ProposalScore, ClusterError> {
    check_dims(m, emb)?;
    let out = forward(m, &prepare(p, emb, g, m.center_features)).out;
    Ok(ProposalScore {
        iou_pred: out[0],
        iop_pred: out[1],
    })
}

/// Scores every proposal; proposals are independent and run in parallel.
pub fn score_proposals(
    m: &GcnModel,
    proposals: &[ClusterProposal],
    emb: &EmbeddingSet,
    g: &KnnGraph,
) -> Result<Vec<ProposalScore>, ClusterError> {
    check_dims(m, emb)?;
    Ok(proposals
        .par_iter()
        .map(|p| {
            let out = forward(m, &prepare(p, emb, g, m.center_features)).out;
            ProposalScore {
                iou_pred: out[0],
                iop_pred: out[1],
            }
        })
        .collect())
}

/// Haar-random orthogonal matrix: QR of a gaussian matrix with the signs of
/// R's diagonal folded into Q.
fn random_rotation(d: usize, r: &mut rng::Rng) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| r.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let rd = qr.r().diagonal();
    for (j, v) in rd.iter().enumerate() {
        if *v < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn rotated(p: &Prepared, d: usize, r: &mut rng::Rng) -> Prepared {
    let q = random_rotation(d, r);
    let mut x = Vec::with_capacity(p.x.len());
    for row in p.x.chunks_exact(d) {
        x.extend((&q * DVector::from_column_slice(row)).iter());
    }
    Prepared {
        s: p.s,
        x,
        adj: p.adj.clone(),
    }
}

/// Mean squared error over both outputs and its gradient.
pub(crate) fn loss_and_grad(m: &GcnModel, batch: &[(&Prepared, [f64; 2])]) -> (f64, Vec<f64>) {
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(p, t)| {
            let tr = forward(m, p);
            let mut g = vec![0.0; m.params.len()];
            backward(m, p, &tr, *t, scale, &mut g);
            let l = (tr.out[0] - t[0]).powi(2) + (tr.out[1] - t[1]).powi(2);
            (l, g)
        })
        .collect();
    let mut grad = vec![0.0; m.params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss * scale * 0.5, grad)
}

pub(crate) fn training_set(
    proposals: &[ClusterProposal],
    emb: &EmbeddingSet,
    g: &KnnGraph,
    labels: &LabelSet,
    center: bool,
) -> Vec<(Prepared, [f64; 2])> {
    proposals
        .par_iter()
        .map(|p| {
            let (iou, iop) = proposal_targets(p, labels);
            (prepare(p, emb, g, center), [iou, iop])
        })
        .collect()
}

fn max_relative_fd_error(m: &GcnModel, batch: &[(&Prepared, [f64; 2])], h: f64) -> f64 {
    let (_, grad) = loss_and_grad(m, batch);
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let mut plus = m.clone();
        plus.params[i] += h;
        let mut minus = m.clone();
        minus.params[i] -= h;
        let fd = (loss_and_grad(&plus, batch).0 - loss_and_grad(&minus, batch).0) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs());
        if denom > 1e-7 {
            worst = worst.max((fd - grad[i]).abs() / denom);
        }
    }
    worst
}

/// Largest relative gap between the analytic gradient of the training loss
/// on `proposals` and a central difference with step `h`, over every
/// parameter whose gradient magnitude exceeds 1e-7.
pub fn gradient_check(
    m: &GcnModel,
    proposals: &[ClusterProposal],
    emb: &EmbeddingSet,
    g: &KnnGraph,
    labels: &LabelSet,
    h: f64,
) -> Result<f64, ClusterError> {
    check_dims(m, emb)?;
    if proposals.is_empty() {
        return Err(ClusterError::NoProposals);
    }
    let data = training_set(proposals, emb, g, labels, m.center_features());
    let batch: Vec<(&Prepared, [f64; 2])> = data.iter().map(|(p, t)| (p, *t)).collect();
    Ok(max_relative_fd_error(m, &batch, h))
}

/// Mean squared error of the model on labeled proposals.
pub fn gcn_mse(
    m: &GcnModel,
    proposals: &[ClusterProposal],
    emb: &EmbeddingSet,
    g: &KnnGraph,
    labels: &LabelSet,
) -> Result<f64, ClusterError> {
    check_dims(m, emb)?;
    let data = training_set(proposals, emb, g, labels, m.center_features);
    let batch: Vec<(&Prepared, [f64; 2])> = data.iter().map(|(p, t)| (p, *t)).collect();
    Ok(loss_and_grad(m, &batch).0)
}

/// Fits the regressor to proposal IoU/IoP targets with Adam on mini-batches.
pub fn gcn_train(
    proposals: &[ClusterProposal],
    emb: &EmbeddingSet,
    g: &KnnGraph,
    labels: &LabelSet,
    cfg: &GcnConfig,
) -> Result<GcnModel, ClusterError> {
    if proposals.is_empty() {
        return Err(ClusterError::NoProposals);
    }
    let d = emb.d();
    let [h1, h2] = cfg.hidden.unwrap_or_else(|| default_hidden(d));
    let mut m = GcnModel::init(&[d, h1, h2], cfg.center_features, cfg.seed);
    let data = training_set(proposals, emb, g, labels, cfg.center_features);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut mom = vec![0.0; m.params.len()];
    let mut vel = vec![0.0; m.params.len()];
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            step += 1;
            let grad = if cfg.rotate {
                let stream = rng::derive(cfg.seed, step as u64);
                let rotated: Vec<(Prepared, [f64; 2])> = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(b, &i)| (rotated(&data[i].0, d, &mut rng::stream(stream, b as u64)), data[i].1))
                    .collect();
                let batch: Vec<(&Prepared, [f64; 2])> = rotated.iter().map(|(p, t)| (p, *t)).collect();
                loss_and_grad(&m, &batch).1
            } else {
                let batch: Vec<(&Prepared, [f64; 2])> = chunk.iter().map(|&i| (&data[i].0, data[i].1)).collect();
                loss_and_grad(&m, &batch).1
            };
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for (((p, g), mo), ve) in m.params.iter_mut().zip(&grad).zip(&mut mom).zip(&mut vel) {
                *mo = b1 * *mo + (1.0 - b1) * g;
                *ve = b2 * *ve + (1.0 - b2) * g * g;
                *p -= cfg.lr * (*mo / c1) / ((*ve / c2).sqrt() + eps);
            }
        }
    }
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: Vec<usize>,
    center_features: bool,
    num_params: usize,
    dtype: String,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Little-endian `f32` parameter blob plus a JSON sidecar with the shapes.
pub fn save_model(m: &GcnModel, blob: &Path) -> Result<(), ClusterError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ClusterError::Io { path, source }
    };
    let bytes: Vec<u8> = m.params.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
    std::fs::write(blob, bytes).map_err(io(blob))?;
    let side = Sidecar {
        dims: m.dims.clone(),
        center_features: m.center_features,
        num_params: m.params.len(),
        dtype: "f32le".into(),
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| ClusterError::BadModel(e.to_string()))?;
    let path = sidecar_path(blob);
    std::fs::write(&path, text + "\n").map_err(io(&path))
}

pub fn load_model(blob: &Path) -> Result<GcnModel, ClusterError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ClusterError::Io { path, source }
    };
    let path = sidecar_path(blob);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| ClusterError::BadModel(e.to_string()))?;
    if side.dtype != "f32le" {
        return Err(ClusterError::BadModel(format!("unsupported dtype {}", side.dtype)));
    }
    let bytes = std::fs::read(blob).map_err(io(blob))?;
    if bytes.len() != side.num_params * 4 {
        return Err(ClusterError::BadModel(format!(
            "blob has {} bytes, expected {}",
            bytes.len(),
            side.num_params * 4
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    GcnModel::from_params(&side.dims, side.center_features, params)
}
