//! Extreme-value modelling of classifier scores.
//!
//! Max-logit scores of unlabeled samples are bimodal: samples whose identity
//! the classifier was trained on score high, unseen identities score low.
//! Otsu's threshold gives an initial split, a Weibull is fitted by maximum
//! likelihood to each side, and per-component confidence quantiles give two
//! cuts. Scores between the cuts are rejected as ambiguous.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::noise::{HeadError, LinearHead};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvtError {
    #[error("scores are degenerate (fewer than two distinct values)")]
    DegenerateScores,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("Weibull shape iteration did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("quantile level {0} outside (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("one side of the threshold has {low} / {high} samples, need {needed} each")]
    OneSidedData { low: usize, high: usize, needed: usize },
    #[error("n_bins must be >= 2, got {0}")]
    BadBins(usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Head(#[from] HeadError),
}

pub const MIN_FIT_SAMPLES: usize = 8;
pub const DEFAULT_OTSU_BINS: usize = 256;
pub const DEFAULT_SSE_BINS: usize = 50;
const NEWTON_TOL: f64 = 1e-9;
const NEWTON_MAX_ITERS: usize = 100;

/// Two- or three-parameter Weibull: the density of `x - shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub shape_k: f64,
    pub scale_lambda: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eval {
    Pdf,
    Cdf,
    Quantile,
}

impl WeibullParams {
    pub fn new(shape_k: f64, scale_lambda: f64, shift: f64) -> Self {
        assert!(
            shape_k > 0.0 && scale_lambda > 0.0,
            "Weibull parameters must be positive"
        );
        Self {
            shape_k,
            scale_lambda,
            shift,
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = x - self.shift;
        if z < 0.0 {
            return 0.0;
        }
        let (k, lam) = (self.shape_k, self.scale_lambda);
        let u = z / lam;
        if u == 0.0 {
            return match k.partial_cmp(&1.0) {
                Some(std::cmp::Ordering::Less) => f64::INFINITY,
                Some(std::cmp::Ordering::Equal) => 1.0 / lam,
                _ => 0.0,
            };
        }
        (k / lam) * u.powf(k - 1.0) * (-u.powf(k)).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = x - self.shift;
        if z <= 0.0 {
            return 0.0;
        }
        -(-(z / self.scale_lambda).powf(self.shape_k)).exp_m1()
    }

    /// `1 - cdf`, computed without cancellation.
    pub fn survival(&self, x: f64) -> f64 {
        let z = x - self.shift;
        if z <= 0.0 {
            return 1.0;
        }
        (-(z / self.scale_lambda).powf(self.shape_k)).exp()
    }

    pub fn quantile(&self, p: f64) -> Result<f64, EvtError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(EvtError::QuantileOutOfRange(p));
        }
        Ok(self.shift + self.scale_lambda * (-(-p).ln_1p()).powf(1.0 / self.shape_k))
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&x| self.pdf(x).ln()).sum()
    }
}

pub fn weibull_eval(p: &WeibullParams, x: f64, which: Eval) -> Result<f64, EvtError> {
    match which {
        Eval::Pdf => Ok(p.pdf(x)),
        Eval::Cdf => Ok(p.cdf(x)),
        Eval::Quantile => p.quantile(x),
    }
}

fn check_finite(scores: &[f64]) -> Result<(), EvtError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(EvtError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Equal-width histogram bin of each score over `[min, max]`.
pub fn histogram_bins(scores: &[f64], n_bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let bins = scores
        .iter()
        .map(|&s| (((s - lo) / width).floor() as usize).min(n_bins - 1))
        .collect();
    (lo, width, bins)
}

/// Otsu's threshold on an `n_bins` histogram. Returns the interior bin edge
/// that maximizes between-class variance (lowest edge on ties).
///
/// With bin centers as class values the criterion is proportional to
/// `(S0*n1 - S1*n0)^2 / (n0*n1)` where `n` are class counts and `S` sums of
/// bin indices, so candidates are compared exactly in integers.
pub fn otsu_threshold(scores: &[f64], n_bins: usize) -> Result<f64, EvtError> {
    if n_bins < 2 {
        return Err(EvtError::BadBins(n_bins));
    }
    check_finite(scores)?;
    let (lo, width, bins) = histogram_bins(scores, n_bins);
    if !(width > 0.0) {
        return Err(EvtError::DegenerateScores);
    }
    let mut hist = vec![0u128; n_bins];
    bins.iter().for_each(|&b| hist[b] += 1);
    let total_n: u128 = scores.len() as u128;
    let total_s: u128 = hist.iter().enumerate().map(|(b, &c)| b as u128 * c).sum();

    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, u128, u128)> = None;
    for edge in 1..n_bins {
        n0 += hist[edge - 1];
        s0 += (edge as u128 - 1) * hist[edge - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let diff = (s0 * n1).abs_diff(s1 * n0);
        let num = diff * diff;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => match (num.checked_mul(bd), bn.checked_mul(den)) {
                (Some(a), Some(b)) => a > b,
                _ => num as f64 / den as f64 > bn as f64 / bd as f64,
            },
        };
        if better {
            best = Some((edge, num, den));
        }
    }
    let (edge, _, _) = best.ok_or(EvtError::DegenerateScores)?;
    Ok(lo + edge as f64 * width)
}

/// Moment-based shape guess from the coefficient of variation.
fn moment_shape(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let var = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / sw;
    let cv = var.sqrt() / mean;
    if cv > 0.0 && cv.is_finite() {
        cv.powf(-1.086).clamp(0.05, 500.0)
    } else {
        1.0
    }
}

/// Weighted profile-likelihood fit of a two-parameter Weibull to strictly
/// positive data. Solves
/// `sum w y^k ln y / sum w y^k - 1/k - mean_w(ln y) = 0`
/// (with `y = x / max x`, which leaves `k` unchanged and avoids overflow) by
/// Newton iteration safeguarded with bisection.
fn fit_positive(x: &[f64], w: &[f64]) -> Result<(f64, f64), EvtError> {
    let xmax = x.iter().copied().fold(0.0, f64::max);
    let ln_y: Vec<f64> = x.iter().map(|&v| (v / xmax).ln()).collect();
    let sw: f64 = w.iter().sum();
    let mean_ln = ln_y.iter().zip(w).map(|(l, w)| l * w).sum::<f64>() / sw;

    let sums = |k: f64| {
        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
        for (l, wi) in ln_y.iter().zip(w) {
            let t = wi * (k * l).exp();
            a0 += t;
            a1 += t * l;
            a2 += t * l * l;
        }
        (a0, a1, a2)
    };
    let profile = |k: f64| {
        let (a0, a1, a2) = sums(k);
        let g = a1 / a0 - 1.0 / k - mean_ln;
        let dg = (a2 * a0 - a1 * a1) / (a0 * a0) + 1.0 / (k * k);
        (g, dg)
    };

    let mut k = moment_shape(x, w);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..NEWTON_MAX_ITERS {
        let (g, dg) = profile(k);
        if g < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let mut next = k - g / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * k };
        }
        let done = (next - k).abs() <= NEWTON_TOL * k.max(1.0);
        k = next;
        if done {
            let (a0, _, _) = sums(k);
            let lambda = xmax * (a0 / sw).powf(1.0 / k);
            return Ok((k, lambda));
        }
    }
    Err(EvtError::NonConvergence(NEWTON_MAX_ITERS))
}

fn fit_shift(samples: &[f64]) -> Result<f64, EvtError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(EvtError::TooFewSamples {
            needed: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    check_finite(samples)?;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(EvtError::DegenerateScores);
    }
    Ok(if lo <= 0.0 { lo - 1e-6 * range } else { 0.0 })
}

/// Weibull fit with the support starting just below the smallest sample.
pub fn weibull_fit_anchored(samples: &[f64]) -> Result<WeibullParams, EvtError> {
    fit_shift(samples)?;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = lo - 1e-6 * (hi - lo);
    let x: Vec<f64> = samples.iter().map(|s| s - shift).collect();
    let (k, lambda) = fit_positive(&x, &vec![1.0; x.len()])?;
    Ok(WeibullParams::new(k, lambda, shift))
}

/// Maximum-likelihood Weibull fit. Data with non-positive values is shifted
/// to start just above zero; the shift is recorded in the result.
pub fn weibull_fit_mle(samples: &[f64]) -> Result<WeibullParams, EvtError> {
    let shift = fit_shift(samples)?;
    let x: Vec<f64> = samples.iter().map(|s| s - shift).collect();
    let (k, lambda) = fit_positive(&x, &vec![1.0; x.len()])?;
    Ok(WeibullParams::new(k, lambda, shift))
}

/// Weighted fit with a fixed shift; samples at or below the shift are ignored.
fn weibull_fit_weighted(samples: &[f64], weights: &[f64], shift: f64) -> Result<WeibullParams, EvtError> {
    let (x, w): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .zip(weights)
        .filter(|(s, w)| **s > shift && **w > 0.0)
        .map(|(s, w)| (s - shift, *w))
        .unzip();
    if x.len() < MIN_FIT_SAMPLES {
        return Err(EvtError::TooFewSamples {
            needed: MIN_FIT_SAMPLES,
            got: x.len(),
        });
    }
    let (k, lambda) = fit_positive(&x, &w)?;
    Ok(WeibullParams::new(k, lambda, shift))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSeparation {
    pub otsu_t: f64,
    /// Component fitted below the Otsu threshold (identities unseen in training).
    pub low: WeibullParams,
    /// Component fitted above it (identities seen in training).
    pub high: WeibullParams,
    /// Mixing weight of `high`.
    pub high_weight: f64,
    pub lower_cut: f64,
    pub upper_cut: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureOptions {
    pub n_bins: usize,
    /// Per-component confidence level of the cuts.
    pub confidence: f64,
    /// EM refinement rounds after the Otsu-initialized fit (0 = none).
    pub em_iterations: usize,
    pub anchor: Anchor,
}

/// Location of each mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Support starts at zero; shifted only when a side has non-positive scores.
    Origin,
    /// Support starts just below each side's smallest score.
    SampleMin,
    /// Per side, whichever of the two above has the higher likelihood. The
    /// sample-min candidate needs shape >= 1 (bounded density at the anchor).
    Likelihood,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_OTSU_BINS,
            confidence: 0.95,
            em_iterations: 0,
            anchor: Anchor::Likelihood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Disjoint,
    Overlap,
    Rejected,
}

/// Largest pre-softmax score per sample.
pub fn max_logits(head: &LinearHead, emb: &EmbeddingSet) -> Result<Vec<f64>, EvtError> {
    head.check_dim(emb.d())?;
    Ok(emb
        .rows()
        .map(|x| head.logits(x).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

pub fn split_at(scores: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    scores.iter().partition(|&&s| s < t)
}

pub fn fit_two_weibull_mixture(scores: &[f64], opts: &MixtureOptions) -> Result<MixtureSeparation, EvtError> {
    if !(opts.confidence > 0.5 && opts.confidence < 1.0) {
        return Err(EvtError::QuantileOutOfRange(opts.confidence));
    }
    let otsu_t = otsu_threshold(scores, opts.n_bins)?;
    let (below, above) = split_at(scores, otsu_t);
    if below.len() < MIN_FIT_SAMPLES || above.len() < MIN_FIT_SAMPLES {
        return Err(EvtError::OneSidedData {
            low: below.len(),
            high: above.len(),
            needed: MIN_FIT_SAMPLES,
        });
    }
    let fit = |side: &[f64]| -> Result<WeibullParams, EvtError> {
        match opts.anchor {
            Anchor::Origin => weibull_fit_mle(side),
            Anchor::SampleMin => weibull_fit_anchored(side),
            Anchor::Likelihood => {
                let origin = weibull_fit_mle(side)?;
                match weibull_fit_anchored(side) {
                    Ok(a) if a.shape_k >= 1.0 && a.log_likelihood(side) > origin.log_likelihood(side) => Ok(a),
                    _ => Ok(origin),
                }
            }
        }
    };
    let mut low = fit(&below)?;
    let mut high = fit(&above)?;
    let mut high_weight = above.len() as f64 / scores.len() as f64;

    for _ in 0..opts.em_iterations {
        let resp: Vec<f64> = scores
            .iter()
            .map(|&s| {
                let a = (1.0 - high_weight) * low.pdf(s);
                let b = high_weight * high.pdf(s);
                if a + b > 0.0 && (a + b).is_finite() {
                    b / (a + b)
                } else if s >= otsu_t {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        high_weight = resp.iter().sum::<f64>() / scores.len() as f64;
        let low_w: Vec<f64> = resp.iter().map(|r| 1.0 - r).collect();
        low = weibull_fit_weighted(scores, &low_w, low.shift)?;
        high = weibull_fit_weighted(scores, &resp, high.shift)?;
    }

    Ok(MixtureSeparation {
        otsu_t,
        lower_cut: low.quantile(opts.confidence)?,
        upper_cut: high.quantile(1.0 - opts.confidence)?,
        low,
        high,
        high_weight,
    })
}

pub fn separate_overlap(scores: &[f64], mix: &MixtureSeparation) -> Vec<Decision> {
    let a = mix.lower_cut.min(mix.upper_cut);
    let b = mix.lower_cut.max(mix.upper_cut);
    scores
        .iter()
        .map(|&z| {
            if z < a {
                Decision::Disjoint
            } else if z > b {
                Decision::Overlap
            } else {
                Decision::Rejected
            }
        })
        .collect()
}

/// Single cut: at or above `t` is overlap.
pub fn separate_at_threshold(scores: &[f64], t: f64) -> Vec<Decision> {
    scores
        .iter()
        .map(|&z| if z >= t { Decision::Overlap } else { Decision::Disjoint })
        .collect()
}

pub trait Density {
    fn pdf(&self, x: f64) -> f64;
}

impl Density for WeibullParams {
    fn pdf(&self, x: f64) -> f64 {
        WeibullParams::pdf(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: f64,
    pub std: f64,
}

impl GaussianParams {
    /// Maximum-likelihood (population) moments.
    pub fn fit(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl Density for GaussianParams {
    fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Weighted sum of component densities.
pub struct Mixture<D> {
    pub components: Vec<(f64, D)>,
}

impl<D: Density> Density for Mixture<D> {
    fn pdf(&self, x: f64) -> f64 {
        self.components.iter().map(|(w, d)| w * d.pdf(x)).sum()
    }
}

impl MixtureSeparation {
    pub fn density(&self) -> Mixture<WeibullParams> {
        Mixture {
            components: vec![(1.0 - self.high_weight, self.low), (self.high_weight, self.high)],
        }
    }
}

/// Two gaussians fitted to either side of `t`, weighted by side counts.
pub fn gaussian_mixture_at(scores: &[f64], t: f64) -> Mixture<GaussianParams> {
    let (below, above) = split_at(scores, t);
    let n = scores.len() as f64;
    Mixture {
        components: vec![
            (below.len() as f64 / n, GaussianParams::fit(&below)),
            (above.len() as f64 / n, GaussianParams::fit(&above)),
        ],
    }
}

/// Sum of squared differences between the normalized histogram density of
/// `samples` and the model density at bin centers.
pub fn fit_sse(model: &impl Density, samples: &[f64], n_bins: usize) -> Result<f64, EvtError> {
    if n_bins < 2 {
        return Err(EvtError::BadBins(n_bins));
    }
    check_finite(samples)?;
    let (lo, width, bins) = histogram_bins(samples, n_bins);
    if !(width > 0.0) {
        return Err(EvtError::DegenerateScores);
    }
    let mut counts = vec![0usize; n_bins];
    bins.iter().for_each(|&b| counts[b] += 1);
    let total = samples.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let empirical = c as f64 / (total * width);
            let center = lo + (b as f64 + 0.5) * width;
            (empirical - model.pdf(center)).powi(2)
        })
        .sum())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use rand_distr::{Distribution, Weibull};

    pub(crate) fn weibull_samples(k: f64, lambda: f64, n: usize, seed: u64) -> Vec<f64> {
        let dist = Weibull::new(lambda, k).unwrap();
        let mut r = crate::rng::stream(seed, 0);
        (0..n).map(|_| dist.sample(&mut r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::weibull_samples;
    use super::*;
    use rand::Rng;

    /// Direct between-class variance over every interior edge, using sample
    /// loops and bin-center values.
    fn otsu_oracle(scores: &[f64], n_bins: usize) -> f64 {
        let (lo, width, bins) = histogram_bins(scores, n_bins);
        let center = |b: usize| lo + (b as f64 + 0.5) * width;
        let total = scores.len() as f64;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for edge in 1..n_bins {
            let (mut n0, mut m0, mut n1, mut m1) = (0.0, 0.0, 0.0, 0.0);
            for &b in &bins {
                if b < edge {
                    n0 += 1.0;
                    m0 += center(b);
                } else {
                    n1 += 1.0;
                    m1 += center(b);
                }
            }
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            let v = (n0 / total) * (n1 / total) * (m0 / n0 - m1 / n1).powi(2);
            if v > best.0 {
                best = (v, edge);
            }
        }
        lo + best.1 as f64 * width
    }

    #[test]
    fn otsu_symmetric_bimodal() {
        assert_eq!(otsu_threshold(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).unwrap(), 0.5);
    }

    #[test]
    fn otsu_two_groups() {
        let s = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let t = otsu_threshold(&s, 256).unwrap();
        assert!(t > 3.0 && t < 10.0, "{t}");
        assert_eq!(t, otsu_oracle(&s, 256));
    }

    #[test]
    fn otsu_degenerate() {
        assert_eq!(otsu_threshold(&[2.0; 5], 16), Err(EvtError::DegenerateScores));
        assert_eq!(otsu_threshold(&[1.0, 2.0], 1), Err(EvtError::BadBins(1)));
    }

    #[test]
    fn otsu_matches_oracle_random() {
        let mut r = crate::rng::stream(77, 0);
        for _ in 0..50 {
            let bins = r.random_range(2..=64);
            let s: Vec<f64> = (0..100)
                .map(|i| {
                    if i % 3 == 0 {
                        r.random_range(0.0..1.0)
                    } else {
                        r.random_range(0.5..2.0)
                    }
                })
                .collect();
            assert_eq!(otsu_threshold(&s, bins).unwrap(), otsu_oracle(&s, bins));
        }
    }

    #[test]
    fn exponential_special_case() {
        let x = weibull_samples(1.0, 2.0, 10_000, 5);
        let p = weibull_fit_mle(&x).unwrap();
        assert!((p.shape_k - 1.0).abs() < 0.05, "{p:?}");
        assert_eq!(p.shift, 0.0);
    }

    #[test]
    fn recovers_generator_parameters() {
        let x = weibull_samples(2.0, 1.5, 10_000, 6);
        let p = weibull_fit_mle(&x).unwrap();
        assert!((p.shape_k - 2.0).abs() / 2.0 < 0.05, "{p:?}");
        assert!((p.scale_lambda - 1.5).abs() / 1.5 < 0.05, "{p:?}");
    }

    #[test]
    fn degenerate_fit_inputs() {
        assert!(matches!(weibull_fit_mle(&[1.0; 20]), Err(EvtError::DegenerateScores)));
        assert!(matches!(
            weibull_fit_mle(&[1.0, 2.0, 3.0]),
            Err(EvtError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn negative_data_is_shifted() {
        let x: Vec<f64> = weibull_samples(2.0, 1.0, 2000, 3).iter().map(|v| v - 3.0).collect();
        let p = weibull_fit_mle(&x).unwrap();
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(p.shift < lo);
        assert!(x.iter().all(|&v| p.pdf(v) > 0.0));
    }

    #[test]
    fn mle_is_local_optimum_on_grid() {
        let x = weibull_samples(1.7, 0.9, 3000, 12);
        let p = weibull_fit_mle(&x).unwrap();
        let best = p.log_likelihood(&x);
        for i in -10..=10 {
            for j in -10..=10 {
                let q = WeibullParams::new(
                    p.shape_k * (1.0 + 0.01 * i as f64),
                    p.scale_lambda * (1.0 + 0.01 * j as f64),
                    p.shift,
                );
                assert!(q.log_likelihood(&x) <= best + 1e-9);
            }
        }
    }

    #[test]
    fn eval_identities() {
        let p = WeibullParams::new(2.3, 1.7, 0.4);
        assert!((p.cdf(0.4 + 1.7) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((p.cdf(2.1) - 0.63212).abs() < 1e-5);
        assert_eq!(p.pdf(0.3), 0.0);
        let q = WeibullParams::new(2.0, 1.0, 0.0);
        assert!((q.quantile(0.95).unwrap() - (-(0.05f64).ln()).sqrt()).abs() < 1e-12);
        assert!((q.quantile(0.95).unwrap() - 1.7308).abs() < 1e-4);
        assert_eq!(
            weibull_eval(&q, 1.0, Eval::Quantile),
            Err(EvtError::QuantileOutOfRange(1.0))
        );
        assert_eq!(
            weibull_eval(&q, 0.0, Eval::Quantile),
            Err(EvtError::QuantileOutOfRange(0.0))
        );
    }

    /// Composite Simpson quadrature of the pdf against the closed-form cdf.
    #[test]
    fn cdf_is_integral_of_pdf() {
        for &(k, lam, shift) in &[(1.5, 1.0, 0.0), (3.0, 0.7, -0.2), (1.0, 2.0, 0.5)] {
            let p = WeibullParams::new(k, lam, shift);
            for step in 1..=10 {
                // start just off the support edge where the pdf is smooth
                let a = shift + 0.01 * lam;
                let x = shift + 0.3 * lam * step as f64;
                let m = 4000;
                let h = (x - a) / m as f64;
                let mut acc = p.pdf(a) + p.pdf(x);
                for i in 1..m {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * p.pdf(a + i as f64 * h);
                }
                let integral = acc * h / 3.0;
                assert!((integral - (p.cdf(x) - p.cdf(a))).abs() < 1e-6, "k={k} x={x}");
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let p = WeibullParams::new(2.7, 0.8, -0.1);
        for i in 1..200 {
            let x = p.shift + 5.0 * p.scale_lambda * i as f64 / 200.0;
            let c = p.cdf(x);
            if c > 1e-6 && c < 1.0 - 1e-6 {
                assert!((p.quantile(c).unwrap() - x).abs() < 1e-9, "x={x}");
            }
        }
    }

    fn two_modes(seed: u64) -> Vec<f64> {
        let mut s: Vec<f64> = weibull_samples(3.0, 0.3, 600, seed).iter().map(|v| v + 0.1).collect();
        s.extend(weibull_samples(12.0, 0.85, 300, seed + 1));
        s
    }

    #[test]
    fn mixture_on_separated_modes() {
        let s = two_modes(4);
        let mix = fit_two_weibull_mixture(&s, &MixtureOptions::default()).unwrap();
        let low_mean = s[..600].iter().sum::<f64>() / 600.0;
        let high_mean = s[600..].iter().sum::<f64>() / 300.0;
        assert!(mix.lower_cut < mix.upper_cut, "{mix:?}");
        assert!(mix.otsu_t > low_mean && mix.otsu_t < high_mean);

        let em = fit_two_weibull_mixture(
            &s,
            &MixtureOptions {
                em_iterations: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(em.lower_cut < em.upper_cut);
    }

    #[test]
    fn mixture_one_sided() {
        let mut s = vec![0.0; 3];
        s.extend(std::iter::repeat_n(1.0, 50));
        s.push(0.9);
        assert!(matches!(
            fit_two_weibull_mixture(&s, &MixtureOptions::default()),
            Err(EvtError::OneSidedData { .. })
        ));
    }

    #[test]
    fn separation_bands() {
        let mix = MixtureSeparation {
            otsu_t: 0.5,
            low: WeibullParams::new(2.0, 0.3, 0.0),
            high: WeibullParams::new(8.0, 0.9, 0.0),
            high_weight: 0.5,
            lower_cut: 0.4,
            upper_cut: 0.6,
        };
        let d = separate_overlap(&[0.1, 0.5, 0.9], &mix);
        assert_eq!(d, vec![Decision::Disjoint, Decision::Rejected, Decision::Overlap]);
    }

    #[test]
    fn sse_ordering() {
        let x = weibull_samples(1.2, 1.0, 20_000, 9);
        let fit = weibull_fit_mle(&x).unwrap();
        let wrong = WeibullParams::new(fit.shape_k, 2.0 * fit.scale_lambda, fit.shift);
        let good = fit_sse(&fit, &x, 50).unwrap();
        assert!(good < fit_sse(&wrong, &x, 50).unwrap());
        assert!(good < fit_sse(&GaussianParams::fit(&x), &x, 50).unwrap());
    }

    #[test]
    fn sse_two_bins_by_hand() {
        // bins [0,1) and [1,2]; densities 0.75 and 0.25; uniform model density 0.5
        struct Flat;
        impl Density for Flat {
            fn pdf(&self, _: f64) -> f64 {
                0.5
            }
        }
        let sse = fit_sse(&Flat, &[0.0, 0.2, 0.7, 2.0], 2).unwrap();
        assert!((sse - (0.25f64.powi(2) + 0.25f64.powi(2))).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn decisions_monotone(cut_a in -1.0f64..1.0, cut_b in -1.0f64..1.0) {
            let mix = MixtureSeparation {
                otsu_t: 0.0,
                low: WeibullParams::new(1.0, 1.0, 0.0),
                high: WeibullParams::new(1.0, 1.0, 0.0),
                high_weight: 0.5,
                lower_cut: cut_a,
                upper_cut: cut_b,
            };
            let grid: Vec<f64> = (0..=400).map(|i| -2.0 + i as f64 / 100.0).collect();
            let d = separate_overlap(&grid, &mix);
            let rank = |d: &Decision| match d { Decision::Disjoint => 0, Decision::Rejected => 1, Decision::Overlap => 2 };
            proptest::prop_assert!(d.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
        }
    }
}
