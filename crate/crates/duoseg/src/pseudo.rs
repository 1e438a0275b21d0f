//! Consensus pseudo-labels from two teachers, confidence thresholding, and
//! the Monte-Carlo study of how much averaging two teachers reduces
//! prediction variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("threshold must lie in (0,1), got {0}")]
    BadThreshold(f64),
    #[error("trials must be positive")]
    NoTrials,
    #[error("teacher correlation must lie in [0,1], got {0}")]
    BadCorrelation(f64),
}

/// Consensus probabilities with hard labels and the confidence mask.
///
/// `labels` stores one entry per pixel in batch-row-major order; pixels that
/// fail the threshold carry the ignore sentinel, which is the class count.
#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub tau: f64,
    classes: usize,
}

impl PseudoLabelBatch {
    /// Assembles a batch from explicit parts, validating lengths and label
    /// ranges. `threshold_labels` is the normal construction path.
    pub fn from_parts(
        probs: Tensor,
        labels: Vec<usize>,
        mask: Vec<bool>,
        tau: f64,
        classes: usize,
    ) -> Result<Self, PseudoLabelError> {
        if labels.len() != mask.len() {
            return Err(TensorError::Contract {
                op: "pseudo_label_batch",
                msg: format!("{} labels vs {} mask entries", labels.len(), mask.len()),
            }
            .into());
        }
        for (label, confident) in labels.iter().zip(&mask) {
            let valid = if *confident {
                *label < classes
            } else {
                *label == classes
            };
            if !valid {
                return Err(TensorError::Contract {
                    op: "pseudo_label_batch",
                    msg: format!("label {label} invalid for {classes} classes"),
                }
                .into());
            }
        }
        Ok(Self {
            probs,
            labels,
            mask,
            tau,
            classes,
        })
    }

    /// Sentinel used for below-threshold pixels: one past the last class.
    pub fn ignore_label(&self) -> usize {
        self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn confident_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.confident_count() as f64 / self.mask.len() as f64
        }
    }
}

/// Elementwise mean of two probability fields of equal shape. Stays a
/// probability field; never records gradients.
pub fn consensus(probs1: &Tensor, probs2: &Tensor) -> Result<Tensor, PseudoLabelError> {
    if probs1.shape() != probs2.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "consensus",
            lhs: probs1.shape().to_vec(),
            rhs: probs2.shape().to_vec(),
        }
        .into());
    }
    let data: Vec<f64> = probs1
        .data()
        .iter()
        .zip(probs2.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(Tensor::from_vec(probs1.shape().to_vec(), data)?)
}

/// Hard labels where the maximum consensus probability strictly exceeds
/// `tau`; everything else gets the ignore sentinel. Ties resolve to the
/// lowest class index.
pub fn threshold_labels(p_avg: &Tensor, tau: f64) -> Result<PseudoLabelBatch, PseudoLabelError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(PseudoLabelError::BadThreshold(tau));
    }
    let classes = *p_avg.shape().last().ok_or(TensorError::BadShape {
        op: "threshold_labels",
        expected: "probability field with a class axis".into(),
        got: p_avg.shape().to_vec(),
    })?;
    if classes == 0 {
        return Err(TensorError::BadShape {
            op: "threshold_labels",
            expected: "nonempty class axis".into(),
            got: p_avg.shape().to_vec(),
        }
        .into());
    }
    let pixels = p_avg.numel() / classes;
    let mut labels = Vec::with_capacity(pixels);
    let mut mask = Vec::with_capacity(pixels);
    for row in p_avg.data().chunks(classes) {
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        if row[best] > tau {
            labels.push(best);
            mask.push(true);
        } else {
            labels.push(classes);
            mask.push(false);
        }
    }
    Ok(PseudoLabelBatch {
        probs: p_avg.clone(),
        labels,
        mask,
        tau,
        classes,
    })
}

/// Setup for the variance-reduction experiment: two simulated teachers share
/// a Gaussian logit noise component of weight sqrt(rho), so their logit
/// correlation is exactly rho.
#[derive(Debug, Clone, Copy)]
pub struct VarianceConfig {
    pub sigma: f64,
    pub rho: f64,
    pub trials: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            rho: 0.0,
            trials: 100_000,
            classes: 4,
            seed: 0,
        }
    }
}

/// Empirical variances of one teacher's softmax output versus the
/// two-teacher average, each averaged over classes.
#[derive(Debug, Clone, Copy)]
pub struct VarianceReport {
    pub rho: f64,
    pub sigma: f64,
    pub trials: usize,
    pub var_single: f64,
    pub var_avg: f64,
    pub ratio: f64,
    pub cov: f64,
    /// Second teacher's variance, kept so the averaging identity
    /// `var_avg = (var1 + var2 + 2 cov) / 4` can be checked externally.
    pub var_single_2: f64,
}

pub fn variance_study(cfg: &VarianceConfig) -> Result<VarianceReport, PseudoLabelError> {
    if cfg.trials == 0 {
        return Err(PseudoLabelError::NoTrials);
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(PseudoLabelError::BadCorrelation(cfg.rho));
    }
    let c = cfg.classes;
    let shared_w = cfg.rho.sqrt();
    let own_w = (1.0 - cfg.rho).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut sum1 = vec![0.0; c];
    let mut sum2 = vec![0.0; c];
    let mut sum_avg = vec![0.0; c];
    let mut sq1 = vec![0.0; c];
    let mut sq2 = vec![0.0; c];
    let mut sq_avg = vec![0.0; c];
    let mut cross = vec![0.0; c];

    let mut logits1 = vec![0.0; c];
    let mut logits2 = vec![0.0; c];
    for _ in 0..cfg.trials {
        for i in 0..c {
            let shared: f64 = rng.sample(StandardNormal);
            let own1: f64 = rng.sample(StandardNormal);
            let own2: f64 = rng.sample(StandardNormal);
            logits1[i] = cfg.sigma * (shared_w * shared + own_w * own1);
            logits2[i] = cfg.sigma * (shared_w * shared + own_w * own2);
        }
        let p1 = softmax_vec(&logits1);
        let p2 = softmax_vec(&logits2);
        for i in 0..c {
            let avg = 0.5 * (p1[i] + p2[i]);
            sum1[i] += p1[i];
            sum2[i] += p2[i];
            sum_avg[i] += avg;
            sq1[i] += p1[i] * p1[i];
            sq2[i] += p2[i] * p2[i];
            sq_avg[i] += avg * avg;
            cross[i] += p1[i] * p2[i];
        }
    }

    let n = cfg.trials as f64;
    let denom = if cfg.trials > 1 { n - 1.0 } else { 1.0 };
    let var = |sq: &[f64], sum: &[f64]| -> f64 {
        (0..c)
            .map(|i| (sq[i] - sum[i] * sum[i] / n) / denom)
            .sum::<f64>()
            / c as f64
    };
    let var1 = var(&sq1, &sum1);
    let var2 = var(&sq2, &sum2);
    let var_avg = var(&sq_avg, &sum_avg);
    let cov = (0..c)
        .map(|i| (cross[i] - sum1[i] * sum2[i] / n) / denom)
        .sum::<f64>()
        / c as f64;
    Ok(VarianceReport {
        rho: cfg.rho,
        sigma: cfg.sigma,
        trials: cfg.trials,
        var_single: var1,
        var_avg,
        ratio: var_avg / var1,
        cov,
        var_single_2: var2,
    })
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Row-wise softmax over the last axis of a plain logits tensor. Teacher
/// probabilities for labeling go through here, off the tape, so pseudo-label
/// targets never leak gradients.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let classes = *logits.shape().last().expect("logits have a class axis");
    let mut data = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(classes) {
        data.extend(softmax_vec(row));
    }
    Tensor::from_vec(logits.shape().to_vec(), data).expect("softmax preserves shape")
}

pub const VARIANCE_CSV_HEADER: &str = "rho,sigma,trials,var_single,var_avg,ratio,cov";

pub fn variance_csv_row(r: &VarianceReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.rho, r.sigma, r.trials, r.var_single, r.var_avg, r.ratio, r.cov
    )
}
