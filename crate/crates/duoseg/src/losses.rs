//! The four training losses and their weighted combination.
//!
//! All builders record onto the caller's tape and return scalar vars, so one
//! backward pass routes gradients exactly as the wiring dictates: teacher
//! heads are gradient-free leaves, the class-weight module only appears in
//! the supervised, pseudo-label and regularizer terms, and the encoder sits
//! under all four.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pseudo::PseudoLabelBatch;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} at pixel {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("labels cover {got} pixels, logits cover {expected}")]
    LabelCount { expected: usize, got: usize },
}

/// Multipliers for the pseudo-label, consistency and weight-regularizer
/// terms. The supervised term always carries weight one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.1,
            lambda3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a nonnegative finite value, got {v}"));
            }
        }
        Ok(())
    }
}

/// One step's loss values and bookkeeping, detached from the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pl: f64,
    pub consist: f64,
    pub reg: f64,
    pub total: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub confident: usize,
    pub mask_fraction: f64,
    /// No pixel cleared the confidence threshold; the pseudo-label term
    /// defaulted to zero.
    pub empty_mask: bool,
    /// No unlabeled samples this step; the consistency term defaulted to
    /// zero.
    pub empty_unlabeled: bool,
}

pub const LOSS_CSV_HEADER: &str = "step,ce,pl,consist,reg,total,mask_fraction";

pub fn loss_csv_row(step: u64, b: &LossBreakdown) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        step, b.ce, b.pl, b.consist, b.reg, b.total, b.mask_fraction
    )
}

/// Mean squared disagreement between the two teachers over the unlabeled
/// batch: `(1/B_U)·Σ‖t1 − t2‖²`. With `batch_u == 0` the term is defined
/// as zero and flagged.
pub fn consistency_loss(
    tape: &mut Tape,
    t1_logits: Var,
    t2_logits: Var,
    batch_u: usize,
) -> Result<(Var, bool), LossError> {
    if batch_u == 0 {
        return Ok((tape.scalar(0.0), true));
    }
    let diff = tape.sub(t1_logits, t2_logits)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq);
    Ok((tape.scale(sum, 1.0 / batch_u as f64), false))
}

/// Cross-entropy of weight-modulated student logits against hard labels on
/// a subset of pixels. `select` pairs each pixel with `Some(label)` or
/// `None`; the loss is the mean over selected pixels of
/// `−log softmax(logits ⊙ w)[label]`.
fn masked_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    w_class: Var,
    select: impl Iterator<Item = Option<usize>>,
    classes: usize,
) -> Result<(Var, usize), LossError> {
    let pixel_count = tape.value(logits).len() / classes;
    let modulated = tape.mul_per_row(logits, w_class)?;
    let flat = tape.reshape(modulated, vec![pixel_count, classes])?;
    let log_probs = tape.log_softmax(flat)?;

    let mut onehot = vec![0.0; pixel_count * classes];
    let mut selected = 0usize;
    let mut pixels_seen = 0usize;
    for (index, entry) in select.enumerate() {
        pixels_seen += 1;
        if let Some(label) = entry {
            if label >= classes {
                return Err(LossError::LabelOutOfRange {
                    index,
                    label,
                    classes,
                });
            }
            onehot[index * classes + label] = 1.0;
            selected += 1;
        }
    }
    if pixels_seen != pixel_count {
        return Err(LossError::LabelCount {
            expected: pixel_count,
            got: pixels_seen,
        });
    }
    if selected == 0 {
        return Ok((tape.scalar(0.0), 0));
    }
    let picker = tape.constant(vec![pixel_count, classes], onehot)?;
    let picked = tape.mul(log_probs, picker)?;
    let sum = tape.sum_all(picked);
    Ok((tape.scale(sum, -1.0 / selected as f64), selected))
}

/// Pseudo-label cross-entropy over the confident set. Returns the scalar
/// and a flag that is set when the confident set is empty.
pub fn pseudo_label_loss(
    tape: &mut Tape,
    student_logits: Var,
    w_class: Var,
    batch: &PseudoLabelBatch,
) -> Result<(Var, bool), LossError> {
    let classes = *tape
        .shape(student_logits)
        .last()
        .expect("logits have a class axis");
    let select = batch
        .labels
        .iter()
        .zip(&batch.mask)
        .map(|(label, confident)| confident.then_some(*label));
    let (loss, selected) = masked_cross_entropy(tape, student_logits, w_class, select, classes)?;
    Ok((loss, selected == 0))
}

/// Supervised cross-entropy over every labeled pixel, with logits modulated
/// by the per-sample class weights before the softmax.
pub fn supervised_ce(
    tape: &mut Tape,
    student_logits: Var,
    w_class: Var,
    truth: &[usize],
) -> Result<Var, LossError> {
    let classes = *tape
        .shape(student_logits)
        .last()
        .expect("logits have a class axis");
    let select = truth.iter().map(|label| Some(*label));
    let (loss, _) = masked_cross_entropy(tape, student_logits, w_class, select, classes)?;
    Ok(loss)
}

/// Squared Frobenius distance of the class weights from all-ones,
/// `‖w − 1‖²`, keeping the dynamic weights near unity.
pub fn weight_regularizer(tape: &mut Tape, w_class: Var) -> Result<Var, LossError> {
    let shape = tape.shape(w_class).to_vec();
    let n: usize = shape.iter().product();
    let ones = tape.constant(shape, vec![1.0; n])?;
    let diff = tape.sub(w_class, ones)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum_all(sq))
}

/// Weighted sum of the four components:
/// `ce + λ1·pl + λ2·consist + λ3·reg`.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    pl: Var,
    consist: Var,
    reg: Var,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let pl_w = tape.scale(pl, weights.lambda1);
    let consist_w = tape.scale(consist, weights.lambda2);
    let reg_w = tape.scale(reg, weights.lambda3);
    let a = tape.add(ce, pl_w)?;
    let b = tape.add(a, consist_w)?;
    Ok(tape.add(b, reg_w)?)
}
