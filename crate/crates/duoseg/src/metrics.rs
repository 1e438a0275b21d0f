//! Evaluation metrics, convergence statistics and per-epoch reporting.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty series")]
    EmptySeries,
}

/// Mean intersection-over-union across the classes present in either map.
/// Classes absent from both prediction and truth are skipped, so tiny
/// scenes without some class never divide by zero.
pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut intersection = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes {
            return Err(MetricsError::LabelOutOfRange {
                label: p,
                classes,
            });
        }
        if t >= classes {
            return Err(MetricsError::LabelOutOfRange {
                label: t,
                classes,
            });
        }
        if p == t {
            intersection[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if union[c] > 0 {
            sum += intersection[c] as f64 / union[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Ok(1.0); // both maps empty; vacuous agreement
    }
    Ok(sum / present as f64)
}

/// Fraction of pixels whose prediction matches the truth.
pub fn pixel_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceStats {
    /// First index where the series drops strictly below the threshold.
    pub first_epoch_below: Option<usize>,
    pub terminal: f64,
}

/// Default loss threshold for convergence reporting.
pub const CONVERGENCE_THRESHOLD: f64 = 0.2;

pub fn convergence_stats(series: &[f64], threshold: f64) -> Result<ConvergenceStats, MetricsError> {
    let terminal = *series.last().ok_or(MetricsError::EmptySeries)?;
    let first_epoch_below = series.iter().position(|v| *v < threshold);
    Ok(ConvergenceStats {
        first_epoch_below,
        terminal,
    })
}

/// Encoder-gradient share of each loss component, normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradShares {
    pub ce: f64,
    pub pl: f64,
    pub consist: f64,
    pub reg: f64,
}

/// Normalizes raw per-component gradient norms. `None` when every norm is
/// zero and shares are undefined.
pub fn normalize_shares(ce: f64, pl: f64, consist: f64, reg: f64) -> Option<GradShares> {
    let total = ce + pl + consist + reg;
    if total <= 0.0 {
        return None;
    }
    Some(GradShares {
        ce: ce / total,
        pl: pl / total,
        consist: consist / total,
        reg: reg / total,
    })
}

/// One evaluated epoch: held-out metrics plus the epoch-averaged losses.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub miou: f64,
    pub pixel_acc: f64,
    pub ce: f64,
    pub pl: f64,
    pub consist: f64,
    pub reg: f64,
    pub total: f64,
    pub mask_fraction: f64,
    pub shares: Option<GradShares>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsHistory {
    pub rows: Vec<EpochRow>,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,miou,pixel_acc,ce,pl,consist,reg,total,mask_fraction,share_ce,share_pl,share_consist,share_reg";

impl MetricsHistory {
    pub fn push(&mut self, row: EpochRow) {
        self.rows.push(row);
    }

    pub fn final_miou(&self) -> Option<f64> {
        self.rows.last().map(|r| r.miou)
    }

    pub fn total_loss_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn convergence(&self, threshold: f64) -> Result<ConvergenceStats, MetricsError> {
        convergence_stats(&self.total_loss_series(), threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let shares = match &r.shares {
                Some(s) => format!("{},{},{},{}", s.ce, s.pl, s.consist, s.reg),
                None => ",,,".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.miou,
                r.pixel_acc,
                r.ce,
                r.pl,
                r.consist,
                r.reg,
                r.total,
                r.mask_fraction,
                shares
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    /// Fixed-width table for terminal output.
    pub fn pretty_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>5} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}\n",
            "epoch", "mIoU", "acc", "ce", "pl", "consist", "reg", "total", "mask"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>5} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>6.3}\n",
                r.epoch, r.miou, r.pixel_acc, r.ce, r.pl, r.consist, r.reg, r.total, r.mask_fraction
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_maps_score_one() {
        let map = vec![0, 1, 2, 1, 0, 3];
        assert_eq!(miou(&map, &map, 4).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&map, &map).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_single_class_maps_score_zero() {
        let pred = vec![0; 8];
        let truth = vec![1; 8];
        assert_eq!(miou(&pred, &truth, 2).unwrap(), 0.0);
    }

    #[test]
    fn two_class_grid_matches_brute_force_counting() {
        // 4×4 grid; brute force counts sets per class explicitly.
        let pred = vec![0, 0, 1, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1];
        let truth = vec![0, 1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1, 1, 1];
        let mut expected = 0.0;
        for class in 0..2usize {
            let inter = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == class && **t == class)
                .count();
            let uni = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == class || **t == class)
                .count();
            expected += inter as f64 / uni as f64;
        }
        expected /= 2.0;
        assert_eq!(miou(&pred, &truth, 2).unwrap(), expected);
    }

    #[test]
    fn absent_classes_are_skipped() {
        // Class 2 appears nowhere; mean runs over classes 0 and 1 only.
        let pred = vec![0, 0, 1, 1];
        let truth = vec![0, 1, 1, 1];
        let iou0 = 1.0 / 2.0;
        let iou1 = 2.0 / 3.0;
        let expected = (iou0 + iou1) / 2.0;
        assert!((miou(&pred, &truth, 3).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        assert!(miou(&[0, 5], &[0, 1], 2).is_err());
        assert!(miou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn convergence_finds_first_crossing() {
        let series = [1.0, 0.5, 0.3, 0.1, 0.05];
        let stats = convergence_stats(&series, 0.2).unwrap();
        assert_eq!(stats.first_epoch_below, Some(3));
        assert_eq!(stats.terminal, 0.05);
    }

    #[test]
    fn convergence_handles_never_crossing() {
        let series = [1.0, 0.9, 0.8];
        let stats = convergence_stats(&series, 0.2).unwrap();
        assert_eq!(stats.first_epoch_below, None);
        assert_eq!(stats.terminal, 0.8);
    }

    #[test]
    fn convergence_matches_linear_scan_on_noisy_series() {
        let series = [0.9, 0.15, 0.4, 0.1, 0.3];
        let stats = convergence_stats(&series, 0.2).unwrap();
        let mut scan = None;
        for (i, v) in series.iter().enumerate() {
            if *v < 0.2 {
                scan = Some(i);
                break;
            }
        }
        assert_eq!(stats.first_epoch_below, scan);
    }

    #[test]
    fn convergence_rejects_empty_series() {
        assert!(matches!(
            convergence_stats(&[], 0.2),
            Err(MetricsError::EmptySeries)
        ));
    }

    #[test]
    fn shares_normalize_or_flag_undefined() {
        let s = normalize_shares(3.0, 1.0, 0.5, 0.5).unwrap();
        assert!((s.ce + s.pl + s.consist + s.reg - 1.0).abs() < 1e-9);
        assert!(normalize_shares(0.0, 0.0, 0.0, 0.0).is_none());
    }

    #[test]
    fn csv_has_one_line_per_epoch_plus_header() {
        let mut history = MetricsHistory::default();
        for epoch in 0..3 {
            history.push(EpochRow {
                epoch,
                miou: 0.5,
                pixel_acc: 0.6,
                ce: 1.0,
                pl: 0.2,
                consist: 0.1,
                reg: 0.0,
                total: 1.07,
                mask_fraction: 0.4,
                shares: None,
            });
        }
        let csv = history.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(METRICS_CSV_HEADER));
    }

    proptest! {
        /// Intersection and union are symmetric, so swapping the maps
        /// leaves the score unchanged; scores stay within [0,1].
        #[test]
        fn miou_is_symmetric_and_bounded(
            pred in proptest::collection::vec(0usize..4, 16),
            truth in proptest::collection::vec(0usize..4, 16),
        ) {
            let ab = miou(&pred, &truth, 4).unwrap();
            let ba = miou(&truth, &pred, 4).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            let acc = pixel_accuracy(&pred, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }

        /// Relabeling both maps through the same permutation preserves the
        /// score.
        #[test]
        fn miou_is_invariant_under_consistent_relabeling(
            pred in proptest::collection::vec(0usize..4, 16),
            truth in proptest::collection::vec(0usize..4, 16),
        ) {
            let perm = [2usize, 0, 3, 1];
            let pred2: Vec<usize> = pred.iter().map(|c| perm[*c]).collect();
            let truth2: Vec<usize> = truth.iter().map(|c| perm[*c]).collect();
            let orig = miou(&pred, &truth, 4).unwrap();
            let relabeled = miou(&pred2, &truth2, 4).unwrap();
            prop_assert!((orig - relabeled).abs() < 1e-15);
        }
    }
}
