//! Pixel-pooled OOD metrics.
//!
//! OOD pixels are the positive class and the anomaly score is the negated
//! pipeline score. All four metrics come from one sweep over the distinct
//! anomaly scores in descending order, where a pixel is flagged when its
//! score is at least the threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{LabelMask, MaskKind, Tensor, MASK_IGNORE, MASK_OOD};

/// Confusion counts when flagging every score `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// One entry per distinct anomaly score, highest first. `labels[i]` is true
/// for OOD.
pub fn sweep_thresholds(anomaly: &[f64], labels: &[bool]) -> Result<Vec<SweepPoint>> {
    if anomaly.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            anomaly.len(),
            labels.len()
        )));
    }
    if anomaly.iter().any(|a| a.is_nan()) {
        return Err(Error::input("anomaly scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input(format!(
            "need both classes to evaluate ({pos} OOD, {neg} ID)"
        )));
    }
    let mut order: Vec<(f64, bool)> = anomaly
        .iter()
        .copied()
        .zip(labels.iter().copied())
        .collect();
    order.par_sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        while i < order.len() && order[i].0 == t {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(SweepPoint {
            threshold: t,
            tp,
            fp,
            fn_: pos - tp,
            tn: neg - fp,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95tpr: f64,
    /// Pixel-level best F1; not the component-level F1 of public leaderboards.
    pub best_f1: f64,
    pub n_ood: u64,
    pub n_id: u64,
    pub n_ignored: u64,
}

/// Metrics from a sweep; counts are taken from its last entry.
pub fn metrics_from_sweep(sweep: &[SweepPoint], n_ignored: u64) -> Result<EvalReport> {
    let last = sweep.last().ok_or_else(|| Error::input("empty sweep"))?;
    let pos = last.tp + last.fn_;
    let neg = last.fp + last.tn;
    let (p, n) = (pos as f64, neg as f64);

    let mut auc_pairs = 0.0;
    let mut ap = 0.0;
    let mut fpr95 = None;
    let mut best_f1: f64 = 0.0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for s in sweep {
        let (dtp, dfp) = ((s.tp - prev_tp) as f64, (s.fp - prev_fp) as f64);
        // Pairs won outright plus half of the pairs tied at this threshold.
        auc_pairs += dfp * (prev_tp as f64 + 0.5 * dtp);
        let precision = s.tp as f64 / (s.tp + s.fp) as f64;
        ap += dtp / p * precision;
        if fpr95.is_none() && s.tp as f64 / p >= 0.95 {
            fpr95 = Some(s.fp as f64 / n);
        }
        if s.tp > 0 {
            let recall = s.tp as f64 / p;
            best_f1 = best_f1.max(2.0 * precision * recall / (precision + recall));
        }
        prev_tp = s.tp;
        prev_fp = s.fp;
    }
    Ok(EvalReport {
        auroc: auc_pairs / (p * n),
        aupr: ap,
        fpr_at_95tpr: fpr95.unwrap_or(1.0),
        best_f1,
        n_ood: pos,
        n_id: neg,
        n_ignored,
    })
}

/// Metrics over raw anomaly scores (higher means more anomalous).
pub fn evaluate_anomaly(anomaly: &[f64], labels: &[bool]) -> Result<EvalReport> {
    metrics_from_sweep(&sweep_thresholds(anomaly, labels)?, 0)
}

fn pool_pixels(score: &Tensor, mask: &LabelMask) -> Result<(Vec<f64>, Vec<bool>, u64)> {
    if mask.kind() != MaskKind::Evaluation {
        return Err(Error::input("evaluation needs a {0, 1, 255} mask"));
    }
    let values = match (score.shape(), score.as_f32()) {
        ([h, w], Some(v)) if *h == mask.height() && *w == mask.width() => v,
        _ => {
            return Err(Error::shape(format!(
                "score map {:?} does not match mask {}x{}",
                score.shape(),
                mask.height(),
                mask.width()
            )))
        }
    };
    let mut a = Vec::with_capacity(values.len());
    let mut l = Vec::with_capacity(values.len());
    let mut ignored = 0;
    for (&s, &m) in values.iter().zip(mask.values()) {
        if m == MASK_IGNORE {
            ignored += 1;
        } else {
            a.push(-(s as f64));
            l.push(m == MASK_OOD);
        }
    }
    Ok((a, l, ignored))
}

/// Pools every non-ignored pixel of every image, then evaluates once.
pub fn evaluate(score_maps: &[Tensor], gt_masks: &[LabelMask]) -> Result<EvalReport> {
    if score_maps.len() != gt_masks.len() {
        return Err(Error::shape(format!(
            "{} score maps vs {} masks",
            score_maps.len(),
            gt_masks.len()
        )));
    }
    let parts: Vec<_> = score_maps
        .par_iter()
        .zip(gt_masks)
        .map(|(s, m)| pool_pixels(s, m))
        .collect::<Result<_>>()?;
    let mut anomaly = Vec::new();
    let mut labels = Vec::new();
    let mut ignored = 0;
    for (a, l, i) in parts {
        anomaly.extend(a);
        labels.extend(l);
        ignored += i;
    }
    metrics_from_sweep(&sweep_thresholds(&anomaly, &labels)?, ignored)
}

/// Diagnostic per-image reports; `None` for images lacking either class.
pub fn evaluate_per_image(
    score_maps: &[Tensor],
    gt_masks: &[LabelMask],
) -> Result<Vec<Option<EvalReport>>> {
    if score_maps.len() != gt_masks.len() {
        return Err(Error::shape("score map and mask counts differ"));
    }
    score_maps
        .par_iter()
        .zip(gt_masks)
        .map(|(s, m)| {
            let (a, l, ignored) = pool_pixels(s, m)?;
            let pos = l.iter().filter(|&&x| x).count();
            if pos == 0 || pos == l.len() {
                return Ok(None);
            }
            metrics_from_sweep(&sweep_thresholds(&a, &l)?, ignored).map(Some)
        })
        .collect()
}
