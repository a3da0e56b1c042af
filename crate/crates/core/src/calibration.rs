//! Per-task decision thresholds chosen by maximizing the geometric mean of
//! true-positive rate and true-negative rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{SceneRecord, Thresholds};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub g_means: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub g_means: f64,
    /// Every candidate threshold, ascending.
    pub sweep: Vec<SweepPoint>,
}

pub fn g_means(tpr: f64, fpr: f64) -> f64 {
    (tpr * (1.0 - fpr)).sqrt()
}

/// Sweeps `0`, `1` and the midpoints between consecutive distinct scores,
/// deciding positive when `score >= threshold`, and keeps the threshold
/// with the largest g-means (the smallest one on ties).
pub fn calibrate_threshold(scores: &[f64], labels: &[u8]) -> Result<CalibrationResult> {
    if scores.len() != labels.len() {
        return Err(Error::Calibration(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Calibration(format!("score {s} outside [0, 1]")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Calibration(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }

    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Positives and negatives at or above each sorted position.
    let mut pos_above = vec![0usize; pairs.len() + 1];
    let mut neg_above = vec![0usize; pairs.len() + 1];
    for k in (0..pairs.len()).rev() {
        pos_above[k] = pos_above[k + 1] + (pairs[k].1 == 1) as usize;
        neg_above[k] = neg_above[k + 1] + (pairs[k].1 == 0) as usize;
    }

    let mut candidates = vec![0.0];
    for w in pairs.windows(2) {
        let (lo, hi) = (w[0].0, w[1].0);
        if hi > lo {
            let mid = lo + (hi - lo) / 2.0;
            candidates.push(if mid > lo { mid } else { hi });
        }
    }
    candidates.push(1.0);
    candidates.dedup();

    let sweep: Vec<SweepPoint> = candidates
        .iter()
        .map(|&threshold| {
            let k = pairs.partition_point(|p| p.0 < threshold);
            let tpr = pos_above[k] as f64 / pos as f64;
            let fpr = neg_above[k] as f64 / neg as f64;
            SweepPoint {
                threshold,
                tpr,
                fpr,
                g_means: g_means(tpr, fpr),
            }
        })
        .collect();
    let best = sweep
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if p.g_means <= b.g_means => Some(b),
            _ => Some(p),
        })
        .copied()
        .expect("sweep is never empty");
    Ok(CalibrationResult {
        threshold: best.threshold,
        tpr: best.tpr,
        fpr: best.fpr,
        g_means: best.g_means,
        sweep,
    })
}

/// Calibrates each task separately on labelled scenes. `scores[i]` holds
/// the per-box scores of `scenes[i]`.
pub fn calibrate_tasks(
    scenes: &[SceneRecord],
    scores: &[Vec<f64>],
) -> Result<BTreeMap<u32, CalibrationResult>> {
    if scenes.len() != scores.len() {
        return Err(Error::Calibration(format!(
            "{} score lists for {} scenes",
            scores.len(),
            scenes.len()
        )));
    }
    let mut pooled: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for (scene, s) in scenes.iter().zip(scores) {
        let labels = scene.labels().ok_or_else(|| {
            Error::Calibration(format!("scene {} has boxes without gt_label", scene.image_id))
        })?;
        if labels.len() != s.len() {
            return Err(Error::Calibration(format!(
                "scene {}: {} scores for {} boxes",
                scene.image_id,
                s.len(),
                labels.len()
            )));
        }
        let entry = pooled.entry(scene.task_id).or_default();
        entry.0.extend_from_slice(s);
        entry.1.extend(labels);
    }
    pooled
        .into_iter()
        .map(|(task, (s, l))| {
            calibrate_threshold(&s, &l)
                .map(|r| (task, r))
                .map_err(|e| Error::Calibration(format!("task {task}: {e}")))
        })
        .collect()
}

pub fn thresholds_of(results: &BTreeMap<u32, CalibrationResult>) -> Thresholds {
    results.iter().map(|(&t, r)| (t, r.threshold)).collect()
}

/// Average of the per-task thresholds.
pub fn mean_threshold(thresholds: &Thresholds) -> Option<f64> {
    (!thresholds.is_empty()).then(|| thresholds.values().sum::<f64>() / thresholds.len() as f64)
}
