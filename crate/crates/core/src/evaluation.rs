//! IoU, AP@0.5 per task and mean AP over tasks.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::data::{BBox, PredictionRecord, Report, SceneRecord, TaskReport};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        bx.validate().map_err(Error::Input)?;
    }
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

/// A positive decision submitted for scoring. `image` groups detections
/// and ground truth belonging to the same picture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices in ranking order.
    pub order: Vec<usize>,
    /// Ground-truth index matched by each detection (input order).
    pub matched: Vec<Option<usize>>,
    /// Unmatched ground truth per image.
    pub unmatched_gt: BTreeMap<usize, usize>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matched.iter().flatten().count()
    }

    pub fn false_positives(&self) -> usize {
        self.matched.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_gt.values().sum()
    }
}

/// Ranks detections by descending score (ties keep input order) and lets
/// each take the unmatched ground truth of its image with the highest IoU,
/// if that IoU reaches `iou_thresh`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<MatchResult> {
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::Input(format!("non-finite detection score {}", d.score)));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image).or_default().push(j);
    }
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &j in by_image.get(&d.image).into_iter().flatten() {
            if taken[j] {
                continue;
            }
            let o = iou(&d.bbox, &gts[j].bbox)?;
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matched[i] = Some(j);
        }
    }
    let mut unmatched_gt = BTreeMap::new();
    for (j, gt) in gts.iter().enumerate() {
        let e = unmatched_gt.entry(gt.image).or_insert(0);
        if !taken[j] {
            *e += 1;
        }
    }
    Ok(MatchResult {
        order,
        matched,
        unmatched_gt,
    })
}

/// Area under the monotone precision envelope of a ranked TP/FP sequence.
/// `ties[k]` is true when entry `k` has the same score as entry `k + 1`;
/// precision/recall points are only taken between distinct scores.
fn envelope_area(hits: &[bool], ties: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        if !ties[k] {
            points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
        }
    }
    let mut ap = 0.0;
    let mut best_precision: f64 = 0.0;
    for (idx, &(recall, precision)) in points.iter().enumerate().rev() {
        best_precision = best_precision.max(precision);
        let lower_recall = if idx == 0 { 0.0 } else { points[idx - 1].0 };
        ap += (recall - lower_recall) * best_precision;
    }
    ap
}

/// AP for one task, or `None` when there is no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<Option<f64>> {
    Ok(average_precision_with_matches(dets, gts, iou_thresh)?.0)
}

fn average_precision_with_matches(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<(Option<f64>, MatchResult)> {
    let m = match_detections(dets, gts, iou_thresh)?;
    if gts.is_empty() {
        return Ok((None, m));
    }
    let hits: Vec<bool> = m.order.iter().map(|&i| m.matched[i].is_some()).collect();
    let ties: Vec<bool> = m
        .order
        .windows(2)
        .map(|w| dets[w[0]].score == dets[w[1]].score)
        .chain(std::iter::once(false))
        .collect();
    Ok((Some(envelope_area(&hits, &ties, gts.len())), m))
}

/// Arithmetic mean of the defined APs.
pub fn mean_ap(per_task: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Evaluation("no task has a defined AP".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Scores predictions against the labelled scenes they were made for.
/// Only boxes with a positive decision are ranked, by their rank score.
pub fn evaluate(
    preds: &[PredictionRecord],
    scenes: &[SceneRecord],
    iou_thresh: f64,
) -> Result<Report> {
    let mut scene_index: HashMap<(&str, u32), usize> = HashMap::new();
    for (i, s) in scenes.iter().enumerate() {
        if scene_index.insert((&s.image_id, s.task_id), i).is_some() {
            return Err(Error::Evaluation(format!(
                "duplicate scene {} for task {}",
                s.image_id, s.task_id
            )));
        }
    }
    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    for p in preds {
        match scene_index.get(&(p.image_id.as_str(), p.task_id)) {
            Some(&i) => {
                if !seen.insert(i) {
                    return Err(Error::Evaluation(format!(
                        "duplicate predictions for {} (task {})",
                        p.image_id, p.task_id
                    )));
                }
                if p.boxes.len() != scenes[i].boxes.len() {
                    return Err(Error::Evaluation(format!(
                        "{} (task {}): {} predicted boxes, scene has {}",
                        p.image_id,
                        p.task_id,
                        p.boxes.len(),
                        scenes[i].boxes.len()
                    )));
                }
            }
            None => missing.push(format!("{} (task {})", p.image_id, p.task_id)),
        }
    }
    for (i, s) in scenes.iter().enumerate() {
        if !seen.contains(&i) {
            missing.push(format!("{} (task {}) has no predictions", s.image_id, s.task_id));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "predictions and scenes do not align: {}",
            missing.join(", ")
        )));
    }

    let mut per_task_dets: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    let mut per_task_gts: BTreeMap<u32, Vec<GroundTruth>> = BTreeMap::new();
    let (mut positives, mut negatives) = (0usize, 0usize);
    for s in scenes {
        per_task_dets.entry(s.task_id).or_default();
        let gts = per_task_gts.entry(s.task_id).or_default();
        let image = scene_index[&(s.image_id.as_str(), s.task_id)];
        for (k, b) in s.boxes.iter().enumerate() {
            match b.gt_label {
                Some(1) => {
                    positives += 1;
                    gts.push(GroundTruth { image, bbox: b.bbox });
                }
                Some(_) => negatives += 1,
                None => {
                    return Err(Error::Evaluation(format!(
                        "scene {} box {k} has no gt_label",
                        s.image_id
                    )))
                }
            }
        }
    }
    for p in preds {
        let image = scene_index[&(p.image_id.as_str(), p.task_id)];
        let dets = per_task_dets.get_mut(&p.task_id).expect("task registered");
        dets.extend(p.boxes.iter().filter(|b| b.decision == 1).map(|b| Detection {
            image,
            score: b.rank_score,
            bbox: b.bbox,
        }));
    }

    let mut per_task = BTreeMap::new();
    for (task, dets) in &per_task_dets {
        let gts = &per_task_gts[task];
        let (ap, m) = average_precision_with_matches(dets, gts, iou_thresh)?;
        per_task.insert(
            *task,
            TaskReport {
                ap,
                tp: m.true_positives(),
                fp: m.false_positives(),
                fn_: m.false_negatives(),
            },
        );
    }
    let aps: Vec<Option<f64>> = per_task.values().map(|r: &TaskReport| r.ap).collect();
    Ok(Report {
        map: mean_ap(&aps)?,
        per_task,
        imbalance_ratio: (positives > 0).then(|| negatives as f64 / positives as f64),
    })
}
