//! Reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use taskclip_core::calibration::g_means;
use taskclip_core::*;

pub fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
        class_id: 0,
        class_conf: 0.9,
    }
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    inter / (area(a) + area(b) - inter)
}

/// Builds the PR curve by thresholding at every distinct score, replaying
/// the greedy assignment for each retrieved set from scratch.
pub fn reference_ap(dets: &[Detection], gts: &[GroundTruth]) -> f64 {
    let mut levels: Vec<f64> = dets.iter().map(|d| d.score).collect();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let mut curve = Vec::new();
    for &level in &levels {
        let mut retrieved: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= level).collect();
        // Highest score first, equal scores in input order.
        retrieved.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &i in &retrieved {
            let mut best = None;
            let mut best_iou = 0.5;
            for (j, gt) in gts.iter().enumerate() {
                if used[j] || gt.image != dets[i].image {
                    continue;
                }
                let o = ref_iou(&dets[i].bbox, &gt.bbox);
                if o >= best_iou && best.map_or(true, |_| o > best_iou) {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                used[j] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / retrieved.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let best_p = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (curve[k].0 - prev_recall) * best_p;
        prev_recall = curve[k].0;
    }
    ap
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.random_range(1..=5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for image in 0..images {
        let n = rng.random_range(1..=6);
        for _ in 0..n {
            let x = rng.random_range(0..4) as f64 * 10.0;
            let y = rng.random_range(0..2) as f64 * 10.0;
            let b = bx(x, y, x + 12.0, y + 12.0);
            if rng.random_bool(0.5) {
                gts.push(GroundTruth { image, bbox: b });
            }
            if rng.random_bool(0.7) {
                let j = rng.random_range(-4.0..4.0);
                // Coarse score grid so ties show up regularly.
                let score = rng.random_range(1..=10) as f64 / 10.0;
                dets.push(Detection {
                    image,
                    score,
                    bbox: bx(x + j, y, x + 12.0 + j, y + 12.0),
                });
            }
        }
    }
    if gts.is_empty() {
        gts.push(GroundTruth {
            image: 0,
            bbox: bx(0.0, 0.0, 12.0, 12.0),
        });
    }
    (dets, gts)
}

pub struct Sweep {
    pub value: f64,
    pub g: f64,
    pub partition: Vec<bool>,
}

/// Uses every observed score as a threshold and keeps the best g-means,
/// preferring the lowest score on ties.
pub fn exhaustive(scores: &[f64], labels: &[u8]) -> Sweep {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut values = scores.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut best: Option<Sweep> = None;
    for &v in &values {
        let partition: Vec<bool> = scores.iter().map(|&s| s >= v).collect();
        let tp = partition.iter().zip(labels).filter(|(&p, &l)| p && l == 1).count() as f64;
        let fp = partition.iter().zip(labels).filter(|(&p, &l)| p && l == 0).count() as f64;
        let g = g_means(tp / pos, fp / neg);
        if best.as_ref().is_none_or(|b| g > b.g) {
            best = Some(Sweep { value: v, g, partition });
        }
    }
    best.unwrap()
}

pub fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=1000);
    let coarse = rng.random_bool(0.5);
    let mut scores: Vec<f64> = (0..n)
        .map(|_| {
            if coarse {
                rng.random_range(0..=20) as f64 / 20.0
            } else {
                rng.random_range(0.0..=1.0)
            }
        })
        .collect();
    let shift = rng.random_range(0.0..0.5);
    let mut labels: Vec<u8> = scores
        .iter()
        .map(|&s| rng.random_bool((s * (1.0 - shift) + shift / 2.0).clamp(0.0, 1.0)) as u8)
        .collect();
    labels[0] = 0;
    labels[1] = 1;
    scores.swap(0, n - 1);
    (scores, labels)
}

pub fn bbox(class_id: i64, class_conf: f64) -> BBox {
    BBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 1.0,
        class_id,
        class_conf,
    }
}

/// Direct pairwise evaluation: box j is selected if it was selected, or if
/// some selected box i of the same class has both confidences above the gate.
pub fn brute_force(decisions: &[bool], boxes: &[BBox], beta_g: f64) -> Vec<bool> {
    let n = boxes.len();
    let mut out = decisions.to_vec();
    for j in 0..n {
        for i in 0..n {
            if decisions[i]
                && boxes[i].class_conf > beta_g
                && boxes[j].class_conf > beta_g
                && boxes[i].class_id == boxes[j].class_id
            {
                out[j] = true;
            }
        }
    }
    out
}

