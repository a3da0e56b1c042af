//! Score function over the affinity matrix, threshold decisions and
//! select-by-grouping.

use serde::{Deserialize, Serialize};
use taskclip_tensor::nn::{layer_norm, linear, multi_head_attention};
use taskclip_tensor::{param_tree, AttentionParams, Graph, LayerNormParams, Linear, Real, Var};

use crate::data::{BBox, Provenance};
use crate::error::{Error, Result};

/// Decision threshold used when no calibrated value is supplied.
pub const DEFAULT_THRESHOLD: f64 = 0.15;

/// Detector-confidence gate for select-by-grouping.
pub const DEFAULT_GROUP_CONF: f64 = 0.8;

/// Per-box encoder `N_word -> D'` (ReLU), one self-attention block over the
/// boxes, and a two-layer regression head `D' -> D'/2 -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams<P> {
    pub encoder: Linear<P>,
    pub norm: LayerNormParams<P>,
    pub attention: AttentionParams<P>,
    pub hidden: Linear<P>,
    pub output: Linear<P>,
}
param_tree!(ScoreParams { node encoder, node norm, node attention, node hidden, node output });

/// Maps an affinity matrix `[N_bbox x N_word]` to scores `[1 x N_bbox]`
/// in `(0, 1)`.
pub fn score_graph<T: Real>(
    g: &mut Graph<T>,
    affinity: Var,
    p: &ScoreParams<Var>,
    heads: usize,
) -> Result<Var> {
    let h = linear(g, affinity, &p.encoder)?;
    let h = g.relu(h);
    let hn = layer_norm(g, h, &p.norm)?;
    let a = multi_head_attention(g, hn, hn, &p.attention, heads)?;
    let h = g.add(h, a)?;
    let z = linear(g, h, &p.hidden)?;
    let z = g.relu(z);
    let z = linear(g, z, &p.output)?;
    let s = g.sigmoid(z);
    Ok(g.transpose(s))
}

/// Scores, decisions and where each positive decision came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSet {
    pub scores: Vec<f64>,
    /// Ranking score; `max(own, trigger)` for grouped boxes, else `scores[i]`.
    pub rank_scores: Vec<f64>,
    pub decisions: Vec<bool>,
    pub provenance: Vec<Provenance>,
    pub threshold: f64,
    /// Confidence gate applied by grouping, if grouping ran.
    pub group_conf: Option<f64>,
}

impl DecisionSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.decisions
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(i, _)| i)
    }
}

/// `P[i] = 1` iff `scores[i] >= threshold`.
pub fn decide(scores: &[f64], threshold: f64) -> DecisionSet {
    DecisionSet {
        scores: scores.to_vec(),
        rank_scores: scores.to_vec(),
        decisions: scores.iter().map(|&s| s >= threshold).collect(),
        provenance: vec![Provenance::Direct; scores.len()],
        threshold,
        group_conf: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub enabled: bool,
    pub beta_g: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            beta_g: DEFAULT_GROUP_CONF,
        }
    }
}

/// Propagates positive decisions to same-class boxes: every direct positive
/// `i` with `conf[i] > beta_g` switches on each `j` with
/// `class[j] == class[i]` and `conf[j] > beta_g`.
///
/// Newly selected boxes are marked grouped and rank with the larger of their
/// own score and the best triggering score. Only direct positives trigger;
/// a grouped box could only reach boxes its trigger already reached, so
/// the selected set is the same and the operation is idempotent.
pub fn select_by_grouping(
    input: &DecisionSet,
    boxes: &[BBox],
    cfg: &GroupingConfig,
) -> Result<DecisionSet> {
    if boxes.len() != input.len() {
        return Err(Error::Input(format!(
            "{} boxes for {} decisions",
            boxes.len(),
            input.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.beta_g) {
        return Err(Error::Config(format!("beta_g {} outside [0, 1]", cfg.beta_g)));
    }
    let mut out = input.clone();
    if !cfg.enabled {
        return Ok(out);
    }
    out.group_conf = Some(cfg.beta_g);

    let triggers: Vec<usize> = input
        .positives()
        .filter(|&i| input.provenance[i] == Provenance::Direct && boxes[i].class_conf > cfg.beta_g)
        .collect();
    for j in 0..boxes.len() {
        if input.decisions[j] || boxes[j].class_conf <= cfg.beta_g {
            continue;
        }
        let best_trigger = triggers
            .iter()
            .filter(|&&i| boxes[i].class_id == boxes[j].class_id)
            .map(|&i| input.scores[i])
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        if let Some(trigger_score) = best_trigger {
            out.decisions[j] = true;
            out.provenance[j] = Provenance::Grouped;
            out.rank_scores[j] = input.scores[j].max(trigger_score);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(class_id: i64, class_conf: f64) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
            class_id,
            class_conf,
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(decide(&[0.16, 0.14], 0.15).decisions, vec![true, false]);
        assert_eq!(decide(&[0.15], 0.15).decisions, vec![true]);
        assert!(decide(&[0.0, 0.3, 1.0], 0.0).decisions.iter().all(|&d| d));
    }

    #[test]
    fn grouping_example() {
        let boxes = [bbox(5, 0.9), bbox(5, 0.85), bbox(7, 0.9)];
        let input = decide(&[0.6, 0.1, 0.05], 0.5);
        let out = select_by_grouping(&input, &boxes, &GroupingConfig::default()).unwrap();
        assert_eq!(out.decisions, vec![true, true, false]);
        assert_eq!(out.provenance[1], Provenance::Grouped);
        assert_eq!(out.scores[1], 0.1);
        assert_eq!(out.rank_scores[1], 0.6);
        assert_eq!(out.group_conf, Some(0.8));
    }

    #[test]
    fn low_confidence_trigger_does_not_propagate() {
        let boxes = [bbox(5, 0.7), bbox(5, 0.95)];
        let input = decide(&[0.9, 0.1], 0.5);
        let out = select_by_grouping(&input, &boxes, &GroupingConfig::default()).unwrap();
        assert_eq!(out.decisions, vec![true, false]);
    }

    #[test]
    fn no_positives_no_change() {
        let boxes = [bbox(1, 0.99), bbox(1, 0.99)];
        let input = decide(&[0.1, 0.2], 0.5);
        let out = select_by_grouping(&input, &boxes, &GroupingConfig::default()).unwrap();
        assert_eq!(out.decisions, input.decisions);
    }

    #[test]
    fn disabled_grouping_is_identity() {
        let boxes = [bbox(5, 0.9), bbox(5, 0.9)];
        let input = decide(&[0.9, 0.1], 0.5);
        let cfg = GroupingConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(select_by_grouping(&input, &boxes, &cfg).unwrap(), input);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let input = decide(&[0.9, 0.1], 0.5);
        assert!(select_by_grouping(&input, &[bbox(1, 0.9)], &GroupingConfig::default()).is_err());
    }
}
