//! The assembled model: recalibration followed by the score function, plus
//! scene-level inference producing prediction records.

use rayon::prelude::*;
use taskclip_tensor::{bind_params, ParamTree, Real, Tensor, Graph, Var};

use crate::data::{BoxPrediction, PredictionRecord, SceneRecord, TaskSet, TaskSpec, Thresholds};
use crate::error::{Error, Result};
use crate::recalibration::{
    init_params, param_template, recalibrate_graph, ModelConfig, ModelParams, SceneVars,
};
use crate::scorer::{decide, score_graph, select_by_grouping, GroupingConfig, ScoreParams};

/// Box-to-attribute match scores `[N_bbox x N_word]`, entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<T> {
    pub values: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

/// Handles produced by one forward pass on a graph.
pub struct ForwardPass {
    pub params: ModelParams<Var>,
    pub affinity: Var,
    /// `[1 x N_bbox]`
    pub scores: Var,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every shape against `config`.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let template = param_template::<T>(&config);
        let mut expected = Vec::new();
        template.visit("", &mut |n, t| expected.push((n.to_string(), t.shape())));
        let mut i = 0;
        let mut mismatch = None;
        params.visit("", &mut |n, t| {
            match expected.get(i) {
                Some((en, es)) if en == n && *es == t.shape() => {}
                _ if mismatch.is_none() => mismatch = Some(n.to_string()),
                _ => {}
            }
            i += 1;
        });
        if mismatch.is_some() || i != expected.len() {
            return Err(Error::Config(format!(
                "parameters do not match configuration (first mismatch: {})",
                mismatch.unwrap_or_else(|| "parameter count".into())
            )));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.map_params(&mut |t: &Tensor<T>| t.cast()),
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.params.visit("", &mut |_, t| n += t.len());
        n
    }

    fn check_inputs(&self, scene: &SceneRecord, task: &TaskSpec) -> Result<()> {
        if scene.task_id != task.task_id {
            return Err(Error::Input(format!(
                "scene {} belongs to task {}, got task {}",
                scene.image_id, scene.task_id, task.task_id
            )));
        }
        if task.num_words() != self.config.num_words {
            return Err(Error::Input(format!(
                "task {} has {} attribute words, model expects {}",
                task.task_id,
                task.num_words(),
                self.config.num_words
            )));
        }
        Ok(())
    }

    /// Binds parameters and scene data on `g` and runs the full forward
    /// pass. Returns `None` for a scene without boxes.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        scene: &SceneRecord,
        task: &TaskSpec,
    ) -> Result<Option<ForwardPass>> {
        self.check_inputs(scene, task)?;
        if scene.boxes.is_empty() {
            return Ok(None);
        }
        let params = bind_params(g, &self.params);
        let inputs = SceneVars {
            boxes: g.constant(scene.box_tensor()?),
            global_tokens: g.constant(scene.global_tensor()?),
            words: g.constant(task.word_tensor()?),
        };
        let affinity = recalibrate_graph(g, inputs, &params, &self.config)?;
        let scores = score_graph(g, affinity, &params.score, self.config.heads)?;
        Ok(Some(ForwardPass {
            params,
            affinity,
            scores,
        }))
    }

    /// Recalibrated affinity for a scene with at least one box.
    pub fn recalibrate(&self, scene: &SceneRecord, task: &TaskSpec) -> Result<AffinityMatrix<T>> {
        recalibrate(scene, task, &self.params, &self.config)
    }

    /// Suitability score per box; empty for a scene without boxes.
    pub fn score_scene(&self, scene: &SceneRecord, task: &TaskSpec) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        Ok(match self.forward(&mut g, scene, task)? {
            Some(pass) => g.value(pass.scores).data().iter().map(|v| v.as_f64()).collect(),
            None => Vec::new(),
        })
    }
}

/// Adapters, global attention, aligner stack and affinity for one scene.
pub fn recalibrate<T: Real>(
    scene: &SceneRecord,
    task: &TaskSpec,
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
) -> Result<AffinityMatrix<T>> {
    if scene.boxes.is_empty() {
        return Err(Error::Input(format!("scene {} has no boxes", scene.image_id)));
    }
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let inputs = SceneVars {
        boxes: g.constant(scene.box_tensor()?),
        global_tokens: g.constant(scene.global_tensor()?),
        words: g.constant(task.word_tensor()?),
    };
    let a = recalibrate_graph(&mut g, inputs, &bound, config)?;
    Ok(AffinityMatrix {
        values: g.value(a).clone(),
    })
}

/// Runs the score function on an affinity matrix.
pub fn score<T: Real>(
    affinity: &AffinityMatrix<T>,
    params: &ScoreParams<Tensor<T>>,
    heads: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let a = g.constant(affinity.values.clone());
    let s = score_graph(&mut g, a, &bound, heads)?;
    Ok(g.value(s).data().iter().map(|v| v.as_f64()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub threshold: f64,
    /// Per-task thresholds; take precedence over `threshold`.
    pub task_thresholds: Thresholds,
    pub grouping: GroupingConfig,
}

impl InferenceOptions {
    pub fn threshold_for(&self, task_id: u32) -> f64 {
        self.task_thresholds
            .get(&task_id)
            .copied()
            .unwrap_or(self.threshold)
    }
}

pub fn predict_scene<T: Real>(
    model: &Model<T>,
    scene: &SceneRecord,
    task: &TaskSpec,
    opts: &InferenceOptions,
) -> Result<PredictionRecord> {
    let scores = model.score_scene(scene, task)?;
    let threshold = opts.threshold_for(scene.task_id);
    let boxes: Vec<_> = scene.boxes.iter().map(|b| b.bbox).collect();
    let decisions = select_by_grouping(&decide(&scores, threshold), &boxes, &opts.grouping)?;
    Ok(PredictionRecord {
        image_id: scene.image_id.clone(),
        task_id: scene.task_id,
        threshold,
        boxes: boxes
            .iter()
            .enumerate()
            .map(|(i, bbox)| BoxPrediction {
                index: i,
                score: decisions.scores[i],
                rank_score: decisions.rank_scores[i],
                decision: decisions.decisions[i] as u8,
                provenance: decisions.provenance[i],
                bbox: *bbox,
            })
            .collect(),
    })
}

fn lookup<'a>(tasks: &'a TaskSet, scene: &SceneRecord) -> Result<&'a TaskSpec> {
    tasks.get(&scene.task_id).ok_or_else(|| {
        Error::Input(format!(
            "scene {} references unknown task {}",
            scene.image_id, scene.task_id
        ))
    })
}

/// Predicts every scene, in input order. Scenes are processed in parallel;
/// the output does not depend on the thread count.
pub fn predict_all<T: Real>(
    model: &Model<T>,
    scenes: &[SceneRecord],
    tasks: &TaskSet,
    opts: &InferenceOptions,
) -> Result<Vec<PredictionRecord>> {
    scenes
        .par_iter()
        .map(|s| predict_scene(model, s, lookup(tasks, s)?, opts))
        .collect()
}

/// Scores every scene, in input order.
pub fn score_all<T: Real>(
    model: &Model<T>,
    scenes: &[SceneRecord],
    tasks: &TaskSet,
) -> Result<Vec<Vec<f64>>> {
    scenes
        .par_iter()
        .map(|s| model.score_scene(s, lookup(tasks, s)?))
        .collect()
}
