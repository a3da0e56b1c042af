//! End-to-end training under per-box MSE with AdamW, one scene per step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use taskclip_tensor::{collect_grads, flatten, Graph, ParamTree, Real, Tensor};

use crate::checkpoint::TrainingMeta;
use crate::data::{SceneRecord, TaskSet, TaskSpec};
use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::recalibration::{ModelConfig, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Reshuffle scene order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Larger step size for the small synthetic datasets, where the default
    /// learning rate would barely move the weights.
    pub fn synthetic() -> Self {
        Self {
            epochs: 200,
            learning_rate: SYNTHETIC_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

pub const SYNTHETIC_LEARNING_RATE: f64 = 3e-5;

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<R: ParamTree<Tensor<T>>>(params: &R) -> Self {
        let zeros: Vec<Tensor<T>> = flatten(params)
            .iter()
            .map(|t| Tensor::zeros(t.shape()).expect("parameter shape is valid"))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update:
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn optimizer_step<T: Real, R: ParamTree<Tensor<T>>>(
    params: &mut R,
    grads: &R,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let grads = flatten(grads);
    if grads.len() != state.m.len() {
        return Err(Error::Input(format!(
            "{} gradients for {} optimizer slots",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |x: f64| T::from_f64_lossy(x);
    let (lr, b1, b2, eps) = (c(cfg.learning_rate), c(cfg.beta1), c(cfg.beta2), c(cfg.eps));
    let decay = T::one() - c(cfg.learning_rate * cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    let mut i = 0;
    let mut failure = None;
    params.visit_mut("", &mut |name, p| {
        let g = &grads[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        i += 1;
        if g.shape() != p.shape() {
            failure.get_or_insert_with(|| {
                Error::Input(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ))
            });
            return;
        }
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in it {
            *p = *p * decay;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    failure.map_or(Ok(()), Err)
}

/// Mean squared error of the model's scores on one scene and the gradient
/// of every parameter. `None` for a scene without boxes.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    scene: &SceneRecord,
    task: &TaskSpec,
    target: &[f64],
) -> Result<Option<(f64, ModelParams<Tensor<T>>)>> {
    if target.len() != scene.num_boxes() {
        return Err(Error::Input(format!(
            "{} targets for {} boxes",
            target.len(),
            scene.num_boxes()
        )));
    }
    let mut g = Graph::new();
    let Some(pass) = model.forward(&mut g, scene, task)? else {
        return Ok(None);
    };
    let target = Tensor::new(
        [1, target.len()],
        target.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )?;
    let target = g.constant(target);
    let loss = g.mse_loss(pass.scores, target)?;
    let value = g.value(loss).data()[0].as_f64();
    g.backward(loss)?;
    Ok(Some((value, collect_grads(&g, &pass.params))))
}

/// Loss of the model on one scene without a backward pass.
pub fn scene_loss<T: Real>(
    model: &Model<T>,
    scene: &SceneRecord,
    task: &TaskSpec,
    target: &[f64],
) -> Result<Option<f64>> {
    let scores = model.score_scene(scene, task)?;
    if scores.is_empty() {
        return Ok(None);
    }
    if target.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} targets for {} boxes",
            target.len(),
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    Ok(Some(
        scores
            .iter()
            .zip(target)
            .map(|(s, t)| (s - t) * (s - t))
            .sum::<f64>()
            / n,
    ))
}

fn targets(scene: &SceneRecord) -> Result<Vec<f64>> {
    scene
        .labels()
        .map(|l| l.into_iter().map(f64::from).collect())
        .ok_or_else(|| {
            Error::Data(format!(
                "scene {} (task {}) has boxes without gt_label",
                scene.image_id, scene.task_id
            ))
        })
}

/// Holds the model and optimizer state between epochs.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    state: AdamState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            config,
            state,
            rng,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One gradient step on one scene against `target`; returns the loss
    /// before the step, or `None` for a scene without boxes.
    pub fn step(&mut self, scene: &SceneRecord, task: &TaskSpec, target: &[f64]) -> Result<Option<f64>> {
        let Some((loss, grads)) = loss_and_grads(&self.model, scene, task, target)? else {
            return Ok(None);
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                image_id: scene.image_id.clone(),
                task_id: scene.task_id,
            });
        }
        optimizer_step(&mut self.model.params, &grads, &mut self.state, &self.config)?;
        Ok(Some(loss))
    }

    /// Runs one pass over `scenes` and returns the mean per-scene loss.
    pub fn run_epoch(&mut self, scenes: &[SceneRecord], tasks: &TaskSet) -> Result<f64> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut self.rng);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in order {
            let scene = &scenes[i];
            let task = task_for(tasks, scene)?;
            let target = targets(scene)?;
            if let Some(loss) = self.step(scene, task, &target)? {
                total += loss;
                count += 1;
            }
        }
        self.epoch += 1;
        if count == 0 {
            return Err(Error::Data("no training scene has any boxes".into()));
        }
        Ok(total / count as f64)
    }
}

fn task_for<'a>(tasks: &'a TaskSet, scene: &SceneRecord) -> Result<&'a TaskSpec> {
    tasks.get(&scene.task_id).ok_or_else(|| {
        Error::Data(format!(
            "scene {} references unknown task {}",
            scene.image_id, scene.task_id
        ))
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    /// Mean loss of each epoch, in order.
    pub loss_history: Vec<f64>,
    pub meta: TrainingMeta,
}

/// Initializes a model from `tcfg.seed` and trains it for `tcfg.epochs`.
/// Every scene must carry a label on every box.
pub fn train<T: Real>(
    scenes: &[SceneRecord],
    tasks: &TaskSet,
    config: ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(scenes, tasks, config, tcfg, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with<T: Real>(
    scenes: &[SceneRecord],
    tasks: &TaskSet,
    config: ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    for s in scenes {
        targets(s)?;
        task_for(tasks, s)?;
    }
    let model = Model::init(config, tcfg.seed)?;
    let mut trainer = Trainer::new(model, tcfg.clone())?;
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let loss = trainer.run_epoch(scenes, tasks)?;
        on_epoch(epoch, loss);
        history.push(loss);
    }
    Ok(TrainOutcome {
        meta: TrainingMeta {
            epochs: tcfg.epochs,
            seed: tcfg.seed,
            final_loss: history.last().copied(),
        },
        model: trainer.model,
        loss_history: history,
    })
}

/// Writes `epoch,mean_loss` rows, epochs numbered from 1.
pub fn write_loss_csv(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,mean_loss\n");
    for (i, loss) in history.iter().enumerate() {
        writeln!(out, "{},{loss}", i + 1).expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
