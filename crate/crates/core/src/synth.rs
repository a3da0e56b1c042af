//! Seeded generator of small labelled datasets with planted structure.
//!
//! Every task owns a few latent unit vectors, and a handful of distractor
//! latents belong to no task. Attribute-word embeddings are noisy copies of
//! their task's latents. A box embedding is a fixed random linear image of
//! one latent plus noise: a task's own latents for positives, any other
//! latent for negatives. The detector class of a box is its latent index,
//! so class and suitability are correlated the way grouping expects.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{save_scenes, save_task, BBox, SceneBox, SceneRecord, TaskSpec, DEFAULT_NUM_WORDS};
use crate::error::{Error, Result};

pub const IMAGE_WIDTH: f64 = 640.0;
pub const IMAGE_HEIGHT: f64 = 480.0;
const GRID_COLS: usize = 4;
const GRID_ROWS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_tasks: usize,
    /// Training scenes per task.
    pub scenes_per_task: usize,
    pub val_scenes_per_task: usize,
    pub test_scenes_per_task: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub embed_dim: usize,
    pub num_words: usize,
    pub positive_rate: f64,
    pub noise_std: f64,
    pub latents_per_task: usize,
    pub distractor_latents: usize,
    /// Scale of the random part of the box embedding map `I + s G / sqrt(D)`.
    pub mixing_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            scenes_per_task: 40,
            val_scenes_per_task: 10,
            test_scenes_per_task: 10,
            min_boxes: 8,
            max_boxes: 16,
            embed_dim: 32,
            num_words: DEFAULT_NUM_WORDS,
            positive_rate: 1.0 / 15.0,
            noise_std: 0.05,
            latents_per_task: 2,
            distractor_latents: 4,
            mixing_noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_tasks == 0 || self.scenes_per_task == 0 {
            return fail("need at least one task and one training scene per task");
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes {
            return fail("box count range must satisfy 1 <= min_boxes <= max_boxes");
        }
        if self.max_boxes > GRID_COLS * GRID_ROWS {
            return fail("at most 16 boxes per scene");
        }
        if self.embed_dim == 0 || self.num_words == 0 || self.latents_per_task == 0 {
            return fail("embed_dim, num_words and latents_per_task must be positive");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return fail("positive_rate must lie in (0, 1)");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be a non-negative number");
        }
        if !(self.mixing_noise >= 0.0 && self.mixing_noise.is_finite()) {
            return fail("mixing_noise must be a non-negative number");
        }
        if self.n_tasks == 1 && self.distractor_latents == 0 {
            return fail("a single task needs distractor latents for its negatives");
        }
        Ok(())
    }

    fn total_latents(&self) -> usize {
        self.n_tasks * self.latents_per_task + self.distractor_latents
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub tasks: Vec<TaskSpec>,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Paths written by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub tasks_dir: PathBuf,
}

struct World {
    latents: Vec<Vec<f64>>,
    /// Row-major `D x D`.
    mixing: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let latents = (0..cfg.total_latents())
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let scale = cfg.mixing_noise / (d as f64).sqrt();
        let mixing = (0..d * d)
            .map(|i| (i / d == i % d) as u8 as f64 + gaussian(rng) * scale)
            .collect();
        Self { latents, mixing }
    }

    fn project(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..d)
            .map(|r| (0..d).map(|c| self.mixing[r * d + c] * z[c]).sum())
            .collect()
    }
}

fn noisy(v: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    v.iter()
        .map(|&x| {
            let n = if std > 0.0 { gaussian(rng) * std } else { 0.0 };
            (x + n) as f32
        })
        .collect()
}

fn task_latent(cfg: &SynthConfig, task: usize, k: usize) -> usize {
    task * cfg.latents_per_task + k
}

fn make_task(cfg: &SynthConfig, world: &World, task: usize, rng: &mut ChaCha8Rng) -> TaskSpec {
    let (words, embeddings) = (0..cfg.num_words)
        .map(|j| {
            let latent = task_latent(cfg, task, j % cfg.latents_per_task);
            (
                format!("task{}-attr{j}", task + 1),
                noisy(&world.latents[latent], cfg.noise_std, rng),
            )
        })
        .unzip();
    TaskSpec {
        task_id: task as u32 + 1,
        task_name: format!("synthetic task {}", task + 1),
        attribute_words: words,
        word_embeddings: embeddings,
    }
}

fn cell_box(cell: usize, rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    let cw = IMAGE_WIDTH / GRID_COLS as f64;
    let ch = IMAGE_HEIGHT / GRID_ROWS as f64;
    let (cx, cy) = ((cell % GRID_COLS) as f64 * cw, (cell / GRID_COLS) as f64 * ch);
    let x0 = cx + rng.random_range(0.0..0.3) * cw;
    let y0 = cy + rng.random_range(0.0..0.3) * ch;
    let x1 = cx + rng.random_range(0.6..1.0) * cw;
    let y1 = cy + rng.random_range(0.6..1.0) * ch;
    ((x0).round(), (y0).round(), (x1).round(), (y1).round())
}

struct SceneMaker<'a> {
    cfg: &'a SynthConfig,
    world: &'a World,
    /// Fractional positives carried between scenes.
    carry: f64,
}

impl SceneMaker<'_> {
    fn scene(&mut self, task: usize, image_id: String, rng: &mut ChaCha8Rng) -> SceneRecord {
        let cfg = self.cfg;
        let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
        self.carry += n as f64 * cfg.positive_rate;
        let n_pos = (self.carry.floor() as usize).min(n);
        self.carry -= n_pos as f64;

        let mut cells: Vec<usize> = (0..GRID_COLS * GRID_ROWS).collect();
        let own: Vec<usize> = (0..cfg.latents_per_task).map(|k| task_latent(cfg, task, k)).collect();
        let others: Vec<usize> = (0..cfg.total_latents()).filter(|l| !own.contains(l)).collect();
        // Positives land on random boxes, not always the first few.
        let mut positive = vec![false; n];
        let mut slots: Vec<usize> = (0..n).collect();
        for p in 0..n_pos {
            let k = rng.random_range(p..n);
            slots.swap(p, k);
            positive[slots[p]] = true;
        }

        let boxes: Vec<SceneBox> = (0..n)
            .map(|i| {
                let c = rng.random_range(i..cells.len());
                cells.swap(i, c);
                let (x0, y0, x1, y1) = cell_box(cells[i], rng);
                let latent = if positive[i] {
                    own[rng.random_range(0..own.len())]
                } else {
                    others[rng.random_range(0..others.len())]
                };
                let mixed = self.world.project(&self.world.latents[latent]);
                SceneBox {
                    bbox: BBox {
                        x_min: x0,
                        y_min: y0,
                        x_max: x1,
                        y_max: y1,
                        class_id: latent as i64,
                        class_conf: (rng.random_range(0.5..=1.0f64) * 1000.0).round() / 1000.0,
                    },
                    gt_label: Some(positive[i] as u8),
                    embedding: noisy(&mixed, cfg.noise_std, rng),
                }
            })
            .collect();

        let d = cfg.embed_dim;
        let mut mean = vec![0.0; d];
        for b in &boxes {
            for (m, &v) in mean.iter_mut().zip(&b.embedding) {
                *m += v as f64 / n as f64;
            }
        }
        SceneRecord {
            image_id,
            task_id: task as u32 + 1,
            global_tokens: vec![noisy(&mean, cfg.noise_std, rng)],
            boxes,
        }
    }
}

/// Builds the dataset in memory. The same configuration always yields the
/// same dataset.
pub fn build(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(cfg, &mut rng);
    let tasks: Vec<TaskSpec> = (0..cfg.n_tasks)
        .map(|t| make_task(cfg, &world, t, &mut rng))
        .collect();
    let mut maker = SceneMaker {
        cfg,
        world: &world,
        carry: 0.0,
    };
    let mut split = |name: &str, per_task: usize| -> Vec<SceneRecord> {
        let mut out = Vec::with_capacity(per_task * cfg.n_tasks);
        for t in 0..cfg.n_tasks {
            for i in 0..per_task {
                out.push(maker.scene(t, format!("{name}-t{}-{i:04}", t + 1), &mut rng));
            }
        }
        out
    };
    let train = split("train", cfg.scenes_per_task);
    let val = split("val", cfg.val_scenes_per_task);
    let test = split("test", cfg.test_scenes_per_task);
    Ok(SynthDataset {
        tasks,
        train,
        val,
        test,
    })
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and
/// `tasks/task_<id>.json` under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthFiles> {
    let data = build(cfg)?;
    write_dataset(&data, out_dir)
}

pub fn write_dataset(data: &SynthDataset, out_dir: impl AsRef<Path>) -> Result<SynthFiles> {
    let out = out_dir.as_ref();
    let tasks_dir = out.join("tasks");
    fs::create_dir_all(&tasks_dir).map_err(|e| Error::io(&tasks_dir, e))?;
    let files = SynthFiles {
        train: out.join("train.jsonl"),
        val: out.join("val.jsonl"),
        test: out.join("test.jsonl"),
        tasks_dir,
    };
    save_scenes(&files.train, &data.train)?;
    save_scenes(&files.val, &data.val)?;
    save_scenes(&files.test, &data.test)?;
    for t in &data.tasks {
        save_task(files.tasks_dir.join(format!("task_{}.json", t.task_id)), t)?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig {
            scenes_per_task: 5,
            ..SynthConfig::default()
        };
        assert_eq!(build(&cfg).unwrap(), build(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(build(&cfg).unwrap(), build(&other).unwrap());
    }

    #[test]
    fn scenes_validate_and_boxes_do_not_overlap() {
        let data = build(&SynthConfig::default()).unwrap();
        for s in data.train.iter().chain(&data.val).chain(&data.test) {
            assert_eq!(s.validate(), Ok(32));
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    let a = &a.bbox;
                    let b = &b.bbox;
                    assert!(a.x_max <= b.x_min || b.x_max <= a.x_min || a.y_max <= b.y_min || b.y_max <= a.y_min);
                }
            }
        }
        for t in &data.tasks {
            assert_eq!(t.validate(), Ok(32));
            assert_eq!(t.num_words(), 20);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig { positive_rate: 0.0, ..base.clone() },
            SynthConfig { positive_rate: 1.0, ..base.clone() },
            SynthConfig { min_boxes: 5, max_boxes: 4, ..base.clone() },
            SynthConfig { max_boxes: 17, ..base.clone() },
            SynthConfig { noise_std: -1.0, ..base.clone() },
        ] {
            assert!(build(&bad).is_err());
        }
    }
}
