//! File formats: scenes (JSON Lines), task attribute specs, predictions,
//! evaluation reports and per-task thresholds.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use taskclip_tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Axis-aligned detection box in pixels with its detector class and
/// classification confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: i64,
    pub class_conf: f64,
}

impl BBox {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err("non-finite box coordinate".into());
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x_min, self.y_min, self.x_max, self.y_max
            ));
        }
        if !(0.0..=1.0).contains(&self.class_conf) {
            return Err(format!("class_conf {} outside [0, 1]", self.class_conf));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<u8>,
    pub embedding: Vec<f32>,
}

/// One image under one task. Box order is significant: position `i` in the
/// file is box index `i` everywhere downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: String,
    pub task_id: u32,
    pub global_tokens: Vec<Vec<f32>>,
    pub boxes: Vec<SceneBox>,
}

impl SceneRecord {
    pub fn embed_dim(&self) -> Option<usize> {
        self.global_tokens.first().map(Vec::len)
    }

    pub fn num_boxes(&self) -> usize {
        self.boxes.len()
    }

    /// Checks the record and returns its embedding dimension.
    pub fn validate(&self) -> std::result::Result<usize, String> {
        let dim = match self.embed_dim() {
            None => return Err("global_tokens must hold at least one token".into()),
            Some(0) => return Err("embedding dimension must be positive".into()),
            Some(d) => d,
        };
        for (i, t) in self.global_tokens.iter().enumerate() {
            if t.len() != dim {
                return Err(format!("global token {i} has length {}, expected {dim}", t.len()));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(format!("global token {i} is not finite"));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.bbox.validate().map_err(|e| format!("box {i}: {e}"))?;
            if b.embedding.len() != dim {
                return Err(format!(
                    "box {i}: embedding length {}, expected {dim}",
                    b.embedding.len()
                ));
            }
            if b.embedding.iter().any(|v| !v.is_finite()) {
                return Err(format!("box {i}: embedding is not finite"));
            }
            if let Some(label) = b.gt_label {
                if label > 1 {
                    return Err(format!("box {i}: gt_label {label} is not 0 or 1"));
                }
            }
        }
        Ok(dim)
    }

    /// Ground-truth labels, or `None` if any box lacks one.
    pub fn labels(&self) -> Option<Vec<u8>> {
        self.boxes.iter().map(|b| b.gt_label).collect()
    }

    pub fn box_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let rows: Vec<Vec<T>> = self
            .boxes
            .iter()
            .map(|b| b.embedding.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
            .collect();
        Ok(Tensor::from_rows(&rows)?)
    }

    pub fn global_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.global_tokens.is_empty() {
            return Err(Error::Input(format!(
                "scene {} has no global tokens",
                self.image_id
            )));
        }
        Ok(matrix_from_f32(&self.global_tokens)?)
    }
}

fn matrix_from_f32<T: Real>(rows: &[Vec<f32>]) -> taskclip_tensor::Result<Tensor<T>> {
    let rows: Vec<Vec<T>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// Attribute words describing suitable objects for a task, with their
/// precomputed text embeddings (row-aligned with the words).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub task_name: String,
    pub attribute_words: Vec<String>,
    pub word_embeddings: Vec<Vec<f32>>,
}

pub const DEFAULT_NUM_WORDS: usize = 20;

impl TaskSpec {
    pub fn validate(&self) -> std::result::Result<usize, String> {
        if self.attribute_words.is_empty() {
            return Err("task needs at least one attribute word".into());
        }
        if self.attribute_words.len() != self.word_embeddings.len() {
            return Err(format!(
                "{} attribute words but {} embeddings",
                self.attribute_words.len(),
                self.word_embeddings.len()
            ));
        }
        let dim = self.word_embeddings[0].len();
        if dim == 0 {
            return Err("embedding dimension must be positive".into());
        }
        for (i, e) in self.word_embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(format!("word embedding {i} has length {}, expected {dim}", e.len()));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(format!("word embedding {i} is not finite"));
            }
        }
        Ok(dim)
    }

    pub fn num_words(&self) -> usize {
        self.attribute_words.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.word_embeddings.first().map_or(0, Vec::len)
    }

    pub fn word_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Ok(matrix_from_f32(&self.word_embeddings)?)
    }
}

pub type TaskSet = BTreeMap<u32, TaskSpec>;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, R)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<R: Serialize>(path: &Path, value: &R) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<R: DeserializeOwned>(path: &Path) -> Result<R> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads and validates a scenes file. The embedding dimension must be the
/// same for every scene in the file.
pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let mut dim = None;
    let mut scenes = Vec::new();
    for (line, scene) in read_jsonl::<SceneRecord>(path)? {
        let ctx = || format!("{}:{line}", path.display());
        let d = scene.validate().map_err(|m| Error::schema(ctx(), m))?;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::schema(
                    ctx(),
                    format!("embedding dimension {d} differs from {expected} earlier in file"),
                ))
            }
            _ => {}
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn save_scenes(path: impl AsRef<Path>, scenes: &[SceneRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), scenes)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec> {
    let path = path.as_ref();
    let task: TaskSpec = read_json(path)?;
    task.validate()
        .map_err(|m| Error::schema(path.display().to_string(), m))?;
    Ok(task)
}

pub fn save_task(path: impl AsRef<Path>, task: &TaskSpec) -> Result<()> {
    write_json(path.as_ref(), task)
}

/// Loads task specs from files and/or directories (every `*.json` inside a
/// directory, in name order). Duplicate task ids are rejected.
pub fn load_tasks<P: AsRef<Path>>(paths: &[P]) -> Result<TaskSet> {
    let mut files: Vec<PathBuf> = Vec::new();
    for p in paths {
        let p = p.as_ref();
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.to_path_buf());
        }
    }
    let mut tasks = TaskSet::new();
    let mut dim = None;
    for f in files {
        let task = load_task(&f)?;
        let d = task.embed_dim();
        if *dim.get_or_insert(d) != d {
            return Err(Error::schema(
                f.display().to_string(),
                format!("embedding dimension {d} differs from other tasks"),
            ));
        }
        if tasks.insert(task.task_id, task).is_some() {
            return Err(Error::schema(
                f.display().to_string(),
                "duplicate task_id".to_string(),
            ));
        }
    }
    Ok(tasks)
}

/// Rejects scenes that reference unknown tasks or whose embedding
/// dimension differs from their task's.
pub fn check_task_refs(scenes: &[SceneRecord], tasks: &TaskSet) -> Result<()> {
    for s in scenes {
        let task = tasks.get(&s.task_id).ok_or_else(|| {
            Error::schema(
                format!("scene {}", s.image_id),
                format!("unknown task_id {}", s.task_id),
            )
        })?;
        if let Some(d) = s.embed_dim() {
            if d != task.embed_dim() {
                return Err(Error::schema(
                    format!("scene {}", s.image_id),
                    format!(
                        "embedding dimension {d} does not match task {} dimension {}",
                        task.task_id,
                        task.embed_dim()
                    ),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Direct,
    Grouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub index: usize,
    /// Score produced by the model.
    pub score: f64,
    /// Score used for ranking; differs from `score` only for grouped boxes.
    pub rank_score: f64,
    pub decision: u8,
    pub provenance: Provenance,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub task_id: u32,
    pub threshold: f64,
    pub boxes: Vec<BoxPrediction>,
}

impl PredictionRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, b) in self.boxes.iter().enumerate() {
            if b.index != i {
                return Err(format!("box {i} carries index {}", b.index));
            }
            if !(0.0..=1.0).contains(&b.score) || !(0.0..=1.0).contains(&b.rank_score) {
                return Err(format!("box {i}: score outside [0, 1]"));
            }
            match (b.decision, b.provenance) {
                (0, Provenance::Direct) => {}
                (1, Provenance::Direct) if b.score >= self.threshold => {}
                (1, Provenance::Grouped) => {}
                (1, Provenance::Direct) => {
                    return Err(format!(
                        "box {i}: direct decision with score {} below threshold {}",
                        b.score, self.threshold
                    ))
                }
                (d, p) => return Err(format!("box {i}: invalid decision {d} with provenance {p:?}")),
            }
            b.bbox.validate().map_err(|e| format!("box {i}: {e}"))?;
        }
        Ok(())
    }
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), preds)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    read_jsonl::<PredictionRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            rec.validate()
                .map_err(|m| Error::schema(format!("{}:{line}", path.display()), m))?;
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    /// `None` when the task has no ground-truth positives.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_task: BTreeMap<u32, TaskReport>,
    pub map: f64,
    /// Ground-truth negatives per positive over all evaluated boxes.
    pub imbalance_ratio: Option<f64>,
}

pub fn save_report(path: impl AsRef<Path>, report: &Report) -> Result<()> {
    write_json(path.as_ref(), report)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Report> {
    read_json(path.as_ref())
}

pub type Thresholds = BTreeMap<u32, f64>;

pub fn save_thresholds(path: impl AsRef<Path>, thresholds: &Thresholds) -> Result<()> {
    write_json(path.as_ref(), thresholds)
}

pub fn load_thresholds(path: impl AsRef<Path>) -> Result<Thresholds> {
    let path = path.as_ref();
    let t: Thresholds = read_json(path)?;
    for (task, d) in &t {
        if !(0.0..=1.0).contains(d) {
            return Err(Error::schema(
                path.display().to_string(),
                format!("threshold {d} for task {task} outside [0, 1]"),
            ));
        }
    }
    Ok(t)
}

pub fn save_json<R: Serialize>(path: impl AsRef<Path>, value: &R) -> Result<()> {
    write_json(path.as_ref(), value)
}
