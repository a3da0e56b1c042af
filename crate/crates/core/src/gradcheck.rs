//! Finite-difference verification of every trainable block and of the full
//! training loss, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use taskclip_tensor::{
    flatten, grad_check, unflatten, GradCheckReport, Graph, ParamTree, Tensor, TensorError, Var,
    DEFAULT_STEP,
};

use crate::error::Result;
use crate::recalibration::{
    adapter_forward, aligner_layer, global_attention, init_dense_params, recalibrate_graph, ModelConfig,
    SceneVars,
};
use crate::scorer::score_graph;

pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    #[serde(skip)]
    pub report: GradCheckReport,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Small architecture used for gradient checks: width 16, two heads, two
/// aligner layers.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        adapter_hidden: 4,
        layers: 2,
        heads: 2,
        score_dim: 16,
        alpha: 0.3,
        beta: 0.3,
        ffn_dim: 64,
        num_words: 20,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub boxes: usize,
    pub global_tokens: usize,
    pub seed: u64,
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            boxes: 4,
            global_tokens: 2,
            seed: 0,
            step: DEFAULT_STEP,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 2], bound: f64) -> Tensor<f64> {
    let data = (0..shape[0] * shape[1])
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}

fn lift(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

/// `sum(out * weights)`, a scalar whose gradient reaches every output entry.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: Var) -> taskclip_tensor::Result<Var> {
    let p = g.mul(out, weights)?;
    Ok(g.sum(p))
}

fn check_tree<R, F>(
    block: &'static str,
    tolerance: f64,
    tree: &R,
    extra: Vec<Tensor<f64>>,
    step: f64,
    f: F,
) -> Result<BlockCheck>
where
    R: ParamTree<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &R::Mapped<Var>, &[Var]) -> Result<Var>,
{
    let n = tree.leaf_count();
    let mut inputs = flatten(tree);
    inputs.extend(extra);
    let report = grad_check(&inputs, step, |g, vars| {
        let p = unflatten(tree, &vars[..n]);
        f(g, &p, &vars[n..]).map_err(lift)
    })?;
    Ok(BlockCheck {
        block,
        max_rel_error: report.max_rel_error,
        tolerance,
        checked: report.checked,
        report,
    })
}

/// Checks the adapters, global attention, one aligner layer, the score head
/// and the end-to-end loss.
pub fn check_all(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    cfg.validate()?;
    let params = init_dense_params::<f64>(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (n, d, w) = (opts.boxes, cfg.embed_dim, cfg.num_words);
    let boxes = uniform(&mut rng, [n, d], 1.0);
    let tokens = uniform(&mut rng, [opts.global_tokens, d], 1.0);
    let words = uniform(&mut rng, [w, d], 1.0);
    let heads = cfg.heads;
    let mut out = Vec::new();

    let adapters = vec![params.vision_adapter.clone(), params.text_adapter.clone()];
    let rv = uniform(&mut rng, [n, d], 1.0);
    let rt = uniform(&mut rng, [w, d], 1.0);
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    out.push(check_tree(
        "adapters",
        BLOCK_TOLERANCE,
        &adapters,
        vec![boxes.clone(), words.clone()],
        opts.step,
        |g, p, x| {
            let (rv, rt) = (g.constant(rv.clone()), g.constant(rt.clone()));
            let v = adapter_forward(g, x[0], &p[0], alpha)?;
            let t = adapter_forward(g, x[1], &p[1], beta)?;
            let a = weighted_sum(g, v, rv)?;
            let b = weighted_sum(g, t, rt)?;
            Ok(g.add(a, b)?)
        },
    )?);

    let r = uniform(&mut rng, [n, d], 1.0);
    out.push(check_tree(
        "global_attention",
        BLOCK_TOLERANCE,
        &params.global,
        vec![boxes.clone(), tokens.clone()],
        opts.step,
        |g, p, x| {
            let r = g.constant(r.clone());
            let y = global_attention(g, x[0], x[1], p, heads)?;
            Ok(weighted_sum(g, y, r)?)
        },
    )?);

    let rv = uniform(&mut rng, [n, d], 1.0);
    let rt = uniform(&mut rng, [w, d], 1.0);
    out.push(check_tree(
        "aligner_layer",
        BLOCK_TOLERANCE,
        &params.aligner[0],
        vec![boxes.clone(), words.clone()],
        opts.step,
        |g, p, x| {
            let (rv, rt) = (g.constant(rv.clone()), g.constant(rt.clone()));
            let (v, t) = aligner_layer(g, x[0], x[1], p, heads)?;
            let a = weighted_sum(g, v, rv)?;
            let b = weighted_sum(g, t, rt)?;
            Ok(g.add(a, b)?)
        },
    )?);

    let affinity = uniform(&mut rng, [n, w], 1.0);
    let r = uniform(&mut rng, [1, n], 1.0);
    out.push(check_tree(
        "score_head",
        BLOCK_TOLERANCE,
        &params.score,
        vec![affinity],
        opts.step,
        |g, p, x| {
            let r = g.constant(r.clone());
            let s = score_graph(g, x[0], p, heads)?;
            Ok(weighted_sum(g, s, r)?)
        },
    )?);

    let target: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let target = Tensor::new([1, n], target).expect("positive shape");
    out.push(check_tree(
        "pipeline",
        PIPELINE_TOLERANCE,
        &params,
        Vec::new(),
        opts.step,
        |g, p, _| {
            let inputs = SceneVars {
                boxes: g.constant(boxes.clone()),
                global_tokens: g.constant(tokens.clone()),
                words: g.constant(words.clone()),
            };
            let a = recalibrate_graph(g, inputs, p, cfg)?;
            let s = score_graph(g, a, &p.score, heads)?;
            let t = g.constant(target.clone());
            Ok(g.mse_loss(s, t)?)
        },
    )?);
    Ok(out)
}
