//! Embedding recalibration: residual bottleneck adapters, global attention
//! over image tokens, the stacked vision/text aligner and the cosine
//! affinity between boxes and attribute words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use taskclip_tensor::nn::{layer_norm, linear, multi_head_attention, multi_head_attention_with_weights};
use taskclip_tensor::{
    param_tree, AttentionParams, Graph, LayerNormParams, Linear, Real, Tensor, Var,
};

use crate::data::DEFAULT_NUM_WORDS;
use crate::error::{Error, Result};
use crate::scorer::ScoreParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub adapter_hidden: usize,
    /// Number of aligner layers.
    pub layers: usize,
    pub heads: usize,
    /// Width of the score function's box encoding.
    pub score_dim: usize,
    /// Residual blend of the vision adapter.
    pub alpha: f64,
    /// Residual blend of the text adapter.
    pub beta: f64,
    pub ffn_dim: usize,
    pub num_words: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_embed_dim(512)
    }
}

impl ModelConfig {
    /// Default architecture (8 aligner layers, 4 heads, blends of 0.3) sized
    /// for embeddings of width `dim`.
    pub fn for_embed_dim(dim: usize) -> Self {
        Self {
            embed_dim: dim,
            adapter_hidden: (dim / 4).max(1),
            layers: 8,
            heads: 4,
            score_dim: 256,
            alpha: 0.3,
            beta: 0.3,
            ffn_dim: 4 * dim,
            num_words: DEFAULT_NUM_WORDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.adapter_hidden == 0 || self.ffn_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.score_dim < 2 || self.score_dim % self.heads != 0 {
            return fail(format!(
                "score_dim {} must be at least 2 and divisible by {} heads",
                self.score_dim, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("at least one aligner layer is required".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return fail("adapter blends must lie in [0, 1]".into());
        }
        if self.num_words == 0 {
            return fail("num_words must be positive".into());
        }
        Ok(())
    }
}

/// Bottleneck weights `W1: [D x hidden]`, `W2: [hidden x D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<P> {
    pub w1: P,
    pub w2: P,
}
param_tree!(AdapterParams { leaf w1, leaf w2 });

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttentionParams<P> {
    pub norm_query: LayerNormParams<P>,
    pub norm_memory: LayerNormParams<P>,
    pub attention: AttentionParams<P>,
}
param_tree!(GlobalAttentionParams { node norm_query, node norm_memory, node attention });

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerLayerParams<P> {
    pub norm_vision: LayerNormParams<P>,
    pub vision_self: AttentionParams<P>,
    pub norm_text: LayerNormParams<P>,
    pub text_self: AttentionParams<P>,
    pub norm_cross_query: LayerNormParams<P>,
    pub norm_cross_memory: LayerNormParams<P>,
    pub cross: AttentionParams<P>,
    pub norm_ffn: LayerNormParams<P>,
    pub ffn_in: Linear<P>,
    pub ffn_out: Linear<P>,
}
param_tree!(AlignerLayerParams {
    node norm_vision,
    node vision_self,
    node norm_text,
    node text_self,
    node norm_cross_query,
    node norm_cross_memory,
    node cross,
    node norm_ffn,
    node ffn_in,
    node ffn_out,
});

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub vision_adapter: AdapterParams<P>,
    pub text_adapter: AdapterParams<P>,
    pub global: GlobalAttentionParams<P>,
    pub aligner: Vec<AlignerLayerParams<P>>,
    pub score: ScoreParams<P>,
}
param_tree!(ModelParams {
    node vision_adapter,
    node text_adapter,
    node global,
    node aligner,
    node score,
});

/// How a parameter tensor starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Weight { fan_in: usize },
    /// Last projection of a residual branch. Starts at zero so the stack
    /// begins as the identity on its input; [`dense_init`] draws it like a
    /// weight instead.
    Residual { fan_in: usize },
    Zeros,
    Ones,
}

/// Builds parameter trees from a shape-level description; the closure
/// decides the values (random init, zeros for a load template, ...).
pub struct ParamBuilder<'a, T> {
    make: &'a mut dyn FnMut(Init, [usize; 2]) -> Tensor<T>,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(make: &'a mut dyn FnMut(Init, [usize; 2]) -> Tensor<T>) -> Self {
        Self { make }
    }

    pub fn weight(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        (self.make)(Init::Weight { fan_in: rows }, [rows, cols])
    }

    pub fn linear(&mut self, input: usize, output: usize) -> Linear<Tensor<T>> {
        Linear {
            weight: self.weight(input, output),
            bias: (self.make)(Init::Zeros, [1, output]),
        }
    }

    fn residual_linear(&mut self, input: usize, output: usize) -> Linear<Tensor<T>> {
        Linear {
            weight: (self.make)(Init::Residual { fan_in: input }, [input, output]),
            bias: (self.make)(Init::Zeros, [1, output]),
        }
    }

    pub fn layer_norm(&mut self, dim: usize) -> LayerNormParams<Tensor<T>> {
        LayerNormParams {
            gain: (self.make)(Init::Ones, [1, dim]),
            bias: (self.make)(Init::Zeros, [1, dim]),
        }
    }

    pub fn attention(&mut self, dim: usize) -> AttentionParams<Tensor<T>> {
        AttentionParams {
            wq: self.weight(dim, dim),
            wk: self.weight(dim, dim),
            wv: self.weight(dim, dim),
            wo: (self.make)(Init::Residual { fan_in: dim }, [dim, dim]),
        }
    }

    pub fn adapter(&mut self, dim: usize, hidden: usize) -> AdapterParams<Tensor<T>> {
        AdapterParams {
            w1: self.weight(dim, hidden),
            w2: self.weight(hidden, dim),
        }
    }

    pub fn global_attention(&mut self, dim: usize) -> GlobalAttentionParams<Tensor<T>> {
        GlobalAttentionParams {
            norm_query: self.layer_norm(dim),
            norm_memory: self.layer_norm(dim),
            attention: self.attention(dim),
        }
    }

    pub fn aligner_layer(&mut self, dim: usize, ffn_dim: usize) -> AlignerLayerParams<Tensor<T>> {
        AlignerLayerParams {
            norm_vision: self.layer_norm(dim),
            vision_self: self.attention(dim),
            norm_text: self.layer_norm(dim),
            text_self: self.attention(dim),
            norm_cross_query: self.layer_norm(dim),
            norm_cross_memory: self.layer_norm(dim),
            cross: self.attention(dim),
            norm_ffn: self.layer_norm(dim),
            ffn_in: self.linear(dim, ffn_dim),
            ffn_out: self.residual_linear(ffn_dim, dim),
        }
    }

    pub fn score(&mut self, num_words: usize, score_dim: usize) -> ScoreParams<Tensor<T>> {
        ScoreParams {
            encoder: self.linear(num_words, score_dim),
            norm: self.layer_norm(score_dim),
            attention: self.attention(score_dim),
            hidden: self.linear(score_dim, score_dim / 2),
            output: self.linear(score_dim / 2, 1),
        }
    }

    pub fn model(&mut self, cfg: &ModelConfig) -> ModelParams<Tensor<T>> {
        ModelParams {
            vision_adapter: self.adapter(cfg.embed_dim, cfg.adapter_hidden),
            text_adapter: self.adapter(cfg.embed_dim, cfg.adapter_hidden),
            global: self.global_attention(cfg.embed_dim),
            aligner: (0..cfg.layers)
                .map(|_| self.aligner_layer(cfg.embed_dim, cfg.ffn_dim))
                .collect(),
            score: self.score(cfg.num_words, cfg.score_dim),
        }
    }
}

/// Seeded random initializer for [`ParamBuilder`].
pub fn seeded_init<T: Real>(seed: u64) -> impl FnMut(Init, [usize; 2]) -> Tensor<T> {
    random_init(seed, false)
}

/// Like [`seeded_init`] but residual projections are random too, so every
/// parameter influences the output from the start.
pub fn dense_init<T: Real>(seed: u64) -> impl FnMut(Init, [usize; 2]) -> Tensor<T> {
    random_init(seed, true)
}

fn random_init<T: Real>(seed: u64, dense: bool) -> impl FnMut(Init, [usize; 2]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |init, shape| {
        let n = shape[0] * shape[1];
        let init = match init {
            Init::Residual { fan_in } if dense => Init::Weight { fan_in },
            Init::Residual { .. } => Init::Zeros,
            other => other,
        };
        let data = match init {
            Init::Weight { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Ones => vec![T::one(); n],
            _ => vec![T::zero(); n],
        };
        Tensor::new(shape, data).expect("builder shapes are positive")
    }
}

/// All-zero tree with the shapes implied by `cfg` (layer-norm gains are one).
pub fn param_template<T: Real>(cfg: &ModelConfig) -> ModelParams<Tensor<T>> {
    let mut make = |init: Init, shape: [usize; 2]| match init {
        Init::Ones => Tensor::full(shape, T::one()).expect("positive shape"),
        _ => Tensor::zeros(shape).expect("positive shape"),
    };
    ParamBuilder::new(&mut make).model(cfg)
}

pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<T>>> {
    cfg.validate()?;
    let mut make = seeded_init(seed);
    Ok(ParamBuilder::new(&mut make).model(cfg))
}

/// Parameters with every weight random, see [`dense_init`].
pub fn init_dense_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<T>>> {
    cfg.validate()?;
    let mut make = dense_init(seed);
    Ok(ParamBuilder::new(&mut make).model(cfg))
}

/// `(1 - blend) * E + ReLU(E W1) W2`.
pub fn adapter_forward<T: Real>(
    g: &mut Graph<T>,
    embeddings: Var,
    p: &AdapterParams<Var>,
    blend: f64,
) -> Result<Var> {
    let keep = g.scale(embeddings, T::from_f64_lossy(1.0 - blend));
    let hidden = g.matmul(embeddings, p.w1)?;
    let hidden = g.relu(hidden);
    let delta = g.matmul(hidden, p.w2)?;
    Ok(g.add(keep, delta)?)
}

/// Boxes attend to the global image tokens (pre-norm, residual).
pub fn global_attention<T: Real>(
    g: &mut Graph<T>,
    boxes: Var,
    global_tokens: Var,
    p: &GlobalAttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    global_attention_with_weights(g, boxes, global_tokens, p, heads).map(|(out, _)| out)
}

/// Same as [`global_attention`], also returning the per-head attention
/// weights `[N_bbox x G]`.
pub fn global_attention_with_weights<T: Real>(
    g: &mut Graph<T>,
    boxes: Var,
    global_tokens: Var,
    p: &GlobalAttentionParams<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let q = layer_norm(g, boxes, &p.norm_query)?;
    let m = layer_norm(g, global_tokens, &p.norm_memory)?;
    let attn = multi_head_attention_with_weights(g, q, m, &p.attention, heads)?;
    Ok((g.add(boxes, attn.output)?, attn.weights))
}

/// One aligner layer. Vision and text each pass through self-attention,
/// text then cross-attends to vision and goes through the feed-forward
/// block. The vision output is its self-attention result.
pub fn aligner_layer<T: Real>(
    g: &mut Graph<T>,
    vision: Var,
    text: Var,
    p: &AlignerLayerParams<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let vn = layer_norm(g, vision, &p.norm_vision)?;
    let va = multi_head_attention(g, vn, vn, &p.vision_self, heads)?;
    let vision = g.add(vision, va)?;

    let tn = layer_norm(g, text, &p.norm_text)?;
    let ta = multi_head_attention(g, tn, tn, &p.text_self, heads)?;
    let text = g.add(text, ta)?;

    let q = layer_norm(g, text, &p.norm_cross_query)?;
    let m = layer_norm(g, vision, &p.norm_cross_memory)?;
    let ca = multi_head_attention(g, q, m, &p.cross, heads)?;
    let text = g.add(text, ca)?;

    let fin = layer_norm(g, text, &p.norm_ffn)?;
    let h = linear(g, fin, &p.ffn_in)?;
    let h = g.relu(h);
    let h = linear(g, h, &p.ffn_out)?;
    let text = g.add(text, h)?;

    Ok((vision, text))
}

/// Cosine affinity `[N_bbox x N_word]` between recalibrated box and word
/// embeddings.
pub fn compute_affinity<T: Real>(g: &mut Graph<T>, vision: Var, text: Var) -> Result<Var> {
    if g.shape(vision)[1] != g.shape(text)[1] {
        return Err(taskclip_tensor::TensorError::Dimension {
            op: "compute_affinity",
            lhs: g.shape(vision),
            rhs: g.shape(text),
        }
        .into());
    }
    let v = g.l2_normalize_rows(vision);
    let t = g.l2_normalize_rows(text);
    let tt = g.transpose(t);
    Ok(g.matmul(v, tt)?)
}

/// Graph inputs for one scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    pub boxes: Var,
    pub global_tokens: Var,
    pub words: Var,
}

/// Adapters, global attention, the aligner stack and the affinity product.
pub fn recalibrate_graph<T: Real>(
    g: &mut Graph<T>,
    inputs: SceneVars,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let dim = cfg.embed_dim;
    for (what, v) in [("boxes", inputs.boxes), ("global tokens", inputs.global_tokens), ("words", inputs.words)] {
        if g.shape(v)[1] != dim {
            return Err(Error::Input(format!(
                "{what} have dimension {}, model expects {dim}",
                g.shape(v)[1]
            )));
        }
    }
    let vision = adapter_forward(g, inputs.boxes, &p.vision_adapter, cfg.alpha)?;
    let mut text = adapter_forward(g, inputs.words, &p.text_adapter, cfg.beta)?;
    let mut vision = global_attention(g, vision, inputs.global_tokens, &p.global, cfg.heads)?;
    for layer in &p.aligner {
        (vision, text) = aligner_layer(g, vision, text, layer, cfg.heads)?;
    }
    compute_affinity(g, vision, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use taskclip_tensor::{bind_params, ParamTree};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            adapter_hidden: 2,
            layers: 2,
            heads: 2,
            score_dim: 8,
            alpha: 0.3,
            beta: 0.3,
            ffn_dim: 16,
            num_words: 5,
        }
    }

    #[test]
    fn default_config_matches_reference_architecture() {
        let cfg = ModelConfig::default();
        assert_eq!((cfg.layers, cfg.heads), (8, 4));
        assert_eq!((cfg.alpha, cfg.beta), (0.3, 0.3));
        assert_eq!(cfg.num_words, 20);
        assert_eq!(cfg.adapter_hidden, cfg.embed_dim / 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_names_are_unique() {
        let a = init_params::<f32>(&tiny_cfg(), 3).unwrap();
        let b = init_params::<f32>(&tiny_cfg(), 3).unwrap();
        let c = init_params::<f32>(&tiny_cfg(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut names = Vec::new();
        a.visit("", &mut |n, _| names.push(n.to_string()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"aligner.1.cross.wq".to_string()));
    }

    #[test]
    fn zero_adapter_keeps_blended_residual() {
        let mut g = Graph::<f64>::new();
        let e = Tensor::from_f64_rows(&[[1.0, -2.0, 0.5, 4.0], [0.0, 3.0, -1.0, 2.0]]).unwrap();
        let ev = g.constant(e.clone());
        let p = AdapterParams {
            w1: g.constant(Tensor::zeros([4, 1]).unwrap()),
            w2: g.constant(Tensor::zeros([1, 4]).unwrap()),
        };
        let out = adapter_forward(&mut g, ev, &p, 0.3).unwrap();
        let expected = e.map(|v| 0.7 * v);
        assert!(g.value(out).max_abs_diff(&expected).unwrap() < 1e-15);

        let out = adapter_forward(&mut g, ev, &p, 1.0).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_matches_hand_matmul() {
        // E [2x4], W1 [4x2], W2 [2x4]; values chosen so one hidden unit is clipped.
        let e = [[0.5, -1.0, 2.0, 0.0], [1.0, 1.0, -1.0, 0.5]];
        let w1 = [[0.1, -0.2], [0.3, 0.1], [-0.2, 0.4], [0.5, 0.0]];
        let w2 = [[1.0, 0.0, -1.0, 0.5], [0.2, 0.3, 0.0, -0.4]];
        let blend = 0.3;

        let mut expected = [[0.0f64; 4]; 2];
        for r in 0..2 {
            let mut hidden = [0.0f64; 2];
            for (h, hv) in hidden.iter_mut().enumerate() {
                let s: f64 = (0..4).map(|k| e[r][k] * w1[k][h]).sum();
                *hv = s.max(0.0);
            }
            for c in 0..4 {
                let delta: f64 = (0..2).map(|h| hidden[h] * w2[h][c]).sum();
                expected[r][c] = (1.0 - blend) * e[r][c] + delta;
            }
        }

        let mut g = Graph::<f64>::new();
        let ev = g.constant(Tensor::from_f64_rows(&e).unwrap());
        let p = AdapterParams {
            w1: g.constant(Tensor::from_f64_rows(&w1).unwrap()),
            w2: g.constant(Tensor::from_f64_rows(&w2).unwrap()),
        };
        let out = adapter_forward(&mut g, ev, &p, blend).unwrap();
        let want = Tensor::from_f64_rows(&expected).unwrap();
        assert!(g.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn affinity_cosine_cases() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap());
        let t = g.constant(Tensor::from_f64_rows(&[[3.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap());
        let a = compute_affinity(&mut g, v, t).unwrap();
        assert_eq!(g.shape(a), [2, 2]);
        assert_eq!(g.value(a).get(0, 0), 1.0);
        assert_eq!(g.value(a).get(0, 1), 0.0);
        assert_eq!(g.value(a).get(1, 0), 0.0);
    }

    #[test]
    fn affinity_matches_dot_product_oracle() {
        let v = [[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]];
        let t = [[0.9, 0.1, 0.0], [-0.2, 0.6, 0.8], [0.5, -0.5, 0.5]];
        let unit = |x: &[f64; 3]| {
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            [x[0] / n, x[1] / n, x[2] / n]
        };
        let mut g = Graph::<f64>::new();
        let vv = g.constant(Tensor::from_f64_rows(&v).unwrap());
        let tv = g.constant(Tensor::from_f64_rows(&t).unwrap());
        let a = compute_affinity(&mut g, vv, tv).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let (vi, tj) = (unit(&v[i]), unit(&t[j]));
                let dot: f64 = (0..3).map(|k| vi[k] * tj[k]).sum();
                assert!((g.value(a).get(i, j) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligner_preserves_shapes_across_stack() {
        let cfg = ModelConfig {
            embed_dim: 16,
            adapter_hidden: 4,
            layers: 8,
            heads: 4,
            score_dim: 16,
            alpha: 0.3,
            beta: 0.3,
            ffn_dim: 32,
            num_words: 20,
        };
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let p = bind_params(&mut g, &params);
        let mut v = g.constant(Tensor::full([3, 16], 0.1).unwrap());
        let mut t = g.constant(Tensor::full([20, 16], -0.2).unwrap());
        for layer in &p.aligner {
            (v, t) = aligner_layer(&mut g, v, t, layer, cfg.heads).unwrap();
            assert_eq!(g.shape(v), [3, 16]);
            assert_eq!(g.shape(t), [20, 16]);
        }
    }

    #[test]
    fn single_global_token_gets_full_weight() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let mut g = Graph::<f64>::new();
        let p = bind_params(&mut g, &params.global);
        for n in [1, 5, 12] {
            let boxes = g.constant(seeded_init::<f64>(n as u64)(Init::Weight { fan_in: 1 }, [n, 8]));
            let tokens = g.constant(Tensor::full([1, 8], 0.5).unwrap());
            let (out, weights) =
                global_attention_with_weights(&mut g, boxes, tokens, &p, cfg.heads).unwrap();
            assert_eq!(g.shape(out), [n, 8]);
            for w in weights {
                assert!(g.value(w).data().iter().all(|&x| x == 1.0));
            }
        }
    }
}
