//! Parameter containers and the small layer library built on [`Graph`].
//!
//! Parameter structs are generic over their leaf type `P`. The same struct
//! holds stored tensors (`P = Tensor<T>`), tape handles after binding
//! (`P = Var`), or gradients, and [`ParamTree`] walks the leaves in a fixed
//! declaration order with dotted names.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_params<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Self::Mapped<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }
}

#[doc(hidden)]
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`ParamTree`] for a struct generic over its leaf type. Each
/// field is tagged `leaf` (holds a `P`) or `node` (holds a nested tree).
#[macro_export]
macro_rules! param_tree {
    (@map $s:ident $f:ident leaf $field:ident) => { $f(&$s.$field) };
    (@map $s:ident $f:ident node $field:ident) => { $s.$field.map_params($f) };
    (@visit $s:ident $p:ident $f:ident leaf $field:ident) => {
        $f(&$crate::nn::join($p, stringify!($field)), &$s.$field)
    };
    (@visit $s:ident $p:ident $f:ident node $field:ident) => {
        $s.$field.visit(&$crate::nn::join($p, stringify!($field)), $f)
    };
    (@visit_mut $s:ident $p:ident $f:ident leaf $field:ident) => {
        $f(&$crate::nn::join($p, stringify!($field)), &mut $s.$field)
    };
    (@visit_mut $s:ident $p:ident $f:ident node $field:ident) => {
        $s.$field.visit_mut(&$crate::nn::join($p, stringify!($field)), $f)
    };
    ($name:ident { $($kind:ident $field:ident),* $(,)? }) => {
        impl<P> $crate::nn::ParamTree<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            fn map_params<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: $crate::param_tree!(@map self f $kind $field)),* }
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
                $($crate::param_tree!(@visit self prefix f $kind $field);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $($crate::param_tree!(@visit_mut self prefix f $kind $field);)*
            }
        }
    };
}

impl<P, X: ParamTree<P>> ParamTree<P> for Vec<X> {
    type Mapped<Q> = Vec<X::Mapped<Q>>;

    fn map_params<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Self::Mapped<Q> {
        self.iter().map(|x| x.map_params(f)).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        for (i, x) in self.iter().enumerate() {
            x.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, x) in self.iter_mut().enumerate() {
            x.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Registers every tensor of a tree on the tape as a trainable leaf.
pub fn bind_params<T, R>(g: &mut Graph<T>, tree: &R) -> R::Mapped<Var>
where
    T: Real,
    R: ParamTree<Tensor<T>>,
{
    tree.map_params(&mut |t: &Tensor<T>| g.param(t.clone()))
}

/// Collects the gradients of bound parameters after `backward`. Leaves the
/// loss does not reach get zero gradients.
pub fn collect_grads<T, R>(g: &Graph<T>, vars: &R) -> R::Mapped<Tensor<T>>
where
    T: Real,
    R: ParamTree<Var>,
{
    vars.map_params(&mut |&v: &Var| match g.grad(v) {
        Some(grad) => grad.clone(),
        None => Tensor::zeros(g.shape(v)).expect("bound shape is valid"),
    })
}

/// Flattens a tree's leaves into declaration order.
pub fn flatten<P: Clone, R: ParamTree<P>>(tree: &R) -> Vec<P> {
    let mut out = Vec::new();
    tree.visit("", &mut |_, p| out.push(p.clone()));
    out
}

/// Rebuilds a tree shaped like `template` from leaves in declaration order.
pub fn unflatten<P, Q: Clone, R: ParamTree<P>>(template: &R, leaves: &[Q]) -> R::Mapped<Q> {
    let mut it = leaves.iter();
    template.map_params(&mut |_| it.next().expect("leaf count matches template").clone())
}

/// Affine map `x W + b` with `W: [in x out]`, `b: [1 x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}
param_tree!(Linear { leaf weight, leaf bias });

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}
param_tree!(LayerNormParams { leaf gain, leaf bias });

/// Query, key, value and output projections, each `[D x D]`, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
}
param_tree!(AttentionParams { leaf wq, leaf wk, leaf wv, leaf wo });

pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, p: &Linear<Var>) -> Result<Var> {
    let xw = g.matmul(x, p.weight)?;
    g.add_row(xw, p.bias)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias)
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head attention weights `[Q x S]`, rows summing to one.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `query [Q x D]` over
/// `memory [S x D]`. Self-attention is the `query == memory` case.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    memory: Var,
    p: &AttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    multi_head_attention_with_weights(g, query, memory, p, heads).map(|a| a.output)
}

pub fn multi_head_attention_with_weights<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    memory: Var,
    p: &AttentionParams<Var>,
    heads: usize,
) -> Result<AttentionOutput> {
    let dim = g.shape(query)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(TensorError::Config(format!(
            "model dim {dim} is not divisible by {heads} heads"
        )));
    }
    if g.shape(memory)[1] != dim {
        return Err(TensorError::Dimension {
            op: "attention",
            lhs: g.shape(query),
            rhs: g.shape(memory),
        });
    }
    let head_dim = dim / heads;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();

    let q = g.matmul(query, p.wq)?;
    let k = g.matmul(memory, p.wk)?;
    let v = g.matmul(memory, p.wv)?;

    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let start = h * head_dim;
            (
                g.slice_cols(q, start, head_dim)?,
                g.slice_cols(k, start, head_dim)?,
                g.slice_cols(v, start, head_dim)?,
            )
        };
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let w = g.row_softmax(logits);
        outputs.push(g.set_matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    let output = g.matmul(joined, p.wo)?;
    Ok(AttentionOutput { output, weights })
}
