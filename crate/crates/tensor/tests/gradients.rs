use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskclip_tensor::{
    bind_params, flatten, grad_check, multi_head_attention, unflatten, AttentionParams, Graph,
    Tensor, Var, DEFAULT_STEP,
};

fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
    let data = (0..shape[0] * shape[1])
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes to the scalar.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> taskclip_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, g.shape(out)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> taskclip_tensor::Result<Var>,
{
    grad_check(inputs, DEFAULT_STEP, |g, v| {
        let out = f(g, v)?;
        weighted_sum(g, out, 99)
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn matmul_sum_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, [3, 4]);
    let b = random(&mut rng, [4, 2]);
    let report = grad_check(&[a, b], DEFAULT_STEP, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, [3, 5]);
    let y = random(&mut rng, [3, 5]);
    let w = random(&mut rng, [5, 4]);
    let row = random(&mut rng, [1, 5]);
    let gain = random(&mut rng, [1, 5]);
    let bias = random(&mut rng, [1, 5]);

    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check(&[x.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]))),
        ("set_matmul", check(&[x.clone(), w.clone()], |g, v| g.set_matmul(v[0], v[1]))),
        ("add", check(&[x.clone(), y.clone()], |g, v| g.add(v[0], v[1]))),
        ("sub", check(&[x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]))),
        ("mul", check(&[x.clone(), y.clone()], |g, v| g.mul(v[0], v[1]))),
        ("add_row", check(&[x.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]))),
        ("scale", check(&[x.clone()], |g, v| Ok(g.scale(v[0], -1.7)))),
        ("relu", check(&[x.clone()], |g, v| Ok(g.relu(v[0])))),
        ("sigmoid", check(&[x.clone()], |g, v| Ok(g.sigmoid(v[0])))),
        ("transpose", check(&[x.clone()], |g, v| Ok(g.transpose(v[0])))),
        ("row_softmax", check(&[x.clone()], |g, v| Ok(g.row_softmax(v[0])))),
        (
            "layer_norm",
            check(&[x.clone(), gain.clone(), bias.clone()], |g, v| {
                g.layer_norm(v[0], v[1], v[2])
            }),
        ),
        ("l2_normalize_rows", check(&[x.clone()], |g, v| Ok(g.l2_normalize_rows(v[0])))),
        ("concat_rows", check(&[x.clone(), row.clone()], |g, v| g.concat_rows(&[v[0], v[1]]))),
        (
            "concat_cols",
            check(&[x.clone(), y.clone()], |g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        ),
        ("slice_cols", check(&[x.clone()], |g, v| g.slice_cols(v[0], 1, 3))),
        (
            "mse_loss",
            check(&[x.clone(), y.clone()], |g, v| g.mse_loss(v[0], v[1])),
        ),
    ];
    for (name, err) in cases {
        assert!(err <= 1e-5, "{name}: relative error {err}");
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 8;
    let params = AttentionParams {
        wq: random(&mut rng, [dim, dim]),
        wk: random(&mut rng, [dim, dim]),
        wv: random(&mut rng, [dim, dim]),
        wo: random(&mut rng, [dim, dim]),
    };
    let query = random(&mut rng, [3, dim]);
    let memory = random(&mut rng, [5, dim]);

    let mut inputs = flatten(&params);
    inputs.push(query);
    inputs.push(memory);
    let report = grad_check(&inputs, DEFAULT_STEP, |g, v| {
        let p: AttentionParams<Var> = unflatten(&params, &v[..4]);
        let out = multi_head_attention(g, v[4], v[5], &p, 2)?;
        weighted_sum(g, out, 5)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");

    // self-attention: query and memory are the same node
    let x = random(&mut rng, [4, dim]);
    let mut inputs = flatten(&params);
    inputs.push(x);
    let report = grad_check(&inputs, DEFAULT_STEP, |g, v| {
        let p: AttentionParams<Var> = unflatten(&params, &v[..4]);
        let out = multi_head_attention(g, v[4], v[4], &p, 2)?;
        weighted_sum(g, out, 6)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn attention_output_shape_follows_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 8;
    let params = AttentionParams {
        wq: random(&mut rng, [dim, dim]),
        wk: random(&mut rng, [dim, dim]),
        wv: random(&mut rng, [dim, dim]),
        wo: random(&mut rng, [dim, dim]),
    };
    for q in 1..5 {
        for s in 1..5 {
            let mut g = Graph::new();
            let p = bind_params(&mut g, &params);
            let query = g.constant(random(&mut rng, [q, dim]));
            let memory = g.constant(random(&mut rng, [s, dim]));
            let out = multi_head_attention(&mut g, query, memory, &p, 4).unwrap();
            assert_eq!(g.shape(out), [q, dim]);
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_tensors() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let a = g.param(random(&mut rng, [4, 6]).cast());
        let b = g.param(random(&mut rng, [6, 6]).cast());
        let c = g.matmul(a, b).unwrap();
        let s = g.row_softmax(c);
        let l = g.sum(s);
        g.backward(l).unwrap();
        (g.value(s).clone(), g.grad(b).unwrap().clone())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&v1), bits(&v2));
    assert_eq!(bits(&g1), bits(&g2));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.0f64..1000.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, [rows, cols]).map(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.constant(x.cast::<f32>());
        let y = g.row_softmax(xv);
        let y = g.value(y);
        prop_assert!(y.is_finite());
        for r in 0..rows {
            let s: f64 = y.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn softmax_is_strictly_positive_on_moderate_input(seed in any::<u64>(), cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, [2, cols]).map(|v| v * 10.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.row_softmax(xv);
        prop_assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn forward_ops_stay_finite_on_bounded_input(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, [3, 4]).map(|v| v * 1e3);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let gain = g.constant(Tensor::full([1, 4], 1.0).unwrap());
        let bias = g.constant(Tensor::zeros([1, 4]).unwrap());
        let outs = [
            g.sigmoid(xv),
            g.row_softmax(xv),
            g.l2_normalize_rows(xv),
            g.layer_norm(xv, gain, bias).unwrap(),
        ];
        for o in outs {
            prop_assert!(g.value(o).is_finite());
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, [4, 7]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.l2_normalize_rows(xv);
        for r in 0..4 {
            let n: f64 = g.value(y).row(r).iter().map(|v| v * v).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
