use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskclip_core::recalibration::{
    adapter_forward, aligner_layer, global_attention, init_dense_params, SceneVars,
};
use taskclip_core::*;
use taskclip_tensor::{bind_params, Graph};

const DIM: usize = 16;

fn config(num_words: usize) -> ModelConfig {
    ModelConfig {
        score_dim: 16,
        num_words,
        ..ModelConfig::for_embed_dim(DIM)
    }
}

fn model(num_words: usize) -> Model<f64> {
    let cfg = config(num_words);
    // Every weight random, so attention between boxes is active.
    let params = init_dense_params(&cfg, 3).unwrap();
    Model::from_params(cfg, params).unwrap()
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> SceneRecord {
    let v = |rng: &mut ChaCha8Rng| (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    SceneRecord {
        image_id: format!("scene-{n}"),
        task_id: 1,
        global_tokens: vec![v(rng)],
        boxes: (0..n)
            .map(|i| SceneBox {
                bbox: BBox {
                    x_min: i as f64,
                    y_min: 0.0,
                    x_max: i as f64 + 1.0,
                    y_max: 1.0,
                    class_id: (i % 3) as i64,
                    class_conf: 0.9,
                },
                gt_label: Some(0),
                embedding: v(rng),
            })
            .collect(),
    }
}

fn random_task(rng: &mut ChaCha8Rng, words: usize) -> TaskSpec {
    TaskSpec {
        task_id: 1,
        task_name: "t".into(),
        attribute_words: (0..words).map(|i| format!("w{i}")).collect(),
        word_embeddings: (0..words)
            .map(|_| (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect(),
    }
}

#[test]
fn stage_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for words in [1, 20] {
        let m = model(words);
        let task = random_task(&mut rng, words);
        for n in 1..=12 {
            let scene = random_scene(&mut rng, n);
            let mut g = Graph::<f64>::new();
            let p = bind_params(&mut g, &m.params);
            let x = SceneVars {
                boxes: g.constant(scene.box_tensor().unwrap()),
                global_tokens: g.constant(scene.global_tensor().unwrap()),
                words: g.constant(task.word_tensor().unwrap()),
            };
            let v = adapter_forward(&mut g, x.boxes, &p.vision_adapter, 0.3).unwrap();
            let t = adapter_forward(&mut g, x.words, &p.text_adapter, 0.3).unwrap();
            assert_eq!(g.shape(v), [n, DIM]);
            assert_eq!(g.shape(t), [words, DIM]);
            let v = global_attention(&mut g, v, x.global_tokens, &p.global, 4).unwrap();
            assert_eq!(g.shape(v), [n, DIM]);
            let (v, t) = aligner_layer(&mut g, v, t, &p.aligner[0], 4).unwrap();
            assert_eq!((g.shape(v), g.shape(t)), ([n, DIM], [words, DIM]));

            let a = m.recalibrate(&scene, &task).unwrap();
            assert_eq!(a.values.shape(), [n, words]);
            assert!(a.values.data().iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
            let s = m.score_scene(&scene, &task).unwrap();
            assert_eq!(s.len(), n);
            assert!(s.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
    }
}

#[test]
fn box_permutation_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for words in [1, 20] {
        let m = model(words);
        let task = random_task(&mut rng, words);
        for n in 1..=12 {
            let scene = random_scene(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut permuted = scene.clone();
            permuted.boxes = perm.iter().map(|&i| scene.boxes[i].clone()).collect();

            let a = m.recalibrate(&scene, &task).unwrap().values;
            let b = m.recalibrate(&permuted, &task).unwrap().values;
            let s = m.score_scene(&scene, &task).unwrap();
            let sp = m.score_scene(&permuted, &task).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                for (x, y) in b.row(k).iter().zip(a.row(i)) {
                    assert_eq!(x.to_bits(), y.to_bits(), "n={n} words={words}");
                }
                assert_eq!(sp[k].to_bits(), s[i].to_bits(), "n={n} words={words}");
            }
        }
    }
}

#[test]
fn default_architecture() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.layers, cfg.heads), (8, 4));
    assert_eq!((cfg.alpha, cfg.beta), (0.3, 0.3));
    assert_eq!(cfg.num_words, 20);
    assert_eq!(DEFAULT_THRESHOLD, 0.15);
    assert_eq!(DEFAULT_GROUP_CONF, 0.8);
}

#[test]
fn empty_scene_scores_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = model(20);
    let task = random_task(&mut rng, 20);
    let scene = random_scene(&mut rng, 0);
    assert!(m.score_scene(&scene, &task).unwrap().is_empty());
    assert!(m.recalibrate(&scene, &task).is_err());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = model(20);
    let scene = random_scene(&mut rng, 3);
    assert!(m.score_scene(&scene, &random_task(&mut rng, 5)).is_err());
    let mut other = random_task(&mut rng, 20);
    other.task_id = 2;
    assert!(m.score_scene(&scene, &other).is_err());
}

#[test]
fn inference_is_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Model::<f32>::init(config(20), 9).unwrap();
    let task = random_task(&mut rng, 20);
    let tasks: TaskSet = [(1, task)].into_iter().collect();
    let scenes: Vec<SceneRecord> = (1..=10).map(|n| random_scene(&mut rng, n)).collect();
    let opts = InferenceOptions {
        threshold: DEFAULT_THRESHOLD,
        task_thresholds: Thresholds::new(),
        grouping: GroupingConfig::default(),
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| predict_all(&m, &scenes, &tasks, &opts).unwrap())
    };
    assert_eq!(run(1), run(4));
}
