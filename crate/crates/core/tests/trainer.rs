use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaklab_core::activelabel::{active_label, ActiveLabelConfig, LabelSet, PseudoLabel};
use weaklab_core::container::Container;
use weaklab_core::geometry::camera_subset;
use weaklab_core::rectify::RectifyConfig;
use weaklab_core::superpixel::{seeds_segment, SeedsConfig};
use weaklab_core::synth::{generate_scene, SceneConfig};
use weaklab_core::trainer::fusion::FusionGate;
use weaklab_core::trainer::losses::*;
use weaklab_core::trainer::mstep::SceneTargets;
use weaklab_core::trainer::nn::Layout;
use weaklab_core::trainer::optim::{cosine_lr, nesterov_step, SgdConfig};
use weaklab_core::trainer::*;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let mut p = x.clone();
        p[[i, j]] += h;
        let mut m = x.clone();
        m[[i, j]] -= h;
        g[[i, j]] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
    softmax(&random(rng, n, c, 2.0))
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for inst in 0..25 {
        let (n, c) = (rng.random_range(1..=8), rng.random_range(2..=8));
        let z = random(&mut rng, n, c, 3.0);
        let mut targets = Vec::new();
        for row in 0..n {
            if rng.random_bool(0.8) {
                targets.push(Target { row, class: rng.random_range(0..c), weight: rng.random_range(0.1..1.0) });
            }
        }
        let (_, g) = cross_entropy(&z, &targets);
        let num = numeric_grad(&z, |x| cross_entropy(x, &targets).0);
        assert!(rel_err(&g, &num) < 1e-6, "instance {inst}");
    }
}

#[test]
fn cross_entropy_value_is_weighted_mean_nll() {
    let z = ndarray::array![[0.0, 0.0], [2.0, 0.0]];
    let t = [Target { row: 0, class: 0, weight: 1.0 }, Target { row: 1, class: 1, weight: 0.5 }];
    let expect = (2f64.ln() + 0.5 * (1.0 + 2f64.exp()).ln()) / 2.0;
    assert!((cross_entropy(&z, &t).0 - expect).abs() < 1e-12);
}

#[test]
fn lovasz_gradient_in_probabilities_and_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..25 {
        let (n, c) = (rng.random_range(1..=8), rng.random_range(2..=6));
        let z = random(&mut rng, n, c, 2.0);
        let p = softmax(&z);
        let rows: Vec<usize> = (0..n).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (_, dp) = lovasz_softmax(&p, &rows, &classes);
        let num = numeric_grad(&p, |x| lovasz_softmax(x, &rows, &classes).0);
        assert!(rel_err(&dp, &num) < 1e-6, "probs, instance {inst}");
        let dz = softmax_backward(&p, &dp);
        let num = numeric_grad(&z, |x| lovasz_softmax(&softmax(x), &rows, &classes).0);
        assert!(rel_err(&dz, &num) < 1e-5, "logits, instance {inst}");
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// The Lovász extension of a submodular set function is the maximum of
/// <m, w_π> over the greedy vertices w_π of its base polytope.
#[test]
fn lovasz_matches_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (n, c) = (rng.random_range(1..=6), rng.random_range(2..=4));
        let p = random_probs(&mut rng, n, c);
        let rows: Vec<usize> = (0..n).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut present = classes.clone();
        present.sort_unstable();
        present.dedup();
        let mut oracle = 0.0;
        for &k in &present {
            let fg: Vec<bool> = classes.iter().map(|&y| y == k).collect();
            let m: Vec<f64> = (0..n).map(|i| (fg[i] as u8 as f64 - p[[i, k]]).abs()).collect();
            // Jaccard loss of a set S of mispredicted points: |S| / |fg ∪ S|.
            let delta = |s: &[usize]| {
                let union = fg.iter().filter(|&&f| f).count() + s.iter().filter(|&&i| !fg[i]).count();
                s.len() as f64 / union as f64
            };
            let best = permutations(n)
                .into_iter()
                .map(|perm| (1..=n).map(|i| m[perm[i - 1]] * (delta(&perm[..i]) - delta(&perm[..i - 1]))).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            oracle += best / present.len() as f64;
        }
        let (v, _) = lovasz_softmax(&p, &rows, &classes);
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
    }
}

#[test]
fn negative_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..25 {
        let (n, c) = (rng.random_range(1..=8), rng.random_range(3..=8));
        let z = random(&mut rng, n, c, 2.0);
        let targets: Vec<NegativeTarget> = (0..n)
            .map(|row| {
                let mut all: Vec<usize> = (0..c).collect();
                all.shuffle(&mut rng);
                let mut allowed = all[..rng.random_range(2..c)].to_vec();
                allowed.sort_unstable();
                NegativeTarget { row, allowed }
            })
            .collect();
        let p = softmax(&z);
        let lp = negative_loss(&p, &targets);
        let num = numeric_grad(&p, |x| negative_loss(x, &targets).value);
        assert!(rel_err(&lp.grad, &num) < 1e-6, "probs, instance {inst}");
        let lz = negative_loss_logits(&z, &targets);
        assert!((lz.value - lp.value).abs() < 1e-12);
        let num = numeric_grad(&z, |x| negative_loss_logits(x, &targets).value);
        assert!(rel_err(&lz.grad, &num) < 1e-6, "logits, instance {inst}");
        // chain rule through the softmax agrees with the direct logit gradient
        assert!(rel_err(&softmax_backward(&p, &lp.grad), &lz.grad) < 1e-9);
    }
}

#[test]
fn negative_loss_example() {
    let p = ndarray::array![[0.2, 0.5, 0.3]];
    let t = [NegativeTarget { row: 0, allowed: vec![0, 1] }];
    assert!((negative_loss(&p, &t).value - -(0.7f64).ln()).abs() < 1e-12);
    assert!((negative_loss(&p, &t).value - 0.3567).abs() < 1e-4);
}

#[test]
fn fusion_gate_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..25 {
        let (n, d, h) = (rng.random_range(1..=6), rng.random_range(1..=8), rng.random_range(1..=8));
        let mut layout = Layout::default();
        let gate = FusionGate::new(&mut layout, d, h);
        let params: Vec<f64> = (0..layout.len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f3 = random(&mut rng, n, d, 1.0);
        let f2 = random(&mut rng, n, d, 1.0);
        let r = random(&mut rng, n, 2 * d, 1.0);
        let loss = |p: &[f64], a: &Array2<f64>, b: &Array2<f64>| {
            (gate.forward(&layout, p, a.view(), b.view()).unwrap().0 * &r).sum()
        };
        let (_, cache) = gate.forward(&layout, &params, f3.view(), f2.view()).unwrap();
        let mut grads = vec![0.0; params.len()];
        let (d3, d2) = gate.backward(&layout, &params, &mut grads, &cache, &r);
        assert!(rel_err(&d3, &numeric_grad(&f3, |x| loss(&params, x, &f2))) < 1e-6, "F3d, instance {inst}");
        assert!(rel_err(&d2, &numeric_grad(&f2, |x| loss(&params, &f3, x))) < 1e-6, "F2d, instance {inst}");
        let pv = Array2::from_shape_vec((1, params.len()), params.clone()).unwrap();
        let num = numeric_grad(&pv, |x| loss(x.as_slice().unwrap(), &f3, &f2));
        let ana = Array2::from_shape_vec((1, grads.len()), grads).unwrap();
        assert!(rel_err(&ana, &num) < 1e-6, "params, instance {inst}");
    }
}

fn small_model(seed: u64) -> ClassifierState {
    let cfg = ModelConfig {
        num_classes: 3,
        point_inputs: 5,
        pixel_inputs: 4,
        hidden: 6,
        dim: 5,
        gate_hidden: 4,
        projection_dim: 3,
    };
    let mut s = ClassifierState::init(cfg, seed).unwrap();
    s.point_mean = Array1::from_elem(5, 0.1);
    s.point_std = Array1::from_elem(5, 0.9);
    s
}

/// Cross-entropy on the logits plus a linear probe on the point-branch output,
/// back-propagated into every parameter.
#[test]
fn whole_model_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for inst in 0..20 {
        let mut state = small_model(inst);
        // random biases keep pre-activations off the ReLU kink at exactly zero
        state.params.iter_mut().for_each(|p| *p = rng.random_range(-0.8..0.8));
        let n = rng.random_range(1..=6);
        let x3 = random(&mut rng, n, 5, 1.0);
        let x2 = random(&mut rng, n, 4, 1.0);
        let targets: Vec<Target> =
            (0..n).map(|row| Target { row, class: rng.random_range(0..3), weight: 1.0 }).collect();
        let probe = random(&mut rng, n, 5, 1.0);
        let loss = |params: &[f64]| {
            let mut s = state.clone();
            s.params = params.to_vec();
            let f = s.forward(x3.view(), x2.view()).unwrap();
            cross_entropy(&f.logits, &targets).0 + (&f.point.out * &probe).sum()
        };
        let fwd = state.forward(x3.view(), x2.view()).unwrap();
        let (_, dlogits) = cross_entropy(&fwd.logits, &targets);
        let mut grads = vec![0.0; state.params.len()];
        state.backward(&fwd, &dlogits, Some(&probe), &mut grads);
        let pv = Array2::from_shape_vec((1, state.params.len()), state.params.clone()).unwrap();
        let num = numeric_grad(&pv, |x| loss(x.as_slice().unwrap()));
        let ana = Array2::from_shape_vec((1, grads.len()), grads).unwrap();
        assert!(rel_err(&ana, &num) < 1e-6, "instance {inst}: {}", rel_err(&ana, &num));
    }
}

#[test]
fn cosine_schedule_and_zero_rate() {
    assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
    assert!(cosine_lr(0.1, 9, 10).abs() < 1e-15);
    assert!((cosine_lr(0.1, 5, 11) - 0.05).abs() < 1e-12);
    let mut p = vec![1.0, -2.0, 3.0];
    let mut v = vec![0.0; 3];
    let before = p.clone();
    nesterov_step(&mut p, &mut v, &[0.5, 0.5, 0.5], 0.0, &SgdConfig { momentum: 0.9, weight_decay: 1e-2 });
    assert_eq!(p, before);
}

struct Fixture {
    scenes: Vec<SceneData>,
    labels: Vec<LabelSet>,
}

fn fixture(seeds: &[u64]) -> Fixture {
    let cfg = SceneConfig { image_width: 64, image_height: 32, ..SceneConfig::default() };
    let mut scenes = Vec::new();
    let mut labels = Vec::new();
    for &seed in seeds {
        let f = generate_scene(&cfg, seed).unwrap();
        let maps: Vec<_> = f
            .images
            .iter()
            .map(|im| seeds_segment(im, &SeedsConfig { num_superpixels: 16, ..Default::default() }).unwrap().map)
            .collect();
        scenes.push(SceneData::build(&f, Some(&maps)).unwrap());
        let sub = f.restrict(&camera_subset(&f));
        labels.push(active_label(&sub.points, &sub.gt_class, &ActiveLabelConfig::default()).unwrap().labels);
    }
    Fixture { scenes, labels }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig { epochs: 2, max_rows: 256, ..TrainConfig::default() }
}

fn init(fx: &Fixture) -> ClassifierState {
    let mut s = ClassifierState::init(ModelConfig::new(6), 3).unwrap();
    fit_standardization(&mut s, &fx.scenes).unwrap();
    s
}

#[test]
fn m_step_is_deterministic_and_learns() {
    let fx = fixture(&[1, 2]);
    let cfg = quick_cfg();
    let mut a = init(&fx);
    let mut b = init(&fx);
    let ra = m_step(&mut a, &fx.scenes, &fx.labels, &cfg, 0).unwrap();
    let rb = m_step(&mut b, &fx.scenes, &fx.labels, &cfg, 0).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ra, rb);
    assert!(ra.iter().all(|r| r.assoc > 0.0), "association loss was active");
    let mut c = init(&fx);
    m_step(&mut c, &fx.scenes, &fx.labels, &cfg, 1).unwrap();
    assert_ne!(a.params, c.params, "rounds use separate random streams");
}

#[test]
fn unused_supervision_leaves_training_unchanged() {
    let fx = fixture(&[3]);
    let cfg = TrainConfig {
        assoc_weight: 0.0,
        supervision: Supervision { pseudo: false, ..Supervision::default() },
        ..quick_cfg()
    };
    let mut with_pseudo = fx.labels.clone();
    let free: Vec<usize> = (0..fx.scenes[0].len()).filter(|&i| fx.labels[0].is_unlabeled(i)).take(50).collect();
    assert!(!free.is_empty());
    for &i in &free {
        with_pseudo[0].add_pseudo(i, PseudoLabel { class: 1, confidence: 0.9, iteration: 0 }).unwrap();
    }
    let mut a = init(&fx);
    let mut b = init(&fx);
    m_step(&mut a, &fx.scenes, &fx.labels, &cfg, 0).unwrap();
    m_step(&mut b, &fx.scenes, &with_pseudo, &cfg, 0).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn pseudo_targets_are_weighted_by_confidence() {
    let fx = fixture(&[4]);
    let mut labels = fx.labels[0].clone();
    let free: Vec<usize> = (0..fx.scenes[0].len()).filter(|&i| labels.is_unlabeled(i)).take(5).collect();
    for (k, &i) in free.iter().enumerate() {
        labels.add_pseudo(i, PseudoLabel { class: 2, confidence: 0.5 + 0.1 * k as f64, iteration: 1 }).unwrap();
    }
    let soft = SceneTargets::build(&fx.scenes[0], &labels, &Supervision::default()).unwrap();
    for (k, &i) in free.iter().enumerate() {
        let row = soft.rows.binary_search(&i).unwrap();
        let t = soft.hard.iter().find(|t| t.row == row).unwrap();
        assert!((t.weight - (0.5 + 0.1 * k as f64)).abs() < 1e-15);
        assert_eq!(t.class, 2);
    }
    let hard =
        SceneTargets::build(&fx.scenes[0], &labels, &Supervision { hard_pseudo: true, ..Supervision::default() })
            .unwrap();
    assert!(hard.hard.iter().all(|t| t.weight == 1.0));
    // every sparse label survives subsampling
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sub = soft.subsample(100, &mut rng);
    let kept: Vec<usize> = sub.rows.clone();
    assert!(labels.sparse.keys().all(|i| kept.contains(i)));
    assert!(sub.rows.len() <= 100.max(labels.sparse.len()));
}

#[test]
fn em_with_infinite_tolerance_runs_one_iteration() {
    let fx = fixture(&[6, 7, 10]);
    let (train, val) = (&fx.scenes[..2], &fx.scenes[2..]);
    let cfg = TrainConfig { tolerance: f64::INFINITY, em_min_iterations: 1, em_max_iterations: 3, ..quick_cfg() };
    let (best, em, warm) =
        train_em(init(&fx), train, val, fx.labels[..2].to_vec(), &cfg, &RectifyConfig::default(), PseudoMethod::ActFsf)
            .unwrap();
    assert_eq!(warm.len(), 2);
    assert_eq!(em.iterations.len(), 1);
    assert_eq!(em.history.len(), 2);
    let best_miou = validation_miou(&best, val).unwrap();
    assert_eq!(best_miou, em.history[em.best]);
    // E-step never touches sparse or propagated labels
    for (before, after) in fx.labels[..2].iter().zip(&em.labels) {
        assert_eq!(before.sparse, after.sparse);
        assert_eq!(before.propagated, after.propagated);
    }
    let added: usize = em.labels.iter().map(|l| l.pseudo.len()).sum();
    assert_eq!(added, em.iterations[0].estep.added);
}

#[test]
fn checkpoint_roundtrip() {
    let fx = fixture(&[8]);
    let mut s = init(&fx);
    m_step(&mut s, &fx.scenes, &fx.labels, &TrainConfig { epochs: 1, ..quick_cfg() }, 0).unwrap();
    let mut c = Container::new();
    s.write_sections(&mut c).unwrap();
    let back = ClassifierState::read_sections(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.params, s.params);
    assert_eq!(back.velocity, s.velocity);
    assert_eq!(back.step, s.step);
    assert_eq!(predict_classes(&back, &fx.scenes[0]).unwrap(), predict_classes(&s, &fx.scenes[0]).unwrap());
}
