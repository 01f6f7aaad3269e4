use proptest::prelude::*;
use vmf_core::harness::{
    derive_label, evaluate, gen_clip, gen_dataset, gen_dataset_range, gradcheck, gradcheck_config,
    topk_accuracy, train, Dataset, Experiment, ParamGroup, Task, TrainConfig, HELD_OUT_OFFSET,
};
use vmf_core::model::{Model, ModelConfig};
use vmf_core::Tensor;

/// Small enough to train in a test, long enough for flash-order.
fn tiny(task: Task) -> ModelConfig {
    ModelConfig {
        blocks_per_stage: [1, 1, 1, 1],
        base_dim: 8,
        resolution: 16,
        frames: 16,
        temporal_stride: 4,
        token_count: 2,
        token_dim: 16,
        heads: 2,
        head_hidden: 32,
        num_classes: task.num_classes(),
        ..ModelConfig::default()
    }
}

fn data(task: Task, n: usize, seed: u64) -> Dataset {
    gen_dataset(task, n, 16, 16, 16, seed).unwrap()
}

#[test]
fn splits_are_class_balanced() {
    for (task, n) in [(Task::Motion8, 800), (Task::FlashOrder, 400)] {
        let d = gen_dataset(task, n, 12, 8, 8, 3).unwrap();
        let mut counts = vec![0; task.num_classes()];
        d.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == 100), "{task:?} {counts:?}");
    }
    assert_eq!(HELD_OUT_OFFSET % 8, 0);
    assert_eq!(HELD_OUT_OFFSET % 4, 0);
}

#[test]
fn labels_rederive_from_pixels() {
    for task in [Task::Motion8, Task::FlashOrder] {
        for (t, hw) in [(12, 8), (16, 16), (24, 5)] {
            let d = gen_dataset_range(task, 1000, 64, t, hw, hw, 17).unwrap();
            for (c, &l) in d.clips.iter().zip(&d.labels) {
                assert_eq!(derive_label(task, c), Some(l), "{task:?} {t} {hw}");
                assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(c.shape(), &[3, t, hw, hw]);
            }
        }
    }
}

#[test]
fn clips_are_keyed_by_seed_and_index() {
    let a = gen_clip(Task::Motion8, 5, 8, 8, 8, 1).unwrap();
    let b = gen_clip(Task::Motion8, 5, 8, 8, 8, 1).unwrap();
    let c = gen_clip(Task::Motion8, 5, 8, 8, 8, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.pixels, c.pixels);
    let d = gen_dataset(Task::Motion8, 8, 8, 8, 8, 1).unwrap();
    assert_eq!(d.clips[5], a.pixels);
    let first = |seed| {
        gen_dataset(Task::FlashOrder, 1, 12, 8, 8, seed)
            .unwrap()
            .clips[0]
            .clone()
    };
    assert_ne!(first(0), first(1));
}

#[test]
fn too_small_clips_are_rejected() {
    assert!(gen_clip(Task::FlashOrder, 0, 11, 8, 8, 0).is_err());
    assert!(gen_clip(Task::Motion8, 0, 8, 3, 8, 0).is_err());
    assert!("kinetics".parse::<Task>().is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let cfg = tiny(Task::FlashOrder);
    let mut m = Model::<f32>::build(&cfg, 0).unwrap();
    let before = m.params().to_vec();
    let tc = TrainConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train(&mut m, &data(Task::FlashOrder, 16, 0), None, &tc, |_| {}).unwrap();
    for (a, b) in before.iter().zip(m.params()) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn memorises_a_single_clip() {
    let cfg = tiny(Task::Motion8);
    let mut m = Model::<f32>::build(&cfg, 1).unwrap();
    let one = data(Task::Motion8, 1, 4);
    let tc = TrainConfig {
        lr: 0.05,
        epochs: 60,
        batch_size: 1,
        cosine: false,
        ..TrainConfig::default()
    };
    let h = train(&mut m, &one, None, &tc, |_| {}).unwrap();
    let last = h.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    let (x, y) = one.batch::<f32>(&[0]);
    let (loss, _) = m.loss_and_grads(&x, &y).unwrap();
    assert!(loss < 0.01);
}

#[test]
fn identical_runs_have_identical_history() {
    let cfg = tiny(Task::FlashOrder);
    let d = data(Task::FlashOrder, 32, 2);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::<f32>::build(&cfg, 3).unwrap();
        let h = train(&mut m, &d, Some(&d), &tc, |_| {}).unwrap();
        (h, m.params().to_vec())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    assert!(h1.iter().all(|r| r.loss.is_finite() && r.top5 >= r.top1));
}

#[test]
fn constant_logits_score_exactly_chance() {
    let cfg = tiny(Task::Motion8);
    let mut m = Model::<f32>::build(&cfg, 0).unwrap();
    for name in ["head.fc2.weight", "head.fc2.bias"] {
        m.param_mut(name).unwrap().data_mut().fill(0.0);
    }
    let d = data(Task::Motion8, 64, 5);
    let a = evaluate(&m, &d, 16).unwrap();
    // Ties go to class 0, which holds one clip in eight.
    assert_eq!(a.top1, 0.125);
    assert_eq!(a.top5, 0.625);
    assert_eq!(a.n, 64);
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = tiny(Task::Motion8);
    let m = Model::<f32>::build(&cfg, 9).unwrap();
    let d = gen_dataset_range(Task::Motion8, HELD_OUT_OFFSET, 256, 16, 16, 16, 11).unwrap();
    let a = evaluate(&m, &d, 32).unwrap();
    assert!((a.top1 - 0.125).abs() <= 0.05, "top1 {}", a.top1);
}

#[test]
fn oracle_logits_score_perfectly() {
    let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 8).collect();
    let logits = Tensor::from_fn(vec![40, 8], |i| {
        if labels[i / 8] == i % 8 {
            1.0f64
        } else {
            0.0
        }
    });
    let a = topk_accuracy(&logits, &labels);
    assert_eq!((a.top1, a.top5), (1.0, 1.0));
    let worst = Tensor::from_fn(vec![40, 8], |i| {
        if labels[i / 8] == i % 8 {
            -1.0f64
        } else {
            0.0
        }
    });
    assert_eq!(topk_accuracy(&worst, &labels).top5, 0.0);
}

#[test]
fn evaluation_ignores_order_and_batch_size() {
    let cfg = tiny(Task::FlashOrder);
    let m = Model::<f32>::build(&cfg, 2).unwrap();
    let d = data(Task::FlashOrder, 24, 6);
    let a = evaluate(&m, &d, 8).unwrap();
    let mut rev = d.clone();
    rev.clips.reverse();
    rev.labels.reverse();
    assert_eq!(evaluate(&m, &rev, 8).unwrap(), a);
    let b = evaluate(&m, &d, 5).unwrap();
    assert!((a.top1 - b.top1).abs() < 1e-12 && (a.top5 - b.top5).abs() < 1e-12);
}

#[test]
fn class_mismatch_is_rejected() {
    let m = Model::<f32>::build(&tiny(Task::Motion8), 0).unwrap();
    let d = data(Task::FlashOrder, 4, 0);
    assert!(evaluate(&m, &d, 4).is_err());
    let e = Experiment::new(Task::FlashOrder);
    assert!(e.run(&tiny(Task::Motion8), 0, |_| {}).is_err());
    assert_eq!(e.fit_config(&tiny(Task::Motion8)).num_classes, 4);
}

#[test]
fn experiment_splits_do_not_overlap() {
    let mut e = Experiment::new(Task::Motion8);
    e.train_size = 8;
    e.eval_size = 8;
    let cfg = tiny(Task::Motion8);
    let (tr, ev) = (
        e.train_split(&cfg).unwrap(),
        e.held_out_split(&cfg).unwrap(),
    );
    assert!(tr.clips.iter().all(|c| !ev.clips.contains(c)));
    assert_eq!(tr.labels, ev.labels);
}

#[test]
fn gradcheck_infinite_tolerance_passes_and_freezing_excludes() {
    let cfg = gradcheck_config();
    let r = gradcheck(&cfg, f64::INFINITY, &[], 0, 1).unwrap();
    assert!(r.pass());
    assert_eq!(r.groups.len(), ParamGroup::ALL.len());
    let frozen = [ParamGroup::Former, ParamGroup::Tokens, ParamGroup::Stem];
    let r = gradcheck(&cfg, f64::INFINITY, &frozen, 0, 1).unwrap();
    assert!(r.groups.iter().all(|g| !frozen.contains(&g.group)));
    assert_eq!(r.groups.len(), ParamGroup::ALL.len() - frozen.len());
    // An impossible tolerance fails and names the culprit.
    let e = gradcheck(&cfg, -1.0, &[], 0, 1)
        .unwrap()
        .into_result()
        .unwrap_err();
    assert!(e.to_string().contains("rel error"));
    assert_eq!(ParamGroup::parse("bridges"), Some(ParamGroup::Bridges));
    assert_eq!(ParamGroup::parse("tokenz"), None);
}

#[test]
fn token_gradient_depends_on_the_former() {
    let cfg = tiny(Task::FlashOrder);
    let d = data(Task::FlashOrder, 8, 7);
    let (x, y) = d.batch::<f64>(&(0..8).collect::<Vec<_>>());
    let m = Model::<f64>::build(&cfg, 4).unwrap();
    let (_, grads) = m.loss_and_grads(&x, &y).unwrap();
    let i = m.param_info().iter().position(|p| p.is_tokens()).unwrap();
    let norm: f64 = grads[i].data().iter().map(|v| v * v).sum();
    assert!(norm > 0.0);

    let off = ModelConfig {
        former_enabled: false,
        ..cfg
    };
    let m = Model::<f64>::build(&off, 4).unwrap();
    assert!(m.param_info().iter().all(|p| !p.is_tokens()));
    let (loss, grads) = m.loss_and_grads(&x, &y).unwrap();
    assert!(loss.is_finite());
    assert_eq!(grads.len(), m.params().len());
}

#[test]
fn dataset_cache_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen_dataset(Task::FlashOrder, 6, 12, 6, 6, 9).unwrap();
    let path = dir.path().join("cache.vmf");
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
    assert!(Dataset::load(dir.path().join("missing.vmf")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top5_never_below_top1(n in 1usize..20, k in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(vec![n, k], |_| rng.random_range(-2i32..3) as f64);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let a = topk_accuracy(&logits, &labels);
        prop_assert!(a.top5 >= a.top1);
        if k <= 5 {
            prop_assert_eq!(a.top5, 1.0);
        }
    }
}
