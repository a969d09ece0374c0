use eva_core::ag::Graph;
use eva_core::checkpoint::Checkpoint;
use eva_core::dataset::{generate, Dataset, Phase, Split, SplitSpec, WorldMode};
use eva_core::encoders::EncoderConfig;
use eva_core::evaluator::{evaluate, EvalConfig};
use eva_core::model::{EvaModel, ModelConfig};
use eva_core::moe::MoeConfig;
use eva_core::trainer::{total_loss, train, TrainConfig};

fn data() -> Dataset {
    generate(&SplitSpec {
        n_states: 3,
        n_objects: 4,
        train_pairs: 6,
        val_seen_pairs: 4,
        val_unseen_pairs: 3,
        test_seen_pairs: 4,
        test_unseen_pairs: 3,
        images_per_pair: 6,
        eval_images_per_pair: 3,
        patches: 4,
        patch_dim: 6,
        noise: 0.3,
        seed: 4,
    })
    .unwrap()
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 2,
            width: 16,
            heads: 2,
            joint_width: 8,
            image_tokens: 5,
            patch_dim: 6,
            prefix_len: 2,
            ffn_mult: 2,
        },
        moe: MoeConfig {
            shared: 1,
            routed: 4,
            top_k: 2,
            rank: 4,
        },
        n_states: 3,
        n_objects: 4,
        seed: 1,
        ..ModelConfig::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        epochs: 3,
        batch_size: 12,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn breakdown(cfg: &TrainConfig, pairs_from: Split) -> eva_core::trainer::LossBreakdown {
    let ds = data();
    let mut m = EvaModel::<f64>::new(model_cfg()).unwrap();
    // nonzero adapters so variants differ
    let ids: Vec<_> = m.store.ids().filter(|&id| m.store.name(id).ends_with(".b")).collect();
    for id in ids {
        for (k, v) in m.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.05 * ((k % 7) as f64 - 3.0);
        }
    }
    let batch: Vec<_> = ds.split(pairs_from).into_iter().take(8).collect();
    let mut g = Graph::new();
    let x = g.input(ds.batch_tokens::<f64>(&batch));
    let pairs: Vec<_> = batch.iter().map(|s| (s.state, s.object)).collect();
    total_loss(&mut g, &m, &ds.labels, x, &pairs, cfg).unwrap().1
}

#[test]
fn zero_lambdas_reduce_to_composition_loss() {
    let b = breakdown(
        &TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..train_cfg()
        },
        Split::Train,
    );
    assert_eq!(b.total, b.l_c);
    assert_eq!((b.l_s, b.l_o, b.l_sv, b.l_ov), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn total_is_the_weighted_sum() {
    let cfg = train_cfg();
    let b = breakdown(&cfg, Split::Train);
    assert!(b.l_s > 0.0 && b.l_sv > 0.0);
    let want = b.l_c + cfg.lambda1 * (b.l_s + b.l_o) + cfg.lambda2 * (b.l_sv + b.l_ov);
    assert!((b.total - want).abs() < 1e-12);
    assert!((b.weighted(cfg.lambda1, cfg.lambda2) - want).abs() < 1e-12);
}

#[test]
fn unseen_labels_are_rejected() {
    let ds = data();
    let m = EvaModel::<f64>::new(model_cfg()).unwrap();
    let batch = ds.split(Split::ValUnseen);
    let mut g = Graph::new();
    let x = g.input(ds.batch_tokens::<f64>(&batch[..2]));
    let pairs: Vec<_> = batch[..2].iter().map(|s| (s.state, s.object)).collect();
    let err = total_loss(&mut g, &m, &ds.labels, x, &pairs, &train_cfg()).unwrap_err();
    assert!(err.to_string().contains("not a seen composition"));
}

#[test]
fn zero_epochs_leave_the_model_at_init() {
    let ds = data();
    let mut m = EvaModel::<f64>::new(model_cfg()).unwrap();
    let init = m.store.clone();
    let out = train(&mut m, &ds, &TrainConfig { epochs: 0, ..train_cfg() }, |_| {}).unwrap();
    assert_eq!((out.best_epoch, out.steps), (0, 0));
    assert_eq!(m.store, init);
}

#[test]
fn training_is_deterministic_and_spares_the_base() {
    let ds = data();
    let run = || {
        let mut m = EvaModel::<f64>::new(model_cfg()).unwrap();
        let out = train(&mut m, &ds, &train_cfg(), |_| {}).unwrap();
        (m, out)
    };
    let (a, oa) = run();
    let (b, ob) = run();
    assert_eq!(a.store, b.store);
    assert_eq!(oa, ob);

    let init = EvaModel::<f64>::new(model_cfg()).unwrap();
    let mut moved = 0;
    for id in init.store.ids() {
        let name = init.store.name(id);
        let same = init.store.get(id) == a.store.get(id);
        if EvaModel::<f64>::is_base_param(name) {
            assert!(same, "{name} changed");
            assert!(!a.store.is_trainable(id));
        } else if !same {
            moved += 1;
        }
    }
    assert!(moved > 0);
    for l in &oa.logs {
        assert!(l.val_auc.is_some());
    }
    assert!(oa.best_epoch >= 1 && oa.best_epoch <= 3);
}

#[test]
fn composition_loss_falls_in_early_epochs() {
    let ds = data();
    let mut m = EvaModel::<f64>::new(model_cfg()).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        select_best: false,
        ..train_cfg()
    };
    let out = train(&mut m, &ds, &cfg, |_| {}).unwrap();
    let lc: Vec<f64> = out.logs.iter().map(|l| l.loss.l_c).collect();
    assert!(lc.windows(2).all(|w| w[1] < w[0]), "{lc:?}");
}

#[test]
fn max_steps_stops_early() {
    let ds = data();
    let mut m = EvaModel::<f64>::new(model_cfg()).unwrap();
    let out = train(
        &mut m,
        &ds,
        &TrainConfig {
            max_steps: Some(4),
            ..train_cfg()
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.logs.len(), 2);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let ds = data();
    let mut m = EvaModel::<f64>::new(model_cfg()).unwrap();
    let out = train(&mut m, &ds, &train_cfg(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    Checkpoint::from_model(&m, out.best_epoch as u64).unwrap().save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.epoch, out.best_epoch as u64);
    let restored = back.to_model::<f64>().unwrap();
    assert_eq!(restored.store, m.store);
    let ec = EvalConfig::default();
    for mode in [WorldMode::Closed, WorldMode::Open] {
        let a = evaluate(&m, &ds, Phase::Test, mode, &ec).unwrap();
        let b = evaluate(&restored, &ds, Phase::Test, mode, &ec).unwrap();
        assert_eq!(a, b);
    }
    let closed = evaluate(&m, &ds, Phase::Test, WorldMode::Closed, &ec).unwrap();
    let open = evaluate(&m, &ds, Phase::Test, WorldMode::Open, &ec).unwrap();
    assert!(open.auc <= closed.auc + 1e-12, "{} > {}", open.auc, closed.auc);
}

#[test]
fn restoring_into_a_different_shape_fails() {
    let m = EvaModel::<f64>::new(model_cfg()).unwrap();
    let ck = Checkpoint::from_model(&m, 0).unwrap();
    let mut other = EvaModel::<f64>::new(ModelConfig {
        moe: MoeConfig {
            rank: 2,
            ..model_cfg().moe
        },
        ..model_cfg()
    })
    .unwrap();
    assert!(ck.restore_into(&mut other).is_err());
}
