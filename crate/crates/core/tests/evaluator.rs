use eva_core::ag::{self, Tensor};
use eva_core::alignment::CompositionTable;
use eva_core::dataset::{generate, LabelSpace, Phase, SplitSpec, WorldMode};
use eva_core::encoders::EncoderConfig;
use eva_core::evaluator::*;
use eva_core::model::{EvaModel, ModelConfig};
use eva_core::moe::MoeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    scores: Vec<Vec<f64>>,
    truths: Vec<Truth>,
    unseen_cols: Vec<bool>,
}

/// Scores on a 1/64 lattice so the dense grid can resolve every gap.
fn fixture(rng: &mut ChaCha8Rng, quantized: bool) -> Fixture {
    let cols = rng.random_range(2..12);
    let mut unseen_cols: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.4)).collect();
    unseen_cols[0] = false;
    unseen_cols[1] = true;
    let seen_ix: Vec<usize> = (0..cols).filter(|&c| !unseen_cols[c]).collect();
    let unseen_ix: Vec<usize> = (0..cols).filter(|&c| unseen_cols[c]).collect();
    let n = rng.random_range(2..40);
    let mut scores = Vec::new();
    let mut truths = Vec::new();
    for i in 0..n {
        let row = (0..cols)
            .map(|_| {
                if quantized {
                    rng.random_range(0..=64) as f64 / 64.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        scores.push(row);
        // at least one image of each kind
        let unseen = if i < 2 { i == 1 } else { rng.random_bool(0.5) };
        let pool = if unseen { &unseen_ix } else { &seen_ix };
        truths.push(Truth::at(pool[rng.random_range(0..pool.len())], &unseen_cols));
    }
    Fixture {
        scores,
        truths,
        unseen_cols,
    }
}

#[test]
fn sweep_matches_dense_bias_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let f = fixture(&mut rng, true);
        let sweep = calibration_sweep(&f.scores, &f.truths, &f.unseen_cols).unwrap();
        let grid: Vec<CurvePoint> = (0..10_000)
            .map(|i| accuracy_at(&f.scores, &f.truths, &f.unseen_cols, -1.5 + 3.0 * i as f64 / 9_999.0))
            .collect();
        let best = |pick: fn(&CurvePoint) -> f64| grid.iter().map(pick).fold(0.0, f64::max);
        assert!((curve_auc(&grid) - sweep.auc).abs() < 1e-6, "{} vs {}", curve_auc(&grid), sweep.auc);
        assert!((best(|p| p.seen) - sweep.best_seen).abs() < 1e-6);
        assert!((best(|p| p.unseen) - sweep.best_unseen).abs() < 1e-6);
        let hm = best(|p| if p.seen + p.unseen > 0.0 { 2.0 * p.seen * p.unseen / (p.seen + p.unseen) } else { 0.0 });
        assert!((hm - sweep.best_hm).abs() < 1e-6);
    }
}

#[test]
fn sweep_points_equal_direct_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let f = fixture(&mut rng, false);
        let sweep = calibration_sweep(&f.scores, &f.truths, &f.unseen_cols).unwrap();
        for p in &sweep.curve {
            assert_eq!(*p, accuracy_at(&f.scores, &f.truths, &f.unseen_cols, p.bias));
        }
        // monotone trade-off
        for w in sweep.curve.windows(2) {
            assert!(w[0].bias < w[1].bias);
            assert!(w[1].unseen >= w[0].unseen && w[1].seen <= w[0].seen);
        }
        assert_eq!(sweep.curve.first().unwrap().bias, f64::NEG_INFINITY);
        assert_eq!(sweep.curve.last().unwrap().bias, f64::INFINITY);
    }
}

#[test]
fn biased_argmax_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let f = fixture(&mut rng, false);
        let bias = rng.random_range(-1.0..1.0);
        let p = accuracy_at(&f.scores, &f.truths, &f.unseen_cols, bias);
        let (mut rs, mut ns, mut ru, mut nu) = (0.0, 0.0, 0.0, 0.0);
        for (row, t) in f.scores.iter().zip(&f.truths) {
            let shifted: Vec<f64> = row
                .iter()
                .zip(&f.unseen_cols)
                .map(|(&s, &u)| if u { s + bias } else { s })
                .collect();
            let hit = f64::from(Some(ag::argmax(&shifted)) == t.column);
            if t.unseen {
                nu += 1.0;
                ru += hit;
            } else {
                ns += 1.0;
                rs += hit;
            }
        }
        assert_eq!((p.seen, p.unseen), (rs / ns, ru / nu));
    }
}

#[test]
fn perfect_scores_reach_the_corner() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut f = fixture(&mut rng, false);
    for (row, t) in f.scores.iter_mut().zip(&f.truths) {
        row.fill(0.0);
        row[t.column.unwrap()] = 1.0;
    }
    let s = calibration_sweep(&f.scores, &f.truths, &f.unseen_cols).unwrap();
    assert_eq!((s.best_seen, s.best_unseen, s.best_hm, s.auc), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn random_scores_have_tiny_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cols = 60;
    let unseen_cols: Vec<bool> = (0..cols).map(|c| c >= 40).collect();
    let truths: Vec<Truth> = (0..2000).map(|_| Truth::at(rng.random_range(0..cols), &unseen_cols)).collect();
    let scores: Vec<Vec<f64>> = (0..2000).map(|_| (0..cols).map(|_| rng.random()).collect()).collect();
    let s = calibration_sweep(&scores, &truths, &unseen_cols).unwrap();
    assert!(s.auc < 0.05, "{}", s.auc);
}

#[test]
fn empty_subsets_are_errors() {
    let cols = [false, true];
    let scores = vec![vec![0.1, 0.2]];
    assert!(calibration_sweep(&scores, &[Truth::at(0, &cols)], &cols).is_err());
    assert!(calibration_sweep(&scores, &[Truth::at(1, &cols)], &cols).is_err());
}

#[test]
fn beta_zero_uses_composition_scores_only() {
    let t = CompositionTable::new(vec![(0, 0), (0, 1), (1, 0), (1, 1)], 2, 2).unwrap();
    let pc = [0.1, 0.4, 0.3, 0.2];
    let a = combine_scores(&pc, &[0.9, 0.1], &[0.2, 0.8], &t, 0.0);
    assert_eq!(a, pc);
    // a constant added to every primitive score never changes the ranking
    let b = combine_scores(&pc, &[0.9, 0.1], &[0.2, 0.8], &t, 0.7);
    let c = combine_scores(&pc, &[1.9, 1.1], &[0.2, 0.8], &t, 0.7);
    assert_eq!(ranking(&b, 4), ranking(&c, 4));
    assert!((b[1] - (0.4 + 0.7 * (0.9 + 0.8))).abs() < 1e-15);
}

#[test]
fn feasibility_keeps_within_cluster_pairs() {
    let seen = vec![(0, 0), (1, 1), (2, 2), (3, 3)];
    let labels = LabelSpace::new(4, 4, seen, vec![], vec![]).unwrap();
    let clusters = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    let kept = feasibility_filter(&labels, &clusters, &clusters, 0.5).unwrap();
    let mut want = vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)];
    want.sort();
    assert_eq!(kept.pairs, want);
    assert_eq!(feasibility_filter(&labels, &clusters, &clusters, -1.0).unwrap().len(), 16);
    // seen pairs survive even an unreachable threshold
    assert_eq!(feasibility_filter(&labels, &clusters, &clusters, 1.0).unwrap().len(), 8);
    assert!(feasibility_filter(&labels, &clusters, &clusters, 1.5).is_err());
}

fn tiny() -> (ModelConfig, SplitSpec) {
    let spec = SplitSpec {
        n_states: 3,
        n_objects: 4,
        train_pairs: 6,
        val_seen_pairs: 4,
        val_unseen_pairs: 3,
        test_seen_pairs: 4,
        test_unseen_pairs: 3,
        images_per_pair: 2,
        eval_images_per_pair: 2,
        patches: 4,
        patch_dim: 6,
        noise: 0.3,
        seed: 2,
    };
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            depth: 1,
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
        ..ModelConfig::default()
    };
    (cfg, spec)
}

#[test]
fn evaluation_is_pure_and_consistent() {
    let (cfg, spec) = tiny();
    let ds = generate(&spec).unwrap();
    let model = EvaModel::<f64>::new(cfg).unwrap();
    let before = model.store.clone();
    let ec = EvalConfig::default();
    let a = evaluate(&model, &ds, Phase::Test, WorldMode::Closed, &ec).unwrap();
    let b = evaluate(&model, &ds, Phase::Test, WorldMode::Closed, &ec).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.store, before);
    assert_eq!(a.target_size, 9);
    assert_eq!(a.predictions.len(), 4 * 2 + 3 * 2);
    for p in &a.predictions {
        assert_eq!(p.top.len(), 3);
        assert!(p.top.windows(2).all(|w| w[0].1 >= w[1].1));
    }
    let open = evaluate(&model, &ds, Phase::Test, WorldMode::Open, &ec).unwrap();
    assert_eq!(open.target_size, 12);
    let filtered = EvalConfig {
        feasibility_threshold: 0.99,
        ..ec.clone()
    };
    let f = evaluate(&model, &ds, Phase::Test, WorldMode::Open, &filtered).unwrap();
    assert!(f.target_size >= 6 && f.target_size <= 12);
}

#[test]
fn mismatched_model_is_rejected() {
    let (mut cfg, spec) = tiny();
    cfg.n_objects = 5;
    let ds = generate(&spec).unwrap();
    let model = EvaModel::<f64>::new(cfg).unwrap();
    assert!(evaluate(&model, &ds, Phase::Val, WorldMode::Closed, &EvalConfig::default()).is_err());
}
