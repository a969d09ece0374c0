use eva_core::ag::{self, finite_diff_check, Graph, ParamStore, Tensor};
use eva_core::alignment::*;
use eva_core::trainer::Adam;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(rng: &mut ChaCha8Rng) -> CompositionTable {
    let ns = rng.random_range(1..=6);
    let no = rng.random_range(1..=6);
    let mut all: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..no).map(move |o| (s, o))).collect();
    all.shuffle(rng);
    all.truncate(rng.random_range(1..=ns * no));
    CompositionTable::new(all, ns, no).unwrap()
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| ag::l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Exhaustive loop over the table for one primitive family.
fn oracle(logits: &[f64], t: &CompositionTable, temp: f64, mode: ScoreMode, state: bool) -> Vec<f64> {
    let n = if state { t.n_states } else { t.n_objects };
    let probs = ag::softmax(logits);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut best: Option<f64> = None;
        for c in 0..t.len() {
            let owner = if state { t.pairs[c].0 } else { t.pairs[c].1 };
            if owner == k {
                let v = if mode == ScoreMode::Literal { probs[c] } else { logits[c] };
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        out.push(match (mode, best) {
            (ScoreMode::Literal, Some(b)) => b * temp,
            (ScoreMode::Literal, None) => 0.0,
            (ScoreMode::Renormalized, Some(b)) => b * temp,
            (ScoreMode::Renormalized, None) => f64::NEG_INFINITY,
        });
    }
    if mode == ScoreMode::Renormalized {
        out = ag::softmax(&out);
    }
    out
}

#[test]
fn t2i_scores_match_exhaustive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let t = random_table(&mut rng);
        let logits: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-50.0..50.0)).collect();
        let temp = rng.random_range(0.1..5.0);
        for mode in [ScoreMode::Literal, ScoreMode::Renormalized] {
            assert_eq!(t2i_state_scores(&logits, &t, temp, mode), oracle(&logits, &t, temp, mode, true));
            assert_eq!(t2i_object_scores(&logits, &t, temp, mode), oracle(&logits, &t, temp, mode, false));
        }
        let rn = t2i_state_scores(&logits, &t, temp, ScoreMode::Renormalized);
        assert!((rn.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn affinities_match_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let v = unit_rows(5, 6, &mut rng);
        let ts = unit_rows(1, 6, &mut rng);
        let to = unit_rows(1, 6, &mut rng);
        let f = unit_rows(1, 6, &mut rng);
        let alpha = rng.random_range(0.0..2.0);
        let b = variant_affinities(&v, ts.row(0), to.row(0), f.row(0), alpha);
        for i in 0..5 {
            let mut s = 0.0;
            let mut vv = 0.0;
            for k in 0..6 {
                s += v.row(i)[k] * ts.row(0)[k];
                vv += v.row(i)[k] * f.row(0)[k];
            }
            assert!((b.state[i] - s).abs() < 1e-15);
            assert!((b.global[i] - vv).abs() < 1e-15);
            assert_eq!(b.overall_state[i], b.state[i] + alpha * b.global[i]);
            assert_eq!(b.overall_object[i], b.object[i] + alpha * b.global[i]);
        }
        let (fs, _) = select_variants(&b, &v);
        assert_eq!(fs, v.row(ag::argmax(&b.overall_state)));
    }
}

#[test]
fn selection_examples() {
    let v = Tensor::from_rows(&[vec![0.1, 0.0], vec![0.9, 0.0], vec![0.3, 0.0]]).unwrap();
    let b = variant_affinities(&v, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.5);
    assert_eq!(b.overall_state, vec![0.1, 0.9, 0.3]);
    assert_eq!(select_variants(&b, &v).0, vec![0.9, 0.0]);
    // a variant equal to t_s has unit state affinity
    let u = unit_rows(3, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let b = variant_affinities(&u, u.row(2), u.row(0), u.row(1), 0.0);
    assert!((b.state[2] - 1.0).abs() < 1e-15);
    assert_eq!(b.overall_state, b.state);
}

#[test]
fn graph_losses_match_value_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = CompositionTable::new(vec![(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)], 3, 3).unwrap();
    let img = unit_rows(4, 5, &mut rng);
    let txt = unit_rows(t.len(), 5, &mut rng);
    let labels = [(0, 2), (1, 1), (2, 0), (0, 0)];
    let tau = 0.05;
    let temp = 1.7;
    for mode in [ScoreMode::Literal, ScoreMode::Renormalized] {
        let mut g = Graph::<f64>::new();
        let (iv, tv) = (g.input(img.clone()), g.input(txt.clone()));
        let logits = logits_graph(&mut g, iv, tv, tau).unwrap();
        let tp = g.input(Tensor::vector(vec![temp]));
        let states: Vec<usize> = labels.iter().map(|l| l.0).collect();
        let ls = t2i_loss_graph(&mut g, logits, &t.state_groups(), tp, &states, mode).unwrap();
        let rows: Vec<Vec<f64>> = img.rows().map(|r| composition_logits(r, &txt, tau)).collect();
        for (a, b) in g.value(logits).rows().zip(&rows) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| t2i_state_scores(r, &t, temp, mode)).collect();
        let want = mean_neg_log(&scores, &states).unwrap();
        assert!((g.value(ls).item() - want).abs() < 1e-12, "{mode:?}");
    }

    // image-to-text: 3 variants per image
    let nv = 3;
    let variants = unit_rows(4 * nv, 5, &mut rng);
    let st = unit_rows(3, 5, &mut rng);
    let ot = unit_rows(3, 5, &mut rng);
    let mut g = Graph::<f64>::new();
    let vv = g.input(variants.clone());
    let gv = g.input(img.clone());
    let sv = g.input(st.clone());
    let ov = g.input(ot.clone());
    let (lsv, lov) = i2t_loss_graph(&mut g, vv, nv, gv, sv, ov, &labels, 0.5, tau).unwrap();
    let mut fs = Vec::new();
    let mut fo = Vec::new();
    for (b, &(s, o)) in labels.iter().enumerate() {
        let block = Tensor::from_rows(&(0..nv).map(|i| variants.row(b * nv + i).to_vec()).collect::<Vec<_>>()).unwrap();
        let bundle = variant_affinities(&block, st.row(s), ot.row(o), img.row(b), 0.5);
        let (a, c) = select_variants(&bundle, &block);
        fs.push(a);
        fo.push(c);
    }
    let (ws, wo) = loss_i2t(&fs, &fo, &st, &ot, &labels, tau).unwrap();
    assert!((g.value(lsv).item() - ws).abs() < 1e-12);
    assert!((g.value(lov).item() - wo).abs() < 1e-12);
}

#[test]
fn uniform_primitive_losses_are_log_counts() {
    let st = Tensor::from_rows(&vec![vec![1.0, 0.0]; 5]).unwrap();
    let ot = Tensor::from_rows(&vec![vec![0.0, 1.0]; 3]).unwrap();
    let f = vec![vec![0.6, 0.8], vec![-0.8, 0.6]];
    let (ls, lo) = loss_i2t(&f, &f, &st, &ot, &[(1, 2), (4, 0)], 0.01).unwrap();
    assert!((ls - 5f64.ln()).abs() < 1e-12 && (lo - 3f64.ln()).abs() < 1e-12);
    let (ls, lo) = loss_t2i(&[vec![0.25; 4]], &[vec![1.0, 0.0]], &[(3, 0)]).unwrap();
    assert!((ls - 4f64.ln()).abs() < 1e-15);
    assert_eq!(lo, 0.0);
}

#[test]
fn composite_alignment_loss_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = CompositionTable::new(vec![(0, 0), (0, 1), (1, 1), (2, 0)], 3, 2).unwrap();
    let rand_t = |n: usize, rng: &mut ChaCha8Rng| {
        Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    };
    let mut store = ParamStore::<f64>::new();
    let img = store.add("img", rand_t(3, &mut rng), true).unwrap();
    let var = store.add("var", rand_t(6, &mut rng), true).unwrap();
    let txt = store.add("txt", rand_t(4, &mut rng), true).unwrap();
    let sts = store.add("st", rand_t(3, &mut rng), true).unwrap();
    let obs = store.add("ob", rand_t(2, &mut rng), true).unwrap();
    let temp = store.add("temp", Tensor::vector(vec![0.3]), true).unwrap();
    let labels = [(0, 1), (2, 0), (1, 1)];
    let comp = [1usize, 3, 2];
    for mode in [ScoreMode::Renormalized, ScoreMode::Literal] {
        let report = finite_diff_check(
            &store,
            |g, s| {
                let unit = |g: &mut Graph<f64>, id| {
                    let p = g.param(s, id);
                    g.l2_normalize(p)
                };
                let (iv, vv, tv, sv, ov) = (unit(g, img), unit(g, var), unit(g, txt), unit(g, sts), unit(g, obs));
                let tr = g.param(s, temp);
                let tp = g.softplus(tr);
                let logits = logits_graph(g, iv, tv, 0.5)?;
                let lc = g.cross_entropy(logits, &comp)?;
                let states: Vec<usize> = labels.iter().map(|l| l.0).collect();
                let objects: Vec<usize> = labels.iter().map(|l| l.1).collect();
                let ls = t2i_loss_graph(g, logits, &t.state_groups(), tp, &states, mode)?;
                let lo = t2i_loss_graph(g, logits, &t.object_groups(), tp, &objects, mode)?;
                let (lsv, lov) = i2t_loss_graph(g, vv, 2, iv, sv, ov, &labels, 0.5, 0.5)?;
                let a = g.add(lc, ls)?;
                let b = g.add(lo, lsv)?;
                let c = g.add(a, b)?;
                g.add(c, lov)
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{mode:?}: {report:?}");
    }
}

#[test]
fn temperatures_stay_positive_under_pressure() {
    // a loss that keeps pushing τ_s toward zero
    let mut store = ParamStore::<f64>::new();
    let raw = store.add("temp.state", Tensor::vector(vec![(1f64.exp() - 1.0).ln()]), true).unwrap();
    let mut opt = Adam::new(0.5, 0.0);
    for _ in 0..2000 {
        let mut g = Graph::new();
        let r = g.param(&store, raw);
        let t = g.softplus(r);
        let l = g.sum(t);
        let grads = g.backward(l, &store).unwrap();
        opt.step(&mut store, &grads).unwrap();
        let v = store.get(raw).item();
        assert!(v.exp().ln_1p() > 0.0, "raw {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composition_probs_are_distributions_and_shift_invariant(
        seed in 0u64..10_000,
        n in 1usize..12,
        shift in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let txt = unit_rows(n, 4, &mut rng);
        let img = unit_rows(1, 4, &mut rng);
        let p = composition_probs(img.row(0), &txt, 0.01).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        let logits = composition_logits(img.row(0), &txt, 0.01);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let q = ag::softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_ignores_positive_rescaling(seed in 0u64..10_000, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit_rows(6, 5, &mut rng);
        let u = unit_rows(3, 5, &mut rng);
        let b = variant_affinities(&v, u.row(0), u.row(1), u.row(2), 0.5);
        let scaled: Vec<f64> = b.overall_state.iter().map(|x| x * k).collect();
        prop_assert_eq!(ag::argmax(&scaled), b.selected_state);
    }

    #[test]
    fn renormalized_scaling_preserves_argmax(seed in 0u64..10_000, temp in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng);
        let logits: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = t2i_object_scores(&logits, &t, 1.0, ScoreMode::Renormalized);
        let b = t2i_object_scores(&logits, &t, temp, ScoreMode::Renormalized);
        prop_assert_eq!(ag::argmax(&a), ag::argmax(&b));
    }
}
