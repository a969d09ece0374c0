use eva_core::ag::{Graph, Tensor};
use eva_core::encoders::{EncoderConfig, PromptKind};
use eva_core::model::{EvaModel, ModelConfig};
use eva_core::moe::MoeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> ModelConfig {
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
        seed: 5,
        ..ModelConfig::default()
    }
}

fn patches(batch: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, d) = (cfg.encoder.image_tokens - 1, cfg.encoder.patch_dim);
    Tensor::new(vec![batch, p, d], (0..batch * p * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize_adapters(m: &mut EvaModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.store.ids().filter(|&id| m.store.name(id).contains(".moe.")).collect();
    for id in ids {
        for v in m.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn row_norms(t: &Tensor<f64>) -> Vec<f64> {
    t.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

#[test]
fn zero_b_image_encoder_equals_frozen_base() {
    let cfg = micro();
    let m = EvaModel::<f64>::new(cfg.clone()).unwrap();
    let x = patches(3, &cfg, 1);
    let mut g = Graph::inference();
    let xv = g.input(x);
    let with = m.image.encode(&mut g, &m.store, xv, true, true).unwrap();
    let base = m.image.encode(&mut g, &m.store, xv, false, false).unwrap();
    assert_eq!(g.value(with.global), g.value(base.global));
    // every variant collapses to the base feature too
    let v = g.value(with.variants.unwrap()).clone();
    let gl = g.value(base.global).clone();
    let n = with.n_variants;
    for (i, row) in v.rows().enumerate() {
        assert_eq!(row, gl.row(i / n));
    }
}

#[test]
fn zero_b_text_encoder_equals_frozen_base() {
    let m = EvaModel::<f64>::new(micro()).unwrap();
    let items = [(0, 1), (2, 3)];
    let mut g = Graph::inference();
    let (tok, len) = m
        .text
        .build_prompts(&mut g, &m.store, &m.prompts, PromptKind::Composition, &items)
        .unwrap();
    let (a, _) = m.text.encode(&mut g, &m.store, tok, 2, len, true).unwrap();
    let (b, _) = m.text.encode(&mut g, &m.store, tok, 2, len, false).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn outputs_are_deterministic_unit_vectors() {
    let cfg = micro();
    let mut m = EvaModel::<f64>::new(cfg.clone()).unwrap();
    randomize_adapters(&mut m, 3);
    let run = || {
        let mut g = Graph::inference();
        let x = g.input(patches(4, &cfg, 2));
        let f = m.image_features(&mut g, x, true).unwrap();
        (g.value(f.global).clone(), g.value(f.variants.unwrap()).clone())
    };
    let (g1, v1) = run();
    let (g2, v2) = run();
    assert_eq!((&g1, &v1), (&g2, &v2));
    assert_eq!(v1.shape(), &[4 * 5, 8]);
    for n in row_norms(&g1).into_iter().chain(row_norms(&v1)) {
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn random_experts_give_distinct_variants() {
    let cfg = micro();
    let mut m = EvaModel::<f64>::new(cfg.clone()).unwrap();
    randomize_adapters(&mut m, 4);
    let mut g = Graph::inference();
    let x = g.input(patches(1, &cfg, 6));
    let f = m.image_features(&mut g, x, true).unwrap();
    let v = g.value(f.variants.unwrap());
    let rows: Vec<&[f64]> = v.rows().collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = eva_core::ag::dot(rows[i], rows[j]);
            assert!(c < 1.0 - 1e-9, "variants {i} and {j} coincide");
        }
    }
}

#[test]
fn identical_experts_give_identical_variants() {
    let cfg = micro();
    let mut m = EvaModel::<f64>::new(cfg.clone()).unwrap();
    randomize_adapters(&mut m, 5);
    // copy shared expert 0 into every routed expert of the last image layer
    let prefix = format!("image.blocks.{}.moe", cfg.encoder.depth - 1);
    for part in ["a", "b"] {
        let src = m.store.get(m.store.id(&format!("{prefix}.shared0.{part}")).unwrap()).clone();
        for i in 1..=cfg.moe.routed {
            let id = m.store.id(&format!("{prefix}.expert{i}.{part}")).unwrap();
            *m.store.get_mut(id) = src.clone();
        }
    }
    let mut g = Graph::inference();
    let x = g.input(patches(2, &cfg, 7));
    let f = m.image_features(&mut g, x, true).unwrap();
    let v = g.value(f.variants.unwrap());
    for (i, row) in v.rows().enumerate() {
        assert_eq!(row, v.row(i - i % f.n_variants));
    }
}

#[test]
fn text_features_separate_compositions() {
    let m = EvaModel::<f64>::new(micro()).unwrap();
    let mut g = Graph::inference();
    let t = m.composition_text(&mut g, &[(0, 1), (0, 2), (0, 1)]).unwrap();
    let t = g.value(t);
    assert_eq!(t.row(0), t.row(2));
    assert!(eva_core::ag::dot(t.row(0), t.row(1)) < 1.0 - 1e-9);
    for n in row_norms(t) {
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = micro();
    let m = EvaModel::<f64>::new(cfg.clone()).unwrap();
    let mut g = Graph::inference();
    assert!(m.composition_text(&mut g, &[(3, 0)]).is_err());
    assert!(m.text_features(&mut g, PromptKind::Object, &[(0, 4)]).is_err());
    let wrong = g.input(Tensor::zeros(vec![1, 3, cfg.encoder.patch_dim]));
    let err = m.image_features(&mut g, wrong, false).unwrap_err().to_string();
    assert!(err.contains("encode_image"), "{err}");
}

#[test]
fn config_invariants() {
    let mut c = EncoderConfig::default();
    assert!(c.validate().is_ok());
    c.heads = 5;
    assert!(c.validate().is_err());
    let c = EncoderConfig {
        joint_width: 128,
        ..EncoderConfig::default()
    };
    assert!(c.validate().is_err());
    let c = EncoderConfig {
        prefix_len: 0,
        ..EncoderConfig::default()
    };
    assert!(c.validate().is_err());
}
