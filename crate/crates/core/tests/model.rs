use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdt_core::decay::{DecayVariant, Grid};
use sdt_core::gradcheck::suites::{self, Scope};
use sdt_core::model::*;
use sdt_core::sda::AttentionPath;
use sdt_core::{Error, Graph, Tensor};

fn small_hierarchical(decay: DecayVariant) -> ModelConfig {
    ModelConfig {
        decay,
        stage_depths: vec![1, 1, 1, 1],
        stage_dims: vec![8, 16, 16, 16],
        stage_heads: vec![2, 2, 2, 2],
        ..ModelConfig::hierarchical()
    }
}

fn images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let (h, w) = cfg.image_size;
    Tensor::randn(vec![b, h, w, cfg.in_channels], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn batch(b: usize, cfg: &ModelConfig, seed: u64) -> Batch<f64> {
    Batch { images: images(b, cfg, seed), labels: (0..b).map(|i| i % cfg.num_classes).collect() }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = ModelConfig::hierarchical();
    let (a, _) = build_model::<f32>(&cfg, 42).unwrap();
    let (b, _) = build_model::<f32>(&cfg, 42).unwrap();
    let (c, _) = build_model::<f32>(&cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn plain_parameter_count_matches_hand_formula() {
    let cfg = ModelConfig { num_classes: 10, ..ModelConfig::plain() };
    let (d, n, r, depth, classes) = (64usize, 4usize, 16usize, 4usize, 10usize);
    // per block: q, k, v, two FFN matrices (8 D²), gate W_g, low-rank
    // factors, 3×3 LPE, FFN biases (5D) and two norms (4D)
    let block = 3 * d * d + d * n + 2 * d * r + 9 * d + 8 * d * d + 5 * d + 4 * d;
    assert_eq!(block, 11 * d * d + d * n + 2 * d * r + 18 * d);
    let total = (16 * d + d) + depth * block + 2 * d + (d * classes + classes);
    assert_eq!(total, 195_914);
    let (store, _) = build_model::<f64>(&cfg, 0).unwrap();
    assert_eq!(store.numel(), total);
    assert_eq!(cfg.param_count().unwrap(), total);
}

#[test]
fn closed_form_count_matches_every_layout() {
    for decay in DecayVariant::ALL {
        for cfg in [ModelConfig { decay, ..ModelConfig::hierarchical() }, ModelConfig { decay, ..ModelConfig::plain() }] {
            let (store, _) = build_model::<f32>(&cfg, 1).unwrap();
            assert_eq!(store.numel(), cfg.param_count().unwrap(), "{} {}", cfg.arch, decay.name());
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::hierarchical();
    c.stage_dims.pop();
    assert!(matches!(build_model::<f64>(&c, 0), Err(Error::Config(_))));
    let c = ModelConfig { image_size: (24, 24), ..ModelConfig::hierarchical() };
    assert!(matches!(build_model::<f64>(&c, 0), Err(Error::Config(_))));
    let c = ModelConfig { alpha: 0.0, ..ModelConfig::plain() };
    assert!(build_model::<f64>(&c, 0).is_err());
    let c = ModelConfig { stage_heads: vec![3], ..ModelConfig::plain() };
    assert!(build_model::<f64>(&c, 0).is_err());
    let c = ModelConfig { stage_depths: vec![1, 1], stage_dims: vec![8, 8], stage_heads: vec![2, 2], ..ModelConfig::plain() };
    assert!(build_model::<f64>(&c, 0).is_err());
}

#[test]
fn hierarchical_stage_grids_and_logit_shape() {
    let cfg = ModelConfig { num_classes: 10, ..ModelConfig::hierarchical() };
    let (store, model) = build_model::<f32>(&cfg, 3).unwrap();
    let grids: Vec<Grid> = model.stages().iter().map(|s| s.grid).collect();
    let want: Vec<Grid> = [8, 4, 2, 1].iter().map(|&s| Grid::new(s, s).unwrap()).collect();
    assert_eq!(grids, want);
    let x = images(2, &cfg, 1).cast::<f32>();
    let logits = model.predict(&store, &x).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
    assert!(logits.is_finite());
}

#[test]
fn zero_image_gives_finite_logits() {
    for decay in DecayVariant::ALL {
        let cfg = ModelConfig { decay, ..ModelConfig::hierarchical() };
        let (store, model) = build_model::<f32>(&cfg, 0).unwrap();
        let logits = model.predict(&store, &Tensor::zeros(vec![2, 32, 32, 1])).unwrap();
        assert!(logits.is_finite());
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let cfg = ModelConfig::plain();
    let (store, model) = build_model::<f64>(&cfg, 0).unwrap();
    assert!(model.predict(&store, &Tensor::zeros(vec![1, 30, 32, 1])).is_err());
}

#[test]
fn cag_with_zero_gate_weights_is_a_constant_decay() {
    // W_g = 0 gives G = -ln 2 everywhere, i.e. a fixed decay of rate α ln 2
    let cag = ModelConfig { stage_depths: vec![2], stage_dims: vec![16], stage_heads: vec![2], ..ModelConfig::plain() };
    let none = ModelConfig { decay: DecayVariant::None, ..cag.clone() };
    let fixed = ModelConfig { decay: DecayVariant::Fixed, ..cag.clone() };
    let x = images(2, &cag, 5);
    let (p, m_cag) = build_model::<f64>(&cag, 9).unwrap();
    let (p_none, m_none) = build_model::<f64>(&none, 9).unwrap();
    let (p_fixed, mut m_fixed) = build_model::<f64>(&fixed, 9).unwrap();
    assert_eq!(p, p_none);
    assert_eq!(p, p_fixed);
    let rate = cag.alpha * std::f64::consts::LN_2;
    for s in m_fixed.stages_mut() {
        s.ctx.lambdas = vec![rate; 2];
    }
    let y_cag = m_cag.predict(&p, &x).unwrap();
    let y_none = m_none.predict(&p, &x).unwrap();
    let y_fixed = m_fixed.predict(&p, &x).unwrap();
    assert!(y_cag.max_abs_diff(&y_fixed) < 1e-12);
    assert!(y_cag.max_abs_diff(&y_none) > 1e-6);
}

#[test]
fn learning_rate_zero_leaves_parameters_unchanged() {
    let cfg = small_hierarchical(DecayVariant::Cag);
    let (mut store, model) = build_model::<f64>(&cfg, 1).unwrap();
    let before = store.clone();
    let mut opt = Optimizer::new(AdamWConfig { lr: 0.0, min_lr: 0.0, ..AdamWConfig::default() }, &store).unwrap();
    let loss = train_step(&model, &mut store, &batch(4, &cfg, 2), &mut opt).unwrap();
    assert!(loss.is_finite());
    for id in store.ids() {
        assert_eq!(store.value(id), before.value(id));
    }
}

#[test]
fn uniform_logits_give_log_k_loss() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(vec![3, 4]));
    let l = cross_entropy(&mut g, logits, &[0, 1, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    assert!(cross_entropy(&mut g, logits, &[0, 4, 1]).is_err());
}

#[test]
fn repeated_training_gives_identical_loss_curves() {
    let cfg = small_hierarchical(DecayVariant::Cag);
    let curve = || {
        let (mut store, model) = build_model::<f32>(&cfg, 7).unwrap();
        let mut opt = Optimizer::new(AdamWConfig { total_steps: 5, ..AdamWConfig::default() }, &store).unwrap();
        let b = batch(4, &cfg, 3);
        let b = Batch { images: b.images.cast::<f32>(), labels: b.labels };
        (0..5).map(|_| train_step(&model, &mut store, &b, &mut opt).unwrap().to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(curve(), curve());
}

#[test]
fn gradients_reach_every_active_parameter() {
    for decay in DecayVariant::ALL {
        let cfg = small_hierarchical(decay);
        let (mut store, model) = build_model::<f64>(&cfg, 11).unwrap();
        let mut opt = Optimizer::new(AdamWConfig::default(), &store).unwrap();
        train_step(&model, &mut store, &batch(4, &cfg, 4), &mut opt).unwrap();
        let inactive = model.inactive_params();
        for (id, name, _) in store.iter() {
            let norm: f64 = store.grad(id).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if inactive.contains(&id) {
                assert_eq!(norm, 0.0, "{}: {name} should be inactive", decay.name());
            } else {
                assert!(norm > 0.0, "{}: {name} has no gradient", decay.name());
            }
        }
    }
}

#[test]
fn gate_weights_are_inactive_without_content_decay() {
    let cfg = ModelConfig { decay: DecayVariant::None, ..ModelConfig::plain() };
    let (store, model) = build_model::<f32>(&cfg, 0).unwrap();
    let names: Vec<&str> = model.inactive_params().into_iter().map(|id| store.name(id)).collect();
    assert_eq!(names.len(), 4);
    assert!(names.iter().all(|n| n.ends_with("attn.w_g")));
}

#[test]
fn hierarchical_routing_materializes_full_masks_only_late() {
    let cfg = ModelConfig::hierarchical();
    let (store, model) = build_model::<f32>(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let x = g.constant(images(1, &cfg, 0).cast::<f32>());
    let out = model.forward(&mut g, &vars, x).unwrap();
    for (s, c) in out.stage_counters.iter().enumerate() {
        let depth = cfg.stage_depths[s];
        if s < DECOMPOSED_STAGES {
            assert_eq!(model.stages()[s].path, AttentionPath::Decomposed);
            assert_eq!(c.full_masks, 0, "stage {s}");
            assert_eq!(c.axis_masks, 2 * depth);
        } else {
            assert_eq!(model.stages()[s].path, AttentionPath::Full);
            assert_eq!(c.full_masks, depth, "stage {s}");
            assert_eq!(c.axis_masks, 0);
        }
    }
}

#[test]
fn every_variant_runs_the_same_contract() {
    let x = images(2, &ModelConfig::plain(), 1).cast::<f32>();
    for arch in [ModelConfig::plain(), ModelConfig::hierarchical()] {
        for decay in DecayVariant::ALL {
            let cfg = ModelConfig { decay, ..arch.clone() };
            let (store, model) = build_model::<f32>(&cfg, 2).unwrap();
            let logits = model.predict(&store, &x).unwrap();
            assert_eq!(logits.shape(), &[2, cfg.num_classes]);
            assert!(logits.is_finite());
        }
    }
}

#[test]
fn checkpoints_round_trip_and_are_byte_stable() {
    let cfg = small_hierarchical(DecayVariant::Cag);
    let (mut store, model) = build_model::<f32>(&cfg, 5).unwrap();
    let mut opt = Optimizer::new(AdamWConfig { total_steps: 3, ..AdamWConfig::default() }, &store).unwrap();
    let b = batch(2, &cfg, 1);
    let b = Batch { images: b.images.cast::<f32>(), labels: b.labels };
    train_step(&model, &mut store, &b, &mut opt).unwrap();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    save_checkpoint(&mut first, "decay=cag", 5, &store, Some(&opt)).unwrap();
    save_checkpoint(&mut second, "decay=cag", 5, &store, Some(&opt)).unwrap();
    assert_eq!(first, second);
    let ck = load_checkpoint::<f32>(&mut first.as_slice()).unwrap();
    assert_eq!(ck.config, "decay=cag");
    assert_eq!(ck.seed, 5);
    assert_eq!(ck.optimizer.as_ref(), Some(&opt));
    let (mut fresh, _) = build_model::<f32>(&cfg, 99).unwrap();
    fresh.load_named(ck.params).unwrap();
    for id in store.ids() {
        assert_eq!(fresh.value(id), store.value(id));
    }
    let mut bad = first.clone();
    bad[0] = b'X';
    assert!(matches!(load_checkpoint::<f32>(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
    assert!(load_checkpoint::<f32>(&mut &first[..first.len() - 3]).is_err());
}

#[test]
fn nan_parameters_abort_with_a_located_diagnostic() {
    let cfg = small_hierarchical(DecayVariant::Cag);
    let (mut store, model) = build_model::<f64>(&cfg, 1).unwrap();
    let id = store.id("stage2.block0.attn.w_v").unwrap();
    store.value_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = Optimizer::new(AdamWConfig::default(), &store).unwrap();
    match train_step(&model, &mut store, &batch(2, &cfg, 1), &mut opt) {
        Err(Error::NonFinite { op, .. }) => assert!(op.starts_with("stage2.block0"), "{op}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let reports = suites::run(Scope::Model, 3).unwrap();
    let worst = sdt_core::gradcheck::worst(&reports);
    assert!(worst < Scope::Model.tolerance(), "{worst}");
}

#[test]
fn cosine_schedule_shape() {
    let c = AdamWConfig { lr: 1.0, min_lr: 0.0, warmup_steps: 2, total_steps: 12, ..AdamWConfig::default() };
    assert_eq!(c.lr_at(0), 0.5);
    assert_eq!(c.lr_at(1), 1.0);
    assert_eq!(c.lr_at(2), 1.0);
    assert!((c.lr_at(7) - 0.5).abs() < 1e-12);
    assert!(c.lr_at(12).abs() < 1e-12);
    assert!(c.lr_at(50).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_valid_configs_keep_the_shape_contract(
        stages in 1usize..4,
        patch in 1usize..3,
        base in 1usize..3,
        heads in 1usize..3,
        depth in 1usize..3,
        classes in 2usize..6,
        variant in 0usize..6,
        batch_size in 1usize..3,
    ) {
        let side = patch << (stages - 1);
        let image = side * (1 + base % 2);
        let dims: Vec<usize> = (0..stages).map(|s| 4 * heads * (1 + s % 2)).collect();
        let cfg = ModelConfig {
            arch: if stages == 1 { Architecture::Plain } else { Architecture::Hierarchical },
            decay: DecayVariant::ALL[variant],
            stage_depths: vec![depth; stages],
            stage_dims: dims,
            stage_heads: vec![heads; stages],
            patch_size: patch,
            image_size: (image, image * 2 / (1 + base % 2)),
            num_classes: classes,
            ..ModelConfig::hierarchical()
        };
        prop_assume!(cfg.validate().is_ok());
        let (store, model) = build_model::<f64>(&cfg, 0).unwrap();
        for (s, stage) in model.stages().iter().enumerate() {
            prop_assert_eq!(stage.grid, cfg.stage_grid(s).unwrap());
            prop_assert_eq!(stage.grid.height() * (cfg.patch_size << s), cfg.image_size.0);
        }
        let x = images(batch_size, &cfg, 1);
        let logits = model.predict(&store, &x).unwrap();
        prop_assert_eq!(logits.shape(), &[batch_size, classes][..]);
        prop_assert!(logits.is_finite());
    }
}
