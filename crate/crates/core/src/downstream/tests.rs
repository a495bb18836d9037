use super::*;
use crate::backbone::init_generator;
use crate::defect::init_adaptation;
use rand_chacha::rand_core::SeedableRng;

fn tiny_cfg() -> SynthesisConfig {
    SynthesisConfig {
        z_dim: 6,
        w_dim: 6,
        mapping_layers: 2,
        output_resolution: 8,
        image_channels: 3,
        channel_map: [(4, 5), (8, 4)].into_iter().collect(),
    }
}

fn tiny_gcfg() -> DefectGenConfig {
    DefectGenConfig {
        attach_start: 4,
        ..DefectGenConfig::for_synthesis(&tiny_cfg())
    }
}

fn stage2_ckpt(seed: u64) -> Checkpoint<f64> {
    let cfg = tiny_cfg();
    let gcfg = tiny_gcfg();
    let g: ParamSet<f64> = init_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let a: ParamSet<f64> = init_adaptation(&cfg, &gcfg, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let mut params = ParamSet::new();
    params.extend_prefixed("g.", &g);
    params.extend_prefixed("", &a);
    Checkpoint::new(
        params,
        serde_json::json!({"synthesis": cfg, "defect": gcfg, "stage": 2}),
        0,
    )
}

fn blob_set(n_per: usize, res: usize, noise: f64, seed: u64) -> Vec<LabeledImage<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in 0..2usize {
        let center = if label == 0 { -0.5 } else { 0.5 };
        for _ in 0..n_per {
            let image = ArrayD::from_shape_simple_fn(IxDyn(&[3, res, res]), || {
                center + noise * rng.sample::<f64, _>(StandardNormal)
            });
            out.push(LabeledImage { image, label });
        }
    }
    out
}

fn two_classes() -> Vec<String> {
    vec!["a".to_string(), "b".to_string()]
}

// ---------------------------------------------------------------------------
// augmented trainset

#[test]
fn augmented_trainset_counts_and_uniform_histogram() {
    let cks = vec![
        ("scratch".to_string(), stage2_ckpt(1)),
        ("hole".to_string(), stage2_ckpt(2)),
        ("print".to_string(), stage2_ckpt(3)),
    ];
    let (empty, classes) = build_augmented_trainset(&cks, 0, 0).unwrap();
    assert!(empty.is_empty());
    assert_eq!(classes, vec!["scratch", "hole", "print"]);

    let (set, _) = build_augmented_trainset(&cks, 4, 0).unwrap();
    assert_eq!(set.len(), 12);
    for label in 0..3 {
        assert_eq!(set.iter().filter(|s| s.label == label).count(), 4);
    }
    for s in &set {
        assert_eq!(s.image.shape(), &[3, 8, 8]);
        assert!(s.image.iter().all(|v| v.is_finite()));
    }
    // deterministic per seed
    let (again, _) = build_augmented_trainset(&cks, 4, 0).unwrap();
    for (a, b) in set.iter().zip(again.iter()) {
        assert!(a
            .image
            .iter()
            .zip(b.image.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let (other, _) = build_augmented_trainset(&cks, 4, 1).unwrap();
    assert!(set
        .iter()
        .zip(other.iter())
        .any(|(a, b)| a.image.iter().zip(b.image.iter()).any(|(x, y)| x != y)));
}

#[test]
fn augmented_trainset_rejects_bad_checkpoint() {
    let mut ck = stage2_ckpt(1);
    ck.config = serde_json::json!({});
    let cks = vec![("x".to_string(), ck)];
    assert_eq!(
        build_augmented_trainset(&cks, 1, 0).unwrap_err().exit_code(),
        3
    );
}

// ---------------------------------------------------------------------------
// training

#[test]
fn zero_epochs_returns_initialized_state() {
    let set = blob_set(3, 8, 0.05, 0);
    let cfg = ClassifierConfig {
        epochs: 0,
        seed: 9,
        ..ClassifierConfig::default()
    };
    let (state, curve) = train_classifier(&set, &two_classes(), &cfg).unwrap();
    assert!(curve.is_empty());
    let init: ParamSet<f64> =
        init_classifier(Architecture::TinyCnn, 2, &mut crate::seeds::stream(9, "cls_init"));
    assert!(state.params.bitwise_eq(&init));
}

#[test]
fn separable_blobs_loss_decreases_and_is_deterministic() {
    let set = blob_set(8, 8, 0.05, 1);
    let cfg = ClassifierConfig {
        lr: 0.01,
        batch: 8,
        epochs: 15,
        seed: 0,
        ..ClassifierConfig::default()
    };
    let (state, curve) = train_classifier(&set, &two_classes(), &cfg).unwrap();
    assert_eq!(curve.len(), 15);
    assert!(curve.iter().all(|l| l.is_finite()));
    assert!(
        curve.last().unwrap() < curve.first().unwrap(),
        "loss did not decrease: {curve:?}"
    );
    let (state2, curve2) = train_classifier(&set, &two_classes(), &cfg).unwrap();
    assert!(state.params.bitwise_eq(&state2.params));
    assert_eq!(curve, curve2);
}

#[test]
fn synthetic_defects_reach_high_train_accuracy() {
    // two-class set from the synthetic defect renderer
    let mut rng = crate::seeds::stream(5, "cls.synth");
    let mut set = Vec::new();
    for (label, kind) in [
        (0usize, crate::data::DefectKind::Hole),
        (1, crate::data::DefectKind::Print),
    ] {
        for _ in 0..10 {
            let (mut img, sil) = crate::data::render_good::<f64>(16, &mut rng);
            crate::data::apply_defect(&mut img, &sil, kind, &mut rng);
            set.push(LabeledImage { image: img, label });
        }
    }
    let cfg = ClassifierConfig {
        lr: 0.01,
        batch: 10,
        epochs: 50,
        seed: 0,
        ..ClassifierConfig::default()
    };
    let (state, _) = train_classifier(&set, &two_classes(), &cfg).unwrap();
    let acc = evaluate_classifier(&state, &set).unwrap();
    assert!(acc >= 0.9, "train accuracy {acc} below 0.9");
}

#[test]
fn single_class_input_is_rejected() {
    let mut set = blob_set(4, 8, 0.05, 2);
    set.retain(|s| s.label == 0);
    let err = train_classifier(&set, &two_classes(), &ClassifierConfig::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(train_classifier::<f64>(&[], &two_classes(), &ClassifierConfig::default()).is_err());
}

// ---------------------------------------------------------------------------
// evaluation

#[test]
fn random_classifier_sits_at_chance_level() {
    let classes = two_classes();
    let state = ClassifierState {
        params: init_classifier::<f64>(
            Architecture::TinyCnn,
            2,
            &mut crate::seeds::stream(77, "cls_init"),
        ),
        architecture: Architecture::TinyCnn,
        classes,
        resolution: 8,
    };
    let test = blob_set(100, 8, 1.0, 3);
    let acc = evaluate_classifier(&state, &test).unwrap();
    // binomial 3 sigma band around 1/2 for n=200
    let sigma = (0.25f64 / 200.0).sqrt();
    assert!(
        (acc - 0.5).abs() < 3.0 * sigma + 0.01,
        "chance-level accuracy {acc} out of band"
    );
}

#[test]
fn confusion_matrix_rows_sum_to_class_counts() {
    let set = blob_set(7, 8, 0.3, 4);
    let cfg = ClassifierConfig {
        lr: 0.01,
        batch: 7,
        epochs: 5,
        ..ClassifierConfig::default()
    };
    let (state, _) = train_classifier(&set, &two_classes(), &cfg).unwrap();
    let cm = confusion_matrix(&state, &set).unwrap();
    for row in 0..2 {
        let sum: usize = (0..2).map(|c| cm[[row, c]]).sum();
        assert_eq!(sum, 7);
    }
    let acc = evaluate_classifier(&state, &set).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // out-of-range label counts wrong but does not crash
    let mut bad = set.clone();
    bad[0].label = 5;
    let acc_bad = evaluate_classifier(&state, &bad).unwrap();
    assert!(acc_bad <= acc);
    assert!(evaluate_classifier::<f64>(&state, &[]).is_err());
}

#[test]
fn resnet_config_initializes_and_runs_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ps: ParamSet<f64> = init_classifier(Architecture::Resnet34, 3, &mut rng);
    // 16 basic blocks in the 3-4-6-3 layout plus stem and head
    let n_blocks = ps
        .names()
        .filter(|n| n.ends_with(".conv0.weight"))
        .count();
    assert_eq!(n_blocks, 16);
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &ps);
    let x = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 8, 8])));
    let logits = classifier_logits(&x, &p, Architecture::Resnet34).unwrap();
    assert_eq!(logits.shape(), &[1, 3]);
    assert!(logits.value().iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_matches_closed_form() {
    let g: Graph<f64> = Graph::new();
    // logits [[ln 1, ln 3]] with label 1 -> -ln(3/4)
    let logits = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 3.0f64.ln()]).unwrap(),
    );
    let loss = cross_entropy(&logits, &[1]).unwrap().item();
    assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    assert!(cross_entropy(&logits, &[2]).is_err());
    assert!(cross_entropy(&logits, &[0, 1]).is_err());
}
