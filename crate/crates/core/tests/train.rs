#![allow(clippy::neg_cmp_op_on_partial_ord)]

use invlab::loss::{LossConfig, LossKind};
use invlab::model::{EncoderModel, ModelKind, ModelSpec};
use invlab::numerics::RngStream;
use invlab::synth::{gen_dataset, gen_ground_truth, pairs_for_aug, AugmentationOptions, Dataset, World};
use invlab::train::{adam_step, evaluate_objective, train, AdamConfig, AdamState, TrainConfig, TrainReport, Trainer, CURVE_HEADER};
use invlab::Error;

fn small(seed: u64) -> (World, Dataset) {
    let mut rng = RngStream::new(seed, 0);
    let gt = gen_ground_truth(&mut rng, 3, 6).unwrap();
    let world = World::generate(gt, &mut rng, 3, &AugmentationOptions { max_block: 2, ..Default::default() }).unwrap();
    let ds = gen_dataset(&mut rng, &world.gt, 120).unwrap();
    (world, ds)
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        batch: 32,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_hand_trace() {
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut p = [1.0, -2.0];
    let mut st = AdamState::new(&[2]);
    adam_step(&mut [&mut p[..]], &[&[0.5, -4.0][..]], &mut st, &cfg).unwrap();
    // First step: m̂ = g, v̂ = g², update lr·g/(|g| + eps).
    let want0 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    let want1 = -2.0 + 0.1 * 4.0 / (4.0 + 1e-8);
    assert!((p[0] - want0).abs() < 1e-15);
    assert!((p[1] - want1).abs() < 1e-15);
    adam_step(&mut [&mut p[..]], &[&[0.5, 0.0][..]], &mut st, &cfg).unwrap();
    let m = 0.9 * 0.05 + 0.1 * 0.5;
    let v = 0.999 * 0.001 * 0.25 + 0.001 * 0.25;
    let step = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert!((p[0] - (want0 - step)).abs() < 1e-15);
    let m1 = 0.9 * (0.1 * -4.0);
    let v1 = 0.999 * (0.001 * 16.0);
    let step1 = 0.1 * (m1 / 0.19) / ((v1 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert!((p[1] - (want1 - step1)).abs() < 1e-15);
    assert_eq!(st.t, 2);
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut p = [0.0; 2];
    let mut st = AdamState::new(&[2]);
    assert!(adam_step(&mut [&mut p[..]], &[&[1.0][..]], &mut st, &AdamConfig::default()).is_err());
    assert!(adam_step(&mut [&mut p[..]], &[&[f64::INFINITY, 0.0][..]], &mut st, &AdamConfig::default()).is_err());
    assert_eq!(st.t, 0);
}

#[test]
fn ground_truth_init_has_zero_reconstruction_and_invariance_on_fixed_coords() {
    let (world, ds) = small(1);
    let model = EncoderModel::from_ground_truth(&world.gt);
    let loss = LossConfig::default();
    let batch = pairs_for_aug(&ds, &world, Some(0)).unwrap();
    let ev = evaluate_objective(&model, &loss, &batch).unwrap();
    let recon = ev.anti_degeneration;
    assert!(recon.abs() <= 1e-10, "{recon}");
    let z = model.encode(&batch.x).unwrap();
    let za = model.encode(&batch.x_aug).unwrap();
    for i in world.augs[0].fixed.iter() {
        for r in 0..z.rows() {
            assert!((z.get(r, i) - za.get(r, i)).abs() < 1e-9);
        }
    }
}

#[test]
fn objective_parts_add_up() {
    let (world, ds) = small(2);
    let model = EncoderModel::init(&ModelSpec::default(), 6, 3, &mut RngStream::new(2, 1)).unwrap();
    for kind in [LossKind::L1Recon, LossKind::L1Nce, LossKind::GroupLassoNce] {
        let loss = LossConfig { kind, ..LossConfig::default() };
        let batch = pairs_for_aug(&ds, &world, Some(1)).unwrap();
        let ev = evaluate_objective(&model, &loss, &batch).unwrap();
        assert!((ev.alignment + ev.anti_degeneration - ev.total).abs() < 1e-10);
    }
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let (world, ds) = small(3);
    let (m1, r1) = train(&quick(7, 30), &ds, &world).unwrap();
    let (m2, r2) = train(&quick(7, 30), &ds, &world).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1.epochs, r2.epochs);
    let first = r1.epochs[0].total;
    let last = r1.final_total().unwrap();
    assert!(last < first, "{first} -> {last}");
    let (m3, _) = train(&quick(8, 30), &ds, &world).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn mlp_trains_without_errors() {
    let (world, ds) = small(4);
    let cfg = TrainConfig {
        model: ModelSpec {
            kind: ModelKind::Mlp,
            hidden_width: 16,
            hidden_layers: 2,
            ..ModelSpec::default()
        },
        ..quick(4, 5)
    };
    let (_, report) = train(&cfg, &ds, &world).unwrap();
    assert_eq!(report.epochs.len(), 5);
    assert!(report.epochs.iter().all(|e| e.total.is_finite()));
}

#[test]
fn resume_is_bitwise_identical() {
    let (world, ds) = small(5);
    let cfg = quick(11, 12);
    let (straight, report) = train(&cfg, &ds, &world).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("loss_curve.csv");
    let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
    t.append_curve_to(&curve).unwrap();
    for _ in 0..5 {
        t.run_epoch(&ds, &world).unwrap();
    }
    t.save(dir.path()).unwrap();
    drop(t);

    let mut resumed = Trainer::resume(cfg, dir.path()).unwrap();
    assert_eq!(resumed.epoch, 5);
    resumed.append_curve_to(&curve).unwrap();
    resumed.run(&ds, &world).unwrap();
    assert_eq!(resumed.model, straight);

    let text = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(text.lines().next(), Some(CURVE_HEADER));
    assert_eq!(text, report.curve_csv());
    let parsed = TrainReport::from_curve_csv(&text).unwrap();
    assert_eq!(parsed.epochs, report.epochs);
}

#[test]
fn curve_parsing_rejects_garbage() {
    assert!(TrainReport::from_curve_csv("nope\n").is_err());
    assert!(TrainReport::from_curve_csv(&format!("{CURVE_HEADER}\n0,1,x,2\n")).is_err());
}

#[test]
fn moving_average_window() {
    let text = format!("{CURVE_HEADER}\n0,0,0,1\n1,0,0,3\n2,0,0,5\n");
    let r = TrainReport::from_curve_csv(&text).unwrap();
    assert_eq!(r.moving_average(2), vec![2.0, 4.0]);
    assert_eq!(r.moving_average(5), Vec::<f64>::new());
}

#[test]
fn huge_learning_rate_diverges() {
    let (world, ds) = small(6);
    let cfg = TrainConfig { lr: 1e5, ..quick(6, 50) };
    match train(&cfg, &ds, &world) {
        Err(Error::Diverged { loss, .. }) => assert!(!(loss.abs() <= 1e6)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn snapshots_are_recorded() {
    let (world, ds) = small(7);
    let cfg = TrainConfig { eval_every: 2, ..quick(7, 6) };
    let (_, report) = train(&cfg, &ds, &world).unwrap();
    assert_eq!(report.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 4, 6]);
}

#[test]
fn resampled_blocks_and_identity_pairs_train() {
    let (world, ds) = small(8);
    let cfg = TrainConfig {
        resample_blocks: true,
        include_identity: true,
        ..quick(8, 3)
    };
    assert!(train(&cfg, &ds, &world).is_ok());
}

#[test]
fn invalid_config_is_rejected() {
    let (world, ds) = small(9);
    let cfg = TrainConfig { lr: -1.0, ..quick(9, 1) };
    assert!(matches!(train(&cfg, &ds, &world), Err(Error::InvalidArgument(_))));
    let simclr = TrainConfig {
        loss: LossConfig {
            kind: LossKind::SimclrInner,
            lambda_recon: 0.0,
            ..LossConfig::default()
        },
        ..quick(9, 1)
    };
    assert!(simclr.validate().is_err());
}
