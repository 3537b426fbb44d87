use invlab::loss::{LossConfig, LossKind};
use invlab::model::{grad_check, grad_check_resampling, EncoderModel, Evaluation, LatentLayout, ModelKind, ModelSpec};
use invlab::numerics::{gaussian, norm2, Mat, RngStream};
use invlab::synth::{gen_dataset, gen_ground_truth, sample_pairs, AugmentationOptions, PairBatch, World};
use invlab::train::evaluate_objective;
use invlab::Error;
use proptest::prelude::*;

fn mlp_spec() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Mlp,
        hidden_width: 8,
        hidden_layers: 2,
        ..ModelSpec::default()
    }
}

/// Scalar-loop forward pass used as an oracle.
fn forward_oracle(model: &EncoderModel, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (k, layer) in model.encoder.iter().enumerate() {
        let last = k + 1 == model.encoder.len();
        h = (0..layer.w.rows())
            .map(|o| {
                let u: f64 = (0..layer.w.cols()).map(|i| layer.w.get(o, i) * h[i]).sum::<f64>() + layer.b[o];
                if last || u > 0.0 {
                    u
                } else {
                    0.1 * u
                }
            })
            .collect();
    }
    h
}

#[test]
fn encode_matches_scalar_oracle() {
    let mut rng = RngStream::new(1, 0);
    let model = EncoderModel::init(&mlp_spec(), 5, 3, &mut rng).unwrap();
    let x = gaussian(&mut rng, 10, 5);
    let z = model.encode(&x).unwrap();
    for i in 0..10 {
        let want = forward_oracle(&model, x.row(i));
        for (a, b) in z.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn init_shapes_and_counts() {
    let mut rng = RngStream::new(2, 0);
    let lin = EncoderModel::init(&ModelSpec::default(), 12, 6, &mut rng).unwrap();
    assert_eq!(lin.encoder.len(), 1);
    assert_eq!(lin.encoder[0].w.shape(), (6, 12));
    assert_eq!(lin.decoder[0].w.shape(), (12, 6));
    assert_eq!(lin.param_count(), 2 * 72 + 6 + 12);
    let mlp = EncoderModel::init(&mlp_spec(), 12, 6, &mut rng).unwrap();
    assert_eq!(mlp.encoder.len(), 3);
    assert_eq!(mlp.param_count(), mlp.param_slices().iter().map(|s| s.len()).sum::<usize>());
}

#[test]
fn init_is_deterministic() {
    let a = EncoderModel::init(&mlp_spec(), 4, 2, &mut RngStream::new(3, 1)).unwrap();
    let b = EncoderModel::init(&mlp_spec(), 4, 2, &mut RngStream::new(3, 1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wrong_input_width_is_rejected() {
    let model = EncoderModel::init(&ModelSpec::default(), 4, 2, &mut RngStream::new(0, 0)).unwrap();
    assert!(matches!(model.encode(&Mat::zeros(3, 5)), Err(Error::Dimension { .. })));
    assert!(model.decode(&Mat::zeros(3, 3)).is_err());
}

#[test]
fn ground_truth_model_recovers_latents() {
    let mut rng = RngStream::new(4, 0);
    let gt = gen_ground_truth(&mut rng, 3, 7).unwrap();
    let model = EncoderModel::from_ground_truth(&gt);
    let z = gaussian(&mut rng, 20, 3);
    let x = gt.embed(&z).unwrap();
    assert!(model.encode(&x).unwrap().sub(&z).unwrap().max_abs() < 1e-10);
    assert!(model.decode(&z).unwrap().sub(&x).unwrap().max_abs() < 1e-10);
}

#[test]
fn row_normalization_gives_unit_groups() {
    let spec = ModelSpec {
        layout: LatentLayout::Tensor { rows: 3, cols: 2 },
        row_normalize: true,
        ..ModelSpec::default()
    };
    let mut rng = RngStream::new(5, 0);
    let model = EncoderModel::init(&spec, 8, 6, &mut rng).unwrap();
    let z = model.encode(&gaussian(&mut rng, 15, 8)).unwrap();
    for i in 0..15 {
        for g in z.row(i).chunks(2) {
            assert!((norm2(g) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = EncoderModel::init(&mlp_spec(), 5, 3, &mut RngStream::new(6, 0)).unwrap();
    model.save(dir.path()).unwrap();
    assert!(dir.path().join("model.json").exists());
    assert!(dir.path().join("enc_0_w.csv").exists());
    let back = EncoderModel::load(dir.path()).unwrap();
    assert_eq!(model, back);
}

struct Setup {
    world: World,
    ds: invlab::synth::Dataset,
}

fn setup(seed: u64) -> Setup {
    let mut rng = RngStream::new(seed, 0);
    let gt = gen_ground_truth(&mut rng, 4, 8).unwrap();
    let world = World::generate(gt, &mut rng, 3, &AugmentationOptions { max_block: 2, ..Default::default() }).unwrap();
    let ds = gen_dataset(&mut rng, &world.gt, 200).unwrap();
    Setup { world, ds }
}

fn check(spec: &ModelSpec, loss: LossConfig, latent: usize, seed: u64) -> f64 {
    let s = setup(seed);
    let model = EncoderModel::init(spec, 8, latent, &mut RngStream::new(seed, 1)).unwrap();
    let mut rng = RngStream::new(seed, 2);
    let eval = |m: &EncoderModel, b: &PairBatch| -> invlab::Result<Evaluation> { Ok(evaluate_objective(m, &loss, b)?.into()) };
    grad_check_resampling(&model, eval, || sample_pairs(&mut rng, &s.ds, &s.world, 6, false), 1e-5).unwrap()
}

#[test]
fn gradients_linear_l1_recon() {
    let err = check(&ModelSpec::default(), LossConfig::default(), 4, 10);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradients_mlp_l1_recon() {
    let err = check(&mlp_spec(), LossConfig::default(), 4, 11);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradients_mlp_group_lasso_nce() {
    let spec = ModelSpec {
        layout: LatentLayout::Tensor { rows: 2, cols: 2 },
        ..mlp_spec()
    };
    let loss = LossConfig {
        kind: LossKind::GroupLassoNce,
        lambda_recon: 0.1,
        tau: 0.5,
        ..LossConfig::default()
    };
    let err = check(&spec, loss, 4, 12);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradients_linear_l1_nce_excluding_self() {
    let loss = LossConfig {
        kind: LossKind::L1Nce,
        lambda_recon: 0.0,
        exclude_self: true,
        ..LossConfig::default()
    };
    let err = check(&ModelSpec::default(), loss, 4, 13);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradients_simclr_with_row_normalization() {
    let spec = ModelSpec {
        row_normalize: true,
        ..mlp_spec()
    };
    let loss = LossConfig {
        kind: LossKind::SimclrInner,
        tau: 0.3,
        lambda_recon: 0.0,
        ..LossConfig::default()
    };
    let err = check(&spec, loss, 4, 14);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_rejects_eps_out_of_range() {
    let s = setup(15);
    let model = EncoderModel::from_ground_truth(&s.world.gt);
    let batch = sample_pairs(&mut RngStream::new(0, 0), &s.ds, &s.world, 4, false).unwrap();
    let loss = LossConfig::default();
    let eval = |m: &EncoderModel, b: &PairBatch| -> invlab::Result<Evaluation> { Ok(evaluate_objective(m, &loss, b)?.into()) };
    assert!(grad_check(&model, eval, &batch, 1e-2).is_err());
    assert!(grad_check(&model, eval, &batch, 1e-8).is_err());
}

#[test]
fn grad_check_catches_a_wrong_gradient() {
    let s = setup(17);
    let model = EncoderModel::init(&ModelSpec::default(), 8, 4, &mut RngStream::new(17, 1)).unwrap();
    let mut rng = RngStream::new(17, 2);
    let loss = LossConfig::default();
    let doubled = |m: &EncoderModel, b: &PairBatch| -> invlab::Result<Evaluation> {
        let mut ev: Evaluation = evaluate_objective(m, &loss, b)?.into();
        ev.value *= 2.0;
        Ok(ev)
    };
    let err = grad_check_resampling(&model, doubled, || sample_pairs(&mut rng, &s.ds, &s.world, 6, false), 1e-5).unwrap();
    assert!((err - 0.5).abs() < 1e-3, "{err}");
}

#[test]
fn zero_gradients_are_judged_against_difference_resolution() {
    // Without reconstruction the decoder gradient is exactly zero.
    let s = setup(18);
    let model = EncoderModel::init(&ModelSpec::default(), 8, 4, &mut RngStream::new(18, 1)).unwrap();
    let loss = LossConfig {
        kind: LossKind::L1Nce,
        lambda_recon: 0.0,
        ..LossConfig::default()
    };
    let mut rng = RngStream::new(18, 2);
    let eval = |m: &EncoderModel, b: &PairBatch| -> invlab::Result<Evaluation> { Ok(evaluate_objective(m, &loss, b)?.into()) };
    let err = grad_check_resampling(&model, eval, || sample_pairs(&mut rng, &s.ds, &s.world, 6, false), 1e-5).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_reports_kink_for_identity_pairs() {
    // Identity pairs put every L1 argument exactly on its kink.
    let s = setup(16);
    let model = EncoderModel::from_ground_truth(&s.world.gt);
    let batch = PairBatch {
        x: s.ds.x.select_rows(&[0, 1, 2]),
        x_aug: s.ds.x.select_rows(&[0, 1, 2]),
        aug_ids: vec![None; 3],
    };
    let loss = LossConfig::default();
    let eval = |m: &EncoderModel, b: &PairBatch| -> invlab::Result<Evaluation> { Ok(evaluate_objective(m, &loss, b)?.into()) };
    assert!(matches!(grad_check(&model, eval, &batch, 1e-5), Err(Error::KinkProximity { .. })));
    assert!(matches!(
        grad_check_resampling(&model, eval, || Ok(batch.clone()), 1e-5),
        Err(Error::KinkProximity { tries: 20 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linear_encoder_is_affine(seed in 0u64..100_000, a in -3.0f64..3.0) {
        let mut rng = RngStream::new(seed, 0);
        let model = EncoderModel::init(&ModelSpec::default(), 5, 3, &mut rng).unwrap();
        let x = gaussian(&mut rng, 1, 5);
        let y = gaussian(&mut rng, 1, 5);
        let mix = x.scale(a).add(&y.scale(1.0 - a)).unwrap();
        let lhs = model.encode(&mix).unwrap();
        let rhs = model.encode(&x).unwrap().scale(a).add(&model.encode(&y).unwrap().scale(1.0 - a)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn mlp_gradients_agree(seed in 0u64..1_000) {
        let err = check(&mlp_spec(), LossConfig::default(), 4, seed);
        prop_assert!(err < 1e-5, "{}", err);
    }
}
