use invlab::experiment::{build_world, ExperimentConfig};
use invlab::loss::LossKind;

#[test]
fn linear_config_shape() {
    let cfg = ExperimentConfig::linear(3);
    cfg.validate().unwrap();
    let (world, ds) = build_world(&cfg).unwrap();
    assert_eq!((world.gt.n, world.gt.m), (6, 12));
    assert_eq!(world.augs.len(), 6);
    assert_eq!(ds.len(), 5000);
    assert!(world.augs.iter().all(|a| (1..=2).contains(&a.block_size)));
    assert_eq!(cfg.train.batch, 256);
    assert_eq!(cfg.train.epochs, 1000);
    assert_eq!(cfg.train.lr, 1e-3);
    assert_eq!(cfg.train.loss.lambda_recon, 0.05);
}

#[test]
fn worlds_are_seeded() {
    let a = build_world(&ExperimentConfig::linear(1)).unwrap();
    let b = build_world(&ExperimentConfig::linear(1)).unwrap();
    let c = build_world(&ExperimentConfig::linear(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn complementarity_families_have_disjoint_supports() {
    for kind in [LossKind::L1Recon, LossKind::SimclrInner] {
        let cfg = ExperimentConfig::complementarity(0, kind);
        cfg.validate().unwrap();
        let (world, _) = build_world(&cfg).unwrap();
        let [fa, fb] = cfg.families.clone().unwrap();
        for &i in &fa {
            for &j in &fb {
                let si = &world.augs[i].support;
                assert!(world.augs[j].support.iter().all(|k| !si.contains(k)));
            }
        }
    }
    let simclr = ExperimentConfig::complementarity(0, LossKind::SimclrInner);
    assert!(simclr.train.model.row_normalize);
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = ExperimentConfig::complementarity(5, LossKind::L1Recon);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg, back);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "samples": 100}"#).unwrap();
    assert_eq!(partial.n, 6);
    assert_eq!(partial.samples, 100);
}

#[test]
fn invalid_configs() {
    let mut cfg = ExperimentConfig::linear(0);
    cfg.m = 6;
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::linear(0);
    cfg.augmentations.supports = vec![vec![7]];
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::linear(0);
    cfg.families = Some([vec![0], vec![9]]);
    assert!(cfg.validate().is_err());
}
