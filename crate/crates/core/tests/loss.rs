use invlab::loss::{group_lasso_dist, l1_align, nce_loss, recon_loss, simclr_inner_loss, Distance, LossConfig, LossKind};
use invlab::numerics::{gaussian, Mat, RngStream};
use proptest::prelude::*;

fn m(rows: &[Vec<f64>]) -> Mat {
    Mat::from_rows(rows).unwrap()
}

/// Direct transcription of the contrastive objective with plain loops and no stabilization.
fn naive_nce(za: &Mat, z: &Mat, d: impl Fn(&[f64], &[f64]) -> f64, tau: f64, exclude_self: bool) -> f64 {
    let b = z.rows();
    let mut total = 0.0;
    for i in 0..b {
        let pos = (-d(za.row(i), z.row(i)) / tau).exp();
        let js: Vec<usize> = (0..b).filter(|&j| !(exclude_self && j == i)).collect();
        let denom = js.iter().map(|&j| (-d(za.row(i), z.row(j)) / tau).exp()).sum::<f64>() / js.len() as f64;
        total += -(pos / denom).ln();
    }
    total / b as f64
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn group(a: &[f64], b: &[f64], r: usize) -> f64 {
    a.chunks(r)
        .zip(b.chunks(r))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum()
}

fn numeric_grad(z: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
    let h = 1e-6;
    let mut g = Mat::zeros(z.rows(), z.cols());
    for k in 0..z.data().len() {
        let mut p = z.clone();
        p.data_mut()[k] += h;
        let mut q = z.clone();
        q.data_mut()[k] -= h;
        g.data_mut()[k] = (f(&p) - f(&q)) / (2.0 * h);
    }
    g
}

fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn l1_align_examples() {
    let z1 = m(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
    let z2 = m(&[vec![0.0, 4.0], vec![0.0, -1.0]]);
    let pl = l1_align(&z1, &z2, 2.0).unwrap();
    assert_eq!(pl.value, (3.0 + 1.0) / 2.0 / 2.0);
    assert_eq!(pl.grad1, m(&[vec![0.25, -0.25], vec![0.0, 0.25]]));
    assert_eq!(pl.grad2, pl.grad1.scale(-1.0));
    assert_eq!(l1_align(&z1, &z1, 1.0).unwrap().value, 0.0);
    assert!(l1_align(&z1, &z2, 0.0).is_err());
    assert!(l1_align(&z1, &Mat::zeros(2, 3), 1.0).is_err());
}

#[test]
fn l1_zero_difference_has_zero_gradient() {
    let z = m(&[vec![1.0, -2.0]]);
    let pl = l1_align(&z, &z, 1.0).unwrap();
    assert!(pl.grad1.data().iter().all(|&g| g == 0.0));
}

#[test]
fn group_lasso_examples() {
    let z1 = m(&[vec![3.0, 0.0, 1.0, 1.0]]);
    let z2 = m(&[vec![0.0, 4.0, 1.0, 1.0]]);
    let pl = group_lasso_dist(&z1, &z2, 2).unwrap();
    assert_eq!(pl.value, 5.0);
    assert_eq!(pl.grad1, m(&[vec![0.6, -0.8, 0.0, 0.0]]));
    assert!(group_lasso_dist(&z1, &z2, 3).is_err());
}

#[test]
fn group_lasso_with_unit_rows_is_l1_bitwise() {
    let mut rng = RngStream::new(1, 0);
    let a = gaussian(&mut rng, 16, 5);
    let b = gaussian(&mut rng, 16, 5);
    let g = group_lasso_dist(&a, &b, 1).unwrap();
    let l = l1_align(&a, &b, 1.0).unwrap();
    assert_eq!(g.value.to_bits(), l.value.to_bits());
    assert_eq!(g.grad1, l.grad1);
    let gn = nce_loss(&a, &b, Distance::GroupLasso { row_dim: 1 }, 0.7, false).unwrap();
    let ln = nce_loss(&a, &b, Distance::L1, 0.7, false).unwrap();
    assert_eq!(gn.value.to_bits(), ln.value.to_bits());
    assert_eq!(gn.grad1, ln.grad1);
    assert_eq!(gn.grad2, ln.grad2);
}

#[test]
fn recon_examples() {
    let x = m(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
    let xh = m(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
    let (v, g) = recon_loss(&x, &xh).unwrap();
    assert_eq!(v, (4.0 + 9.0) / 2.0);
    assert_eq!(g, m(&[vec![0.0, -2.0], vec![3.0, 0.0]]));
    assert_eq!(recon_loss(&x, &x).unwrap().0, 0.0);
}

#[test]
fn nce_matches_naive_formula() {
    let mut rng = RngStream::new(2, 0);
    for &(tau, excl) in &[(1.0, false), (0.3, false), (2.0, true)] {
        let za = gaussian(&mut rng, 7, 4);
        let z = gaussian(&mut rng, 7, 4);
        let got = nce_loss(&za, &z, Distance::L1, tau, excl).unwrap().value;
        let want = naive_nce(&za, &z, l1, tau, excl);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let got = nce_loss(&za, &z, Distance::GroupLasso { row_dim: 2 }, tau, excl).unwrap().value;
        let want = naive_nce(&za, &z, |a, b| group(a, b, 2), tau, excl);
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn nce_is_stable_for_huge_distances() {
    let za = m(&[vec![0.0], vec![1e4]]);
    let z = m(&[vec![0.0], vec![-1e4]]);
    let pl = nce_loss(&za, &z, Distance::L1, 0.01, false).unwrap();
    assert!(pl.value.is_finite());
    assert!(pl.grad1.is_finite());
}

#[test]
fn nce_needs_enough_rows() {
    let z = Mat::zeros(2, 3);
    assert!(nce_loss(&Mat::zeros(1, 3), &Mat::zeros(1, 3), Distance::L1, 1.0, false).is_err());
    assert!(nce_loss(&z, &z, Distance::L1, 1.0, true).is_err());
    assert!(nce_loss(&z, &z, Distance::L1, 1.0, false).is_ok());
}

#[test]
fn nce_gradients_match_finite_differences() {
    let mut rng = RngStream::new(3, 0);
    let za = gaussian(&mut rng, 5, 4);
    let z = gaussian(&mut rng, 5, 4);
    for dist in [Distance::L1, Distance::GroupLasso { row_dim: 2 }] {
        let pl = nce_loss(&za, &z, dist, 0.5, false).unwrap();
        let g1 = numeric_grad(&za, |p| nce_loss(p, &z, dist, 0.5, false).unwrap().value);
        let g2 = numeric_grad(&z, |p| nce_loss(&za, p, dist, 0.5, false).unwrap().value);
        assert!(close(&pl.grad1, &g1, 1e-6), "{dist:?}");
        assert!(close(&pl.grad2, &g2, 1e-6), "{dist:?}");
    }
}

#[test]
fn simclr_matches_naive_and_finite_differences() {
    let mut rng = RngStream::new(4, 0);
    let za = gaussian(&mut rng, 6, 3);
    let z = gaussian(&mut rng, 6, 3);
    let pl = simclr_inner_loss(&za, &z, 0.2).unwrap();
    let mut want = 0.0;
    for i in 0..6 {
        let s = |j: usize| za.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>() / 0.2;
        let denom = (0..6).map(|j| s(j).exp()).sum::<f64>() / 6.0;
        want += -(s(i).exp() / denom).ln();
    }
    assert!((pl.value - want / 6.0).abs() < 1e-10);
    let g1 = numeric_grad(&za, |p| simclr_inner_loss(p, &z, 0.2).unwrap().value);
    let g2 = numeric_grad(&z, |p| simclr_inner_loss(&za, p, 0.2).unwrap().value);
    assert!(close(&pl.grad1, &g1, 1e-6));
    assert!(close(&pl.grad2, &g2, 1e-6));
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad = [
        LossConfig { tau: 0.0, ..LossConfig::default() },
        LossConfig { lambda_recon: -1.0, ..LossConfig::default() },
        LossConfig { lambda_recon: 0.0, ..LossConfig::default() },
        LossConfig { row_dim: Some(0), kind: LossKind::GroupLassoNce, ..LossConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let nce = LossConfig { kind: LossKind::L1Nce, lambda_recon: 0.0, ..LossConfig::default() };
    assert!(nce.validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nce_lower_bound(seed in 0u64..100_000, b in 2usize..9, tau in 0.05f64..5.0) {
        // With self included, the objective is at least −log(b).
        let mut rng = RngStream::new(seed, 1);
        let za = gaussian(&mut rng, b, 3);
        let z = gaussian(&mut rng, b, 3);
        let v = nce_loss(&za, &z, Distance::L1, tau, false).unwrap().value;
        prop_assert!(v >= -(b as f64).ln() - 1e-12);
        prop_assert!(v <= naive_nce(&za, &z, l1, tau, false) + 1e-9);
    }

    #[test]
    fn l1_is_symmetric_and_scales_with_tau(seed in 0u64..100_000, tau in 0.1f64..10.0) {
        let mut rng = RngStream::new(seed, 2);
        let a = gaussian(&mut rng, 4, 3);
        let b = gaussian(&mut rng, 4, 3);
        let ab = l1_align(&a, &b, tau).unwrap().value;
        let ba = l1_align(&b, &a, tau).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((ab * tau - l1_align(&a, &b, 1.0).unwrap().value).abs() < 1e-10);
    }

    #[test]
    fn group_lasso_triangle_inequality(seed in 0u64..100_000) {
        let mut rng = RngStream::new(seed, 3);
        let a = gaussian(&mut rng, 1, 6);
        let b = gaussian(&mut rng, 1, 6);
        let c = gaussian(&mut rng, 1, 6);
        let d = |x: &Mat, y: &Mat| group_lasso_dist(x, y, 3).unwrap().value;
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }
}
