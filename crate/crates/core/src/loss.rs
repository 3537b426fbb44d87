//! Alignment distances, reconstruction, and the contrastive objectives.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::mix_bit;
use crate::numerics::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// L1 alignment plus weighted reconstruction.
    L1Recon,
    /// NCE with the group-lasso distance.
    GroupLassoNce,
    /// NCE with the L1 distance.
    L1Nce,
    /// NCE with inner-product similarity on normalized latents.
    SimclrInner,
}

impl LossKind {
    pub fn is_nce(self) -> bool {
        !matches!(self, LossKind::L1Recon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau: f64,
    pub lambda_recon: f64,
    /// Row length for the group-lasso distance; `None` uses the model's latent row length.
    pub row_dim: Option<usize>,
    /// Drop `j = i` from the NCE denominator.
    pub exclude_self: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::L1Recon,
            tau: 1.0,
            lambda_recon: 0.05,
            row_dim: None,
            exclude_self: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_recon must be >= 0, got {}", self.lambda_recon)));
        }
        if self.lambda_recon == 0.0 && !self.kind.is_nce() {
            return Err(Error::InvalidArgument("l1_recon needs lambda_recon > 0".into()));
        }
        if self.row_dim == Some(0) {
            return Err(Error::InvalidArgument("row_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Value and gradients of a two-argument loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad1: Mat,
    pub grad2: Mat,
}

/// Distance used inside the NCE objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    L1,
    GroupLasso { row_dim: usize },
}

fn check_pair(z1: &Mat, z2: &Mat, op: &'static str) -> Result<()> {
    if z1.shape() != z2.shape() {
        return Err(dim_err(op, format!("{:?}", z1.shape()), format!("{:?}", z2.shape())));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Distance between two latent rows, writing `∂d/∂a` into `grad` (`∂d/∂b = −grad`).
fn distance(a: &[f64], b: &[f64], kind: Distance, grad: &mut [f64]) -> f64 {
    match kind {
        Distance::L1 => {
            let mut s = 0.0;
            for ((g, x), y) in grad.iter_mut().zip(a).zip(b) {
                let d = x - y;
                s += d.abs();
                *g = sign(d);
            }
            s
        }
        Distance::GroupLasso { row_dim } => {
            let mut s = 0.0;
            for ((ga, xa), ya) in grad.chunks_mut(row_dim).zip(a.chunks(row_dim)).zip(b.chunks(row_dim)) {
                if row_dim == 1 {
                    let d = xa[0] - ya[0];
                    s += d.abs();
                    ga[0] = sign(d);
                    continue;
                }
                let nrm = xa.iter().zip(ya).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                s += nrm;
                for ((g, x), y) in ga.iter_mut().zip(xa).zip(ya) {
                    *g = if nrm > 0.0 { (x - y) / nrm } else { 0.0 };
                }
            }
            s
        }
    }
}

fn check_divisible(len: usize, row_dim: usize) -> Result<()> {
    if row_dim == 0 || !len.is_multiple_of(row_dim) {
        return Err(Error::InvalidArgument(format!("latent length {len} is not divisible by row_dim {row_dim}")));
    }
    Ok(())
}

fn paired_distance(z1: &Mat, z2: &Mat, kind: Distance, scale: f64) -> PairLoss {
    let b = z1.rows();
    let mut grad1 = Mat::zeros(z1.rows(), z1.cols());
    let mut total = 0.0;
    for i in 0..b {
        total += distance(z1.row(i), z2.row(i), kind, grad1.row_mut(i));
    }
    let w = scale / b as f64;
    grad1.data_mut().iter_mut().for_each(|g| *g *= w);
    let grad2 = grad1.scale(-1.0);
    PairLoss {
        value: total * w,
        grad1,
        grad2,
    }
}

/// Mean over the batch of `‖z1 − z2‖₁ / τ`, with `sign(0) = 0`.
pub fn l1_align(z1: &Mat, z2: &Mat, tau: f64) -> Result<PairLoss> {
    check_pair(z1, z2, "l1_align")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if z1.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(paired_distance(z1, z2, Distance::L1, 1.0 / tau))
}

/// Mean over the batch of `Σ_k ‖row_k(z1) − row_k(z2)‖₂`.
pub fn group_lasso_dist(z1: &Mat, z2: &Mat, row_dim: usize) -> Result<PairLoss> {
    check_pair(z1, z2, "group_lasso_dist")?;
    check_divisible(z1.cols(), row_dim)?;
    if z1.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(paired_distance(z1, z2, Distance::GroupLasso { row_dim }, 1.0))
}

/// Mean over the batch of `‖x̂ − x‖²`, with the gradient with respect to `x̂`.
pub fn recon_loss(x: &Mat, x_hat: &Mat) -> Result<(f64, Mat)> {
    check_pair(x, x_hat, "recon_loss")?;
    let b = x.rows().max(1) as f64;
    let diff = x_hat.sub(x)?;
    let value = diff.data().iter().map(|v| v * v).sum::<f64>() / b;
    Ok((value, diff.scale(2.0 / b)))
}

fn log_mean_exp_softmax(a: &[f64], include: impl Fn(usize) -> bool, probs: &mut [f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    let mut count = 0usize;
    for (j, &v) in a.iter().enumerate() {
        if include(j) {
            mx = mx.max(v);
            count += 1;
        }
    }
    let mut sum = 0.0;
    for (j, &v) in a.iter().enumerate() {
        probs[j] = if include(j) { (v - mx).exp() } else { 0.0 };
        sum += probs[j];
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    mx + sum.ln() - (count as f64).ln()
}

fn check_contrastive(z_aug: &Mat, z: &Mat, tau: f64, exclude_self: bool, op: &'static str) -> Result<()> {
    check_pair(z_aug, z, op)?;
    let min = if exclude_self { 3 } else { 2 };
    if z.rows() < min {
        return Err(Error::InvalidArgument(format!("{op} needs a batch of at least {min}, got {}", z.rows())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// `−mean_i log[exp(−d(z_aug_i, z_i)/τ) / mean_j exp(−d(z_aug_i, z_j)/τ)]`.
///
/// Negatives are all in-batch rows of `z`, including `j = i` unless `exclude_self`.
pub fn nce_loss(z_aug: &Mat, z: &Mat, dist: Distance, tau: f64, exclude_self: bool) -> Result<PairLoss> {
    check_contrastive(z_aug, z, tau, exclude_self, "nce_loss")?;
    if let Distance::GroupLasso { row_dim } = dist {
        check_divisible(z.cols(), row_dim)?;
    }
    let (b, n) = z.shape();
    let mut grad1 = Mat::zeros(b, n);
    let mut grad2 = Mat::zeros(b, n);
    let mut dgrads = vec![vec![0.0; n]; b];
    let mut logits = vec![0.0; b];
    let mut probs = vec![0.0; b];
    let mut total = 0.0;
    let w = 1.0 / (b as f64 * tau);
    for i in 0..b {
        let za = z_aug.row(i);
        let mut d_pos = 0.0;
        for j in 0..b {
            let d = distance(za, z.row(j), dist, &mut dgrads[j]);
            logits[j] = -d / tau;
            if j == i {
                d_pos = d;
            }
        }
        let lme = log_mean_exp_softmax(&logits, |j| !(exclude_self && j == i), &mut probs);
        total += d_pos / tau + lme;
        // ∂/∂d_ij of the row-i term, divided by the batch size.
        for j in 0..b {
            let coef = w * (f64::from(u8::from(j == i)) - probs[j]);
            if coef == 0.0 {
                continue;
            }
            for k in 0..n {
                let g = coef * dgrads[j][k];
                grad1.data_mut()[i * n + k] += g;
                grad2.data_mut()[j * n + k] -= g;
            }
        }
    }
    Ok(PairLoss {
        value: total / b as f64,
        grad1,
        grad2,
    })
}

/// NCE with similarity `aᵀb/τ`; the caller normalizes rows.
pub fn simclr_inner_loss(z_aug: &Mat, z: &Mat, tau: f64) -> Result<PairLoss> {
    check_contrastive(z_aug, z, tau, false, "simclr_inner_loss")?;
    let (b, n) = z.shape();
    let mut grad1 = Mat::zeros(b, n);
    let mut grad2 = Mat::zeros(b, n);
    let mut logits = vec![0.0; b];
    let mut probs = vec![0.0; b];
    let mut total = 0.0;
    let w = 1.0 / (b as f64 * tau);
    for i in 0..b {
        let za = z_aug.row(i);
        for j in 0..b {
            logits[j] = dot(za, z.row(j)) / tau;
        }
        let lme = log_mean_exp_softmax(&logits, |_| true, &mut probs);
        total += lme - logits[i];
        for j in 0..b {
            let coef = w * (probs[j] - f64::from(u8::from(j == i)));
            for k in 0..n {
                grad1.data_mut()[i * n + k] += coef * z.get(j, k);
                grad2.data_mut()[j * n + k] += coef * za[k];
            }
        }
    }
    Ok(PairLoss {
        value: total / b as f64,
        grad1,
        grad2,
    })
}

/// Smallest distance from a kink over the distance arguments between `za` and `z` rows,
/// with a hash of the active piece. `all_pairs` covers every `(i, j)`, otherwise `(i, i)`.
pub fn distance_kinks(z_aug: &Mat, z: &Mat, dist: Distance, all_pairs: bool, hash: &mut u64) -> f64 {
    let b = z.rows();
    let mut margin = f64::INFINITY;
    for i in 0..b {
        let js: Vec<usize> = if all_pairs { (0..b).collect() } else { vec![i] };
        for j in js {
            let (a, c) = (z_aug.row(i), z.row(j));
            match dist {
                Distance::L1 => {
                    for (x, y) in a.iter().zip(c) {
                        let d = x - y;
                        margin = margin.min(d.abs());
                        mix_bit(hash, d > 0.0);
                    }
                }
                Distance::GroupLasso { row_dim } => {
                    for (xa, ya) in a.chunks(row_dim).zip(c.chunks(row_dim)) {
                        let nrm = xa.iter().zip(ya).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                        margin = margin.min(nrm);
                        if row_dim == 1 {
                            mix_bit(hash, xa[0] > ya[0]);
                        }
                    }
                }
            }
        }
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    #[test]
    fn l1_arithmetic() {
        let v = l1_align(&m(&[vec![1.0, 2.0]]), &m(&[vec![1.0, 3.0]]), 1.0).unwrap();
        assert_eq!(v.value, 1.0);
        assert_eq!(v.grad1.data(), &[0.0, -1.0]);
    }

    #[test]
    fn three_four_five() {
        let z1 = m(&[vec![3.0, 4.0, 0.0, 0.0]]);
        let z2 = Mat::zeros(1, 4);
        assert_eq!(group_lasso_dist(&z1, &z2, 2).unwrap().value, 5.0);
        assert!(group_lasso_dist(&z1, &z2, 3).is_err());
    }

    #[test]
    fn nce_small_batch_rejected() {
        let z = Mat::zeros(1, 2);
        assert!(nce_loss(&z, &z, Distance::L1, 1.0, false).is_err());
        assert!(simclr_inner_loss(&z, &z, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::default();
        assert!(c.validate().is_ok());
        c.lambda_recon = 0.0;
        assert!(c.validate().is_err());
        c.kind = LossKind::L1Nce;
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }
}
