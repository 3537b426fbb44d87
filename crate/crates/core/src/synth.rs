//! Synthetic worlds: hidden embeddings, block-structured augmentations, datasets, and pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::CoordSet;
use crate::numerics::{condition_number, gaussian, least_squares, matmul, orthonormalize, singular_values, Mat, RngStream};

const MAX_CONDITION: f64 = 1e4;
const GENERATION_TRIES: usize = 100;
const BLOCK_TRIES: usize = 10_000;
const NONLINEAR_GAIN: f64 = 0.3;

/// Stages of a nonlinear embedding, applied before the linear lift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearStages {
    /// One rotation per stage; each stage is `u ↦ σ(R u)` with `σ(u) = u + 0.3·tanh(u)`.
    pub rotations: Vec<Mat>,
}

/// Hidden embedding `h*⁻¹ : ℝⁿ → ℝᵐ` and its left inverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n: usize,
    pub m: usize,
    pub h_inv: Mat,
    pub h: Mat,
    pub nonlinear: Option<NonlinearStages>,
}

pub fn gen_ground_truth(rng: &mut RngStream, n: usize, m: usize) -> Result<GroundTruth> {
    if n == 0 || n >= m {
        return Err(Error::InvalidArgument(format!("need 1 <= n < m, got n = {n}, m = {m}")));
    }
    for _ in 0..GENERATION_TRIES {
        let h_inv = gaussian(rng, m, n);
        if condition_number(&h_inv) > MAX_CONDITION {
            continue;
        }
        let h = least_squares(&h_inv, &Mat::identity(m))?;
        return Ok(GroundTruth {
            n,
            m,
            h_inv,
            h,
            nonlinear: None,
        });
    }
    Err(Error::Generation(format!("no embedding with condition <= {MAX_CONDITION} in {GENERATION_TRIES} draws")))
}

/// Nonlinear embedding: `depth` rotation-plus-squash stages followed by a Gaussian lift.
///
/// The lift is drawn first from the same stream, so `depth = 0` reproduces
/// [`gen_ground_truth`] exactly.
pub fn gen_nonlinear_embedding(rng: &mut RngStream, n: usize, m: usize, depth: usize) -> Result<GroundTruth> {
    let mut gt = gen_ground_truth(rng, n, m)?;
    if depth > 0 {
        let rotations = (0..depth).map(|_| orthonormalize(&gaussian(rng, n, n))).collect();
        gt.nonlinear = Some(NonlinearStages { rotations });
    }
    Ok(gt)
}

fn squash(u: f64) -> f64 {
    u + NONLINEAR_GAIN * u.tanh()
}

/// Inverse of [`squash`] by bisection; the root lies within `NONLINEAR_GAIN` of `y`.
fn unsquash(y: f64) -> f64 {
    let (mut lo, mut hi) = (y - NONLINEAR_GAIN - 1e-9, y + NONLINEAR_GAIN + 1e-9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if squash(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + y.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

impl GroundTruth {
    pub fn is_linear(&self) -> bool {
        self.nonlinear.is_none()
    }

    /// `x = h*⁻¹(z)` row-wise.
    pub fn embed(&self, z: &Mat) -> Result<Mat> {
        let mut u = z.clone();
        if let Some(st) = &self.nonlinear {
            for r in &st.rotations {
                u = u.matmul_t(r)?.map(squash);
            }
        }
        u.matmul_t(&self.h_inv)
    }

    /// `z = h*(x)` row-wise.
    pub fn recover(&self, x: &Mat) -> Result<Mat> {
        let mut u = x.matmul_t(&self.h)?;
        if let Some(st) = &self.nonlinear {
            for r in st.rotations.iter().rev() {
                u = matmul(&u.map(unsquash), r)?;
            }
        }
        Ok(u)
    }
}

/// Options for drawing block augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationOptions {
    pub min_block: usize,
    pub max_block: usize,
    /// Lower bound on the smallest singular value of `B − I`.
    pub singular_floor: f64,
    /// Place the block on a random coordinate subset instead of a contiguous run.
    pub permuted: bool,
}

impl Default for AugmentationOptions {
    fn default() -> Self {
        AugmentationOptions {
            min_block: 1,
            max_block: 1,
            singular_floor: 1e-3,
            permuted: false,
        }
    }
}

/// One block augmentation: identity on `fixed`, the block `B` on the remaining coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub fixed: CoordSet,
    pub block_start: usize,
    pub block_size: usize,
    /// Coordinates the block acts on, in block order.
    pub support: Vec<usize>,
    pub block: Mat,
    pub t_latent: Mat,
    /// `H_inv · T_latent · H`; present once realized against a linear ground truth.
    pub t_ambient: Option<Mat>,
}

/// Block augmentation with a uniform size in `[min_block, max_block]` and a uniform start.
pub fn gen_augmentation(rng: &mut RngStream, n: usize, min_block: usize, max_block: usize) -> Result<AugmentationSpec> {
    gen_augmentation_with(
        rng,
        n,
        &AugmentationOptions {
            min_block,
            max_block,
            ..AugmentationOptions::default()
        },
    )
}

pub fn gen_augmentation_with(rng: &mut RngStream, n: usize, opts: &AugmentationOptions) -> Result<AugmentationSpec> {
    if !(1 <= opts.min_block && opts.min_block <= opts.max_block && opts.max_block <= n) {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= min_block <= max_block <= n, got {}..{} with n = {n}",
            opts.min_block, opts.max_block
        )));
    }
    let size = rng.range_inclusive(opts.min_block, opts.max_block);
    let start = rng.range_inclusive(0, n - size);
    let support: Vec<usize> = if opts.permuted {
        let mut all: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut all);
        let mut s = all[..size].to_vec();
        s.sort_unstable();
        s
    } else {
        (start..start + size).collect()
    };
    let block = draw_block(rng, size, opts.singular_floor)?;
    Ok(assemble(n, start, support, block))
}

/// Block augmentation on an explicit coordinate support.
pub fn gen_augmentation_on(rng: &mut RngStream, n: usize, support: &[usize], floor: f64) -> Result<AugmentationSpec> {
    let mut s = support.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() || s.iter().any(|&i| i >= n) {
        return Err(Error::InvalidArgument(format!("bad support {support:?} for n = {n}")));
    }
    let block = draw_block(rng, s.len(), floor)?;
    Ok(assemble(n, s[0], s, block))
}

fn draw_block(rng: &mut RngStream, size: usize, floor: f64) -> Result<Mat> {
    for _ in 0..BLOCK_TRIES {
        let b = gaussian(rng, size, size);
        let shifted = b.sub(&Mat::identity(size))?;
        let smin_shift = singular_values(&shifted).last().copied().unwrap_or(0.0);
        let smin = singular_values(&b).last().copied().unwrap_or(0.0);
        if smin_shift >= floor && smin >= 1e-3 {
            return Ok(b);
        }
    }
    Err(Error::Generation(format!("no {size}x{size} block with singular floor {floor} in {BLOCK_TRIES} draws")))
}

fn assemble(n: usize, block_start: usize, support: Vec<usize>, block: Mat) -> AugmentationSpec {
    let mut t = Mat::identity(n);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            t.set(i, j, block.get(a, b));
        }
    }
    let mut changed = vec![false; n];
    support.iter().for_each(|&i| changed[i] = true);
    let fixed = CoordSet::from_mask(&changed.iter().map(|c| !c).collect::<Vec<_>>());
    AugmentationSpec {
        fixed,
        block_start,
        block_size: support.len(),
        support,
        block,
        t_latent: t,
        t_ambient: None,
    }
}

impl AugmentationSpec {
    /// Latent identity augmentation.
    pub fn identity(n: usize) -> AugmentationSpec {
        assemble(n, 0, Vec::new(), Mat::zeros(0, 0))
    }

    /// Fills `t_ambient` for a linear ground truth.
    pub fn realize(&mut self, gt: &GroundTruth) -> Result<()> {
        if gt.is_linear() {
            let t = matmul(&matmul(&gt.h_inv, &self.t_latent)?, &gt.h)?;
            self.t_ambient = Some(t);
        }
        Ok(())
    }

    /// Same support, fresh block.
    pub fn resampled(&self, rng: &mut RngStream, floor: f64, gt: &GroundTruth) -> Result<AugmentationSpec> {
        let n = self.t_latent.rows();
        let block = draw_block(rng, self.block_size, floor)?;
        let mut spec = assemble(n, self.block_start, self.support.clone(), block);
        spec.realize(gt)?;
        Ok(spec)
    }

    /// Applies the augmentation to observation rows.
    pub fn apply_ambient(&self, gt: &GroundTruth, x: &Mat) -> Result<Mat> {
        if self.support.is_empty() {
            if x.cols() != gt.m {
                return Err(crate::error::dim_err("apply_ambient", gt.m, x.cols()));
            }
            return Ok(x.clone());
        }
        match (&self.t_ambient, gt.is_linear()) {
            (Some(t), true) => x.matmul_t(t),
            _ => {
                let z = gt.recover(x)?;
                gt.embed(&z.matmul_t(&self.t_latent)?)
            }
        }
    }
}

/// Ground truth plus a fixed augmentation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub gt: GroundTruth,
    pub augs: Vec<AugmentationSpec>,
}

impl World {
    /// Realizes every augmentation against `gt`.
    pub fn new(gt: GroundTruth, mut augs: Vec<AugmentationSpec>) -> Result<World> {
        for a in &mut augs {
            if a.t_latent.rows() != gt.n {
                return Err(crate::error::dim_err("World::new", gt.n, a.t_latent.rows()));
            }
            a.realize(&gt)?;
        }
        Ok(World { gt, augs })
    }

    /// Draws `count` augmentations with `opts` from `rng`.
    pub fn generate(gt: GroundTruth, rng: &mut RngStream, count: usize, opts: &AugmentationOptions) -> Result<World> {
        let augs = (0..count)
            .map(|_| gen_augmentation_with(rng, gt.n, opts))
            .collect::<Result<Vec<_>>>()?;
        World::new(gt, augs)
    }

    pub fn fixed_sets(&self) -> Vec<CoordSet> {
        self.augs.iter().map(|a| a.fixed.clone()).collect()
    }

    pub fn t_latents(&self) -> Vec<Mat> {
        self.augs.iter().map(|a| a.t_latent.clone()).collect()
    }

    /// Applies augmentation `id` (or the identity for `None`) to every row of `x`.
    pub fn apply(&self, id: Option<usize>, x: &Mat) -> Result<Mat> {
        match id {
            None => Ok(x.clone()),
            Some(k) => self
                .augs
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("augmentation {k} does not exist")))?
                .apply_ambient(&self.gt, x),
        }
    }

    /// Copy of the world with every block redrawn on its existing support.
    pub fn resampled(&self, rng: &mut RngStream, floor: f64) -> Result<World> {
        let augs = self
            .augs
            .iter()
            .map(|a| a.resampled(rng, floor, &self.gt))
            .collect::<Result<Vec<_>>>()?;
        Ok(World { gt: self.gt.clone(), augs })
    }
}

/// Latent samples and their observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub z: Mat,
    pub x: Mat,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

pub fn gen_dataset(rng: &mut RngStream, gt: &GroundTruth, samples: usize) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let z = gaussian(rng, samples, gt.n);
    let x = gt.embed(&z)?;
    Ok(Dataset {
        z,
        x,
        seed: rng.seed(),
        n: gt.n,
        m: gt.m,
    })
}

/// Observation rows with their augmented partners.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x: Mat,
    pub x_aug: Mat,
    /// Augmentation used per row; `None` is the identity.
    pub aug_ids: Vec<Option<usize>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Draws rows with replacement and a uniform augmentation per row.
pub fn sample_pairs(rng: &mut RngStream, ds: &Dataset, world: &World, batch: usize, include_identity: bool) -> Result<PairBatch> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.below(ds.len())).collect();
    pairs_for_rows(rng, ds, world, &idx, include_identity)
}

/// Augments the given dataset rows, choosing one augmentation per row uniformly.
pub fn pairs_for_rows(rng: &mut RngStream, ds: &Dataset, world: &World, idx: &[usize], include_identity: bool) -> Result<PairBatch> {
    let choices = world.augs.len() + usize::from(include_identity);
    if choices == 0 {
        return Err(Error::InvalidArgument("no augmentations to sample from".into()));
    }
    let aug_ids: Vec<Option<usize>> = idx
        .iter()
        .map(|_| {
            let c = rng.below(choices);
            (c < world.augs.len()).then_some(c)
        })
        .collect();
    let x = ds.x.select_rows(idx);
    let x_aug = augment_rows(world, &x, &aug_ids)?;
    Ok(PairBatch { x, x_aug, aug_ids })
}

/// Applies a per-row augmentation choice.
pub fn augment_rows(world: &World, x: &Mat, aug_ids: &[Option<usize>]) -> Result<Mat> {
    let mut out = x.clone();
    for (k, aug) in world.augs.iter().enumerate() {
        let rows: Vec<usize> = aug_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == Some(k))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let moved = aug.apply_ambient(&world.gt, &x.select_rows(&rows))?;
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(moved.row(r));
        }
    }
    Ok(out)
}

/// Pairs where every row uses augmentation `id`.
pub fn pairs_for_aug(ds: &Dataset, world: &World, id: Option<usize>) -> Result<PairBatch> {
    let x_aug = world.apply(id, &ds.x)?;
    Ok(PairBatch {
        x: ds.x.clone(),
        x_aug,
        aug_ids: vec![id; ds.len()],
    })
}
