//! Experiment configurations and the world-building pipeline shared by the CLI and tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::model::{LatentLayout, ModelKind, ModelSpec};
use crate::numerics::RngStream;
use crate::synth::{gen_dataset, gen_augmentation_on, gen_nonlinear_embedding, AugmentationOptions, Dataset, World};
use crate::train::TrainConfig;

const GROUND_TRUTH_STREAM: u64 = 10;
const AUGMENTATION_STREAM: u64 = 11;
const DATA_STREAM: u64 = 12;

/// How the augmentation set is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPlan {
    pub count: usize,
    #[serde(flatten)]
    pub options: AugmentationOptions,
    /// Explicit coordinate supports, one augmentation each; overrides `count` when nonempty.
    pub supports: Vec<Vec<usize>>,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            count: 6,
            options: AugmentationOptions {
                min_block: 1,
                max_block: 2,
                singular_floor: 0.5,
                permuted: false,
            },
            supports: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seed of the synthetic world (embedding, augmentations, samples).
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    /// Number of nonlinear stages in the embedding; 0 is linear.
    pub nonlinear_depth: usize,
    pub augmentations: AugmentationPlan,
    /// Two groups of augmentation indices compared by the complementarity score.
    pub families: Option<[Vec<usize>; 2]>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::linear(0)
    }
}

impl ExperimentConfig {
    /// The linear benchmark: n = 6, m = 12, 5000 samples, six block augmentations,
    /// L1 alignment with reconstruction weight 0.05, 1000 epochs of Adam at lr 1e-3.
    pub fn linear(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            n: 6,
            m: 12,
            samples: 5000,
            nonlinear_depth: 0,
            augmentations: AugmentationPlan::default(),
            families: None,
            train: TrainConfig {
                seed,
                loss: LossConfig {
                    kind: LossKind::L1Recon,
                    tau: LINEAR_TAU,
                    lambda_recon: 0.05,
                    row_dim: None,
                    exclude_self: false,
                },
                ..TrainConfig::default()
            },
        }
    }

    /// Two augmentation families with disjoint changed coordinates in `ℝ⁶`: one family moves
    /// `{0,1,2}`, the other `{3,4}`, and coordinate 5 is fixed by both.
    pub fn complementarity(seed: u64, kind: LossKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::linear(seed);
        cfg.augmentations.supports = vec![vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2], vec![3, 4], vec![3, 4], vec![3, 4]];
        cfg.families = Some([vec![0, 1, 2], vec![3, 4, 5]]);
        match kind {
            LossKind::L1Recon => {}
            LossKind::SimclrInner => {
                cfg.train.loss = LossConfig {
                    kind,
                    tau: 0.1,
                    lambda_recon: 0.0,
                    row_dim: None,
                    exclude_self: false,
                };
                cfg.train.model = ModelSpec {
                    kind: ModelKind::Linear,
                    layout: LatentLayout::Flat,
                    row_normalize: true,
                    ..ModelSpec::default()
                };
            }
            other => {
                cfg.train.loss.kind = other;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n >= self.m {
            return Err(Error::InvalidArgument(format!("need 1 <= n < m, got n = {}, m = {}", self.n, self.m)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument("samples must be >= 1".into()));
        }
        for s in &self.augmentations.supports {
            if s.is_empty() || s.iter().any(|&i| i >= self.n) {
                return Err(Error::InvalidArgument(format!("bad augmentation support {s:?}")));
            }
        }
        if let Some(fams) = &self.families {
            let count = self.augmentation_count();
            if fams.iter().flatten().any(|&k| k >= count) || fams.iter().any(Vec::is_empty) {
                return Err(Error::InvalidArgument("family indices must name existing augmentations".into()));
            }
        }
        self.train.validate()
    }

    pub fn augmentation_count(&self) -> usize {
        if self.augmentations.supports.is_empty() {
            self.augmentations.count
        } else {
            self.augmentations.supports.len()
        }
    }
}

/// L1 temperature of the linear benchmark.
pub const LINEAR_TAU: f64 = 3.0;

/// Builds the ground truth, augmentation set, and dataset for `cfg`.
pub fn build_world(cfg: &ExperimentConfig) -> Result<(World, Dataset)> {
    cfg.validate()?;
    let mut gt_rng = RngStream::new(cfg.seed, GROUND_TRUTH_STREAM);
    let gt = gen_nonlinear_embedding(&mut gt_rng, cfg.n, cfg.m, cfg.nonlinear_depth)?;
    let mut aug_rng = RngStream::new(cfg.seed, AUGMENTATION_STREAM);
    let plan = &cfg.augmentations;
    let world = if plan.supports.is_empty() {
        World::generate(gt, &mut aug_rng, plan.count, &plan.options)?
    } else {
        let augs = plan
            .supports
            .iter()
            .map(|s| gen_augmentation_on(&mut aug_rng, cfg.n, s, plan.options.singular_floor))
            .collect::<Result<Vec<_>>>()?;
        World::new(gt, augs)?
    };
    let mut data_rng = RngStream::new(cfg.seed, DATA_STREAM);
    let ds = gen_dataset(&mut data_rng, &world.gt, cfg.samples)?;
    Ok((world, ds))
}
