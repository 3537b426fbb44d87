//! Adam, the composite objective, and the deterministic epoch loop.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{distance_kinks, group_lasso_dist, l1_align, nce_loss, recon_loss, simclr_inner_loss, Distance, LossConfig, LossKind};
use crate::model::{EncoderModel, Evaluation, GradBuffer, ModelSpec};
use crate::numerics::{Mat, RngStream};
use crate::synth::{pairs_for_rows, Dataset, PairBatch, World};

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const INIT_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one vector per parameter slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn for_model(model: &EncoderModel) -> AdamState {
        let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        AdamState::new(&sizes)
    }
}

/// One bias-corrected Adam update over matching parameter and gradient slices.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(crate::error::dim_err("adam_step", params.len(), grads.len()));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(crate::error::dim_err("adam_step", p.len(), g.len()));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient slice {k} entry {j} at step {}", state.t + 1)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelSpec,
    /// Latent dimension; `None` uses the dataset's.
    pub latent_dim: Option<usize>,
    pub include_identity: bool,
    /// Redraw every block on its support before each batch.
    pub resample_blocks: bool,
    pub resample_floor: f64,
    /// Record a held-out objective snapshot every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch: 256,
            epochs: 1000,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelSpec::default(),
            latent_dim: None,
            include_identity: false,
            resample_blocks: false,
            resample_floor: 1e-3,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }

    fn min_batch(&self) -> usize {
        if self.loss.kind.is_nce() {
            2 + usize::from(self.loss.exclude_self)
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::InvalidArgument("eps_adam must be positive".into()));
        }
        if self.batch < self.min_batch() {
            return Err(Error::InvalidArgument(format!("batch must be >= {} for this loss", self.min_batch())));
        }
        if self.loss.kind == LossKind::SimclrInner && !self.model.row_normalize {
            return Err(Error::InvalidArgument("simclr_inner expects row_normalize".into()));
        }
        Ok(())
    }
}

/// Objective value split into its parts, with gradients and kink diagnostics.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub alignment: f64,
    pub anti_degeneration: f64,
    pub total: f64,
    pub grads: GradBuffer,
    pub kink_margin: f64,
    pub pattern: u64,
}

impl From<ObjectiveEval> for Evaluation {
    fn from(o: ObjectiveEval) -> Evaluation {
        Evaluation {
            value: o.total,
            grads: o.grads,
            kink_margin: o.kink_margin,
            pattern: o.pattern,
        }
    }
}

/// Evaluates the configured objective on one batch of pairs.
pub fn evaluate_objective(model: &EncoderModel, loss: &LossConfig, batch: &PairBatch) -> Result<ObjectiveEval> {
    let with_dec = loss.lambda_recon > 0.0;
    let p1 = model.forward(&batch.x, with_dec)?;
    let p2 = model.forward(&batch.x_aug, false)?;
    let (z, za) = (p1.z(), p2.z());
    let row_dim = loss.row_dim.unwrap_or_else(|| model.row_dim());
    let mut pattern = 0xcbf2_9ce4_8422_2325u64;
    let mut margin = model.kink_margin(&p1).min(model.kink_margin(&p2));
    model.activation_pattern(&p1, &mut pattern);
    model.activation_pattern(&p2, &mut pattern);
    let (pair, alignment) = match loss.kind {
        LossKind::L1Recon => {
            let pl = l1_align(za, z, loss.tau)?;
            margin = margin.min(distance_kinks(za, z, Distance::L1, false, &mut pattern));
            let v = pl.value;
            (pl, v)
        }
        LossKind::L1Nce | LossKind::GroupLassoNce => {
            let dist = if loss.kind == LossKind::L1Nce {
                Distance::L1
            } else {
                Distance::GroupLasso { row_dim }
            };
            let pl = nce_loss(za, z, dist, loss.tau, loss.exclude_self)?;
            margin = margin.min(distance_kinks(za, z, dist, true, &mut pattern));
            let positive = match dist {
                Distance::L1 => l1_align(za, z, loss.tau)?.value,
                Distance::GroupLasso { row_dim } => group_lasso_dist(za, z, row_dim)?.value / loss.tau,
            };
            (pl, positive)
        }
        LossKind::SimclrInner => {
            let pl = simclr_inner_loss(za, z, loss.tau)?;
            let b = z.rows() as f64;
            let positive = -(0..z.rows()).map(|i| crate::numerics::dot(za.row(i), z.row(i))).sum::<f64>() / (b * loss.tau);
            (pl, positive)
        }
    };
    let mut recon = 0.0;
    let mut dxhat = None;
    if let Some(x_hat) = p1.x_hat() {
        let (r, g) = recon_loss(&batch.x, x_hat)?;
        recon = loss.lambda_recon * r;
        dxhat = Some(g.scale(loss.lambda_recon));
    }
    let mut grads = model.backward(&p1, &pair.grad2, dxhat.as_ref())?;
    grads.add_assign(&model.backward(&p2, &pair.grad1, None)?)?;
    Ok(ObjectiveEval {
        alignment,
        anti_degeneration: pair.value - alignment + recon,
        total: pair.value + recon,
        grads,
        kink_margin: margin,
        pattern,
    })
}

/// Per-epoch means of the objective parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub alignment: f64,
    pub anti_degeneration: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// `(epoch, total)` of the held-out objective snapshots.
    pub snapshots: Vec<(usize, f64)>,
    pub wall_clock_secs: f64,
}

pub const CURVE_HEADER: &str = "epoch,alignment,anti_degeneration,total";

impl EpochStats {
    pub fn csv_line(&self) -> String {
        format!("{},{:.16e},{:.16e},{:.16e}", self.epoch, self.alignment, self.anti_degeneration, self.total)
    }
}

impl TrainReport {
    pub fn final_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    /// Loss curve in CSV form.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.csv_line());
            s.push('\n');
        }
        s
    }

    /// Parses a loss curve written by [`TrainReport::curve_csv`] or an appending trainer.
    pub fn from_curve_csv(text: &str) -> Result<TrainReport> {
        let mut lines = text.lines();
        if lines.next() != Some(CURVE_HEADER) {
            return Err(Error::Parse("missing loss curve header".into()));
        }
        let mut epochs = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |k: usize| -> Result<f64> { f.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse(format!("bad curve line {line:?}"))) };
            epochs.push(EpochStats {
                epoch: f[0].parse().map_err(|_| Error::Parse(format!("bad epoch in {line:?}")))?,
                alignment: num(1)?,
                anti_degeneration: num(2)?,
                total: num(3)?,
            });
        }
        Ok(TrainReport {
            epochs,
            ..TrainReport::default()
        })
    }

    /// Trailing moving average of the total loss over `window` epochs.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let t: Vec<f64> = self.epochs.iter().map(|e| e.total).collect();
        (window.max(1)..=t.len())
            .map(|end| t[end - window.max(1)..end].iter().sum::<f64>() / window.max(1) as f64)
            .collect()
    }
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: EncoderModel,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub report: TrainReport,
    curve_path: Option<PathBuf>,
}

impl Trainer {
    /// Fresh model initialized from the configured seed.
    pub fn new(config: TrainConfig, ds: &Dataset) -> Result<Trainer> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed, INIT_STREAM);
        let latent = config.latent_dim.unwrap_or(ds.n);
        let model = EncoderModel::init(&config.model, ds.m, latent, &mut rng)?;
        Ok(Trainer::with_model(config, model))
    }

    /// Starts from a given model.
    pub fn with_model(config: TrainConfig, model: EncoderModel) -> Trainer {
        let adam = AdamState::for_model(&model);
        Trainer {
            config,
            model,
            adam,
            epoch: 0,
            report: TrainReport::default(),
            curve_path: None,
        }
    }

    /// Appends one CSV line per finished epoch to `path`, writing the header if the file is new.
    pub fn append_curve_to(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            std::fs::write(&path, format!("{CURVE_HEADER}\n"))?;
        }
        self.curve_path = Some(path);
        Ok(())
    }

    /// Runs one shuffled sweep over the dataset.
    pub fn run_epoch(&mut self, ds: &Dataset, world: &World) -> Result<EpochStats> {
        let mut rng = RngStream::new(self.config.seed, EPOCH_STREAM).child(self.epoch as u64);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut order);
        let adam_cfg = self.config.adam();
        let (mut a_sum, mut d_sum, mut t_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch) {
            if chunk.len() < self.config.min_batch() {
                continue;
            }
            let batch = if self.config.resample_blocks {
                let w = world.resampled(&mut rng, self.config.resample_floor)?;
                pairs_for_rows(&mut rng, ds, &w, chunk, self.config.include_identity)?
            } else {
                pairs_for_rows(&mut rng, ds, world, chunk, self.config.include_identity)?
            };
            let ev = evaluate_objective(&self.model, &self.config.loss, &batch)?;
            if !ev.total.is_finite() || ev.total.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    loss: ev.total,
                });
            }
            let grads = ev.grads.slices();
            let mut params = self.model.param_slices_mut();
            adam_step(&mut params, &grads, &mut self.adam, &adam_cfg)?;
            let w = chunk.len() as f64;
            a_sum += ev.alignment * w;
            d_sum += ev.anti_degeneration * w;
            t_sum += ev.total * w;
            seen += chunk.len();
        }
        let s = seen.max(1) as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            alignment: a_sum / s,
            anti_degeneration: d_sum / s,
            total: t_sum / s,
        };
        self.epoch += 1;
        self.report.epochs.push(stats);
        if let Some(p) = &self.curve_path {
            let mut f = OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", stats.csv_line())?;
        }
        if self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every) {
            let total = self.snapshot(ds, world)?;
            self.report.snapshots.push((self.epoch, total));
        }
        Ok(stats)
    }

    /// Objective on a fixed held-out pairing of the first rows of the dataset.
    pub fn snapshot(&self, ds: &Dataset, world: &World) -> Result<f64> {
        let mut rng = RngStream::new(self.config.seed, EPOCH_STREAM).child(u64::MAX);
        let rows: Vec<usize> = (0..ds.len().min(1024)).collect();
        let batch = pairs_for_rows(&mut rng, ds, world, &rows, self.config.include_identity)?;
        Ok(evaluate_objective(&self.model, &self.config.loss, &batch)?.total)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, ds: &Dataset, world: &World) -> Result<()> {
        let start = Instant::now();
        while self.epoch < self.config.epochs {
            self.run_epoch(ds, world)?;
        }
        self.report.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Writes model weights and optimizer state.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        let state = OptimizerRecord {
            epoch: self.epoch,
            t: self.adam.t,
        };
        std::fs::write(dir.join("optimizer.json"), serde_json::to_string_pretty(&state)? + "\n")?;
        for (k, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            Mat::from_vec(2, m.len(), [m.as_slice(), v.as_slice()].concat())?.write_csv(dir.join(format!("adam_{k}.csv")))?;
        }
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(config: TrainConfig, dir: impl AsRef<Path>) -> Result<Trainer> {
        let dir = dir.as_ref();
        let model = EncoderModel::load(dir)?;
        let rec: OptimizerRecord = serde_json::from_str(&std::fs::read_to_string(dir.join("optimizer.json"))?)?;
        let mut adam = AdamState::for_model(&model);
        adam.t = rec.t;
        for k in 0..adam.m.len() {
            let mv = Mat::read_csv(dir.join(format!("adam_{k}.csv")))?;
            adam.m[k] = mv.row(0).to_vec();
            adam.v[k] = mv.row(1).to_vec();
        }
        let mut t = Trainer::with_model(config, model);
        t.adam = adam;
        t.epoch = rec.epoch;
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerRecord {
    epoch: usize,
    t: u64,
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(config: &TrainConfig, ds: &Dataset, world: &World) -> Result<(EncoderModel, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut t = Trainer::new(config.clone(), ds)?;
    t.run(ds, world)?;
    Ok((t.model, t.report))
}
