use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use invlab::analyze::L0Variant;
use invlab::experiment::ExperimentConfig;
use invlab::loss::LossKind;
use invlab::model::ModelKind;

mod job;
mod manifest;

use job::{execute, execute_train_resuming, load_data, Job};
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "invlab", version, about = "Learn and check invariance-adapted latent decompositions")]
struct Cli {
    /// Root for default output directories.
    #[arg(long, env = "INVLAB_OUT", default_value = "invlab-out", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and dataset.
    Gen {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train an encoder.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Directory written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every this many epochs.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a trained encoder against its generating world.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Directory written by `gen`; defaults to the one the run was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Second trained run for the cross-model score.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Config file; defaults to the run's recorded config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the invariance-frequency table of a family of fixed sets.
    Spectrum {
        /// Latent dimension.
        #[arg(long)]
        n: Option<usize>,
        /// Fixed coordinate sets, `;`-separated, each a `,`-separated list (`-` for empty).
        #[arg(long)]
        sets: Option<String>,
        /// Take the fixed sets from a `gen` directory instead.
        #[arg(long, conflicts_with = "sets")]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Search bases minimizing the L0 objective for planted augmentations.
    Oracle {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random augmentations when `--supports` is absent.
        #[arg(long, default_value_t = 2)]
        augs: usize,
        /// Moved coordinates of each augmentation, `;`-separated.
        #[arg(long)]
        supports: Option<String>,
        /// Random invertible bases compared against the optimum.
        #[arg(long, default_value_t = 1000)]
        random_bases: usize,
        /// Count nonzero rows or columns of the conjugated action.
        #[arg(long, default_value = "rows", value_parser = parse_enum::<L0Variant>)]
        variant: L0Variant,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the eigenvalue table of the cyclic shift on the Fourier basis.
    DftDemo {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run gen, train, and eval on the linear benchmark and print the acceptance table.
    ReproLinear {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rerun the command recorded in a manifest.
    Replay {
        /// `manifest.json` or the directory holding it.
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Experiment settings. Flags override the config file, which overrides the defaults.
#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// World seed; also the model seed unless `--init-seed` is given.
    #[arg(long)]
    seed: Option<u64>,
    /// Model initialization and batching seed.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Nonlinear stages in the embedding.
    #[arg(long)]
    depth: Option<usize>,
    /// Number of random augmentations.
    #[arg(long)]
    augs: Option<usize>,
    #[arg(long)]
    max_block: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Reconstruction weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_enum::<LossKind>)]
    loss: Option<LossKind>,
    #[arg(long, value_parser = parse_enum::<ModelKind>)]
    model: Option<ModelKind>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
}

/// Parses a snake_case serde enum name; dashes are accepted for underscores.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed config {}", path.display()))
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => read_config(p)?,
            None => ExperimentConfig::linear(self.seed.unwrap_or(0)),
        };
        self.apply(base)
    }

    fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(s) = self.init_seed {
            cfg.train.seed = s;
        }
        set(&mut cfg.n, self.n);
        set(&mut cfg.m, self.m);
        set(&mut cfg.samples, self.samples);
        set(&mut cfg.nonlinear_depth, self.depth);
        set(&mut cfg.augmentations.count, self.augs);
        set(&mut cfg.augmentations.options.max_block, self.max_block);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.train.batch, self.batch);
        set(&mut cfg.train.loss.tau, self.tau);
        set(&mut cfg.train.loss.lambda_recon, self.lambda);
        set(&mut cfg.train.loss.kind, self.loss);
        set(&mut cfg.train.model.kind, self.model);
        set(&mut cfg.train.model.hidden_width, self.hidden_width);
        set(&mut cfg.train.model.hidden_layers, self.hidden_layers);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses `0,1,2;3;-` into coordinate lists.
fn parse_sets(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|part| {
            let part = part.trim();
            if part.is_empty() || part == "-" {
                return Ok(Vec::new());
            }
            part.split(',')
                .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad coordinate {t:?} in {s:?}")))
                .collect()
        })
        .collect()
}

fn existing(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).with_context(|| format!("{} does not exist", path.display()))
}

/// Turns parsed arguments into a job and its output directory.
fn plan(cli: Cli) -> Result<(Job, PathBuf, bool)> {
    let root = cli.out_root;
    let pick = |dir: Option<PathBuf>, job: &Job| dir.unwrap_or_else(|| root.join(job.default_dir_name()));
    let planned = match cli.command {
        Command::Gen { exp, out_dir } => {
            let job = Job::Gen { config: exp.resolve()? };
            (pick(out_dir, &job), job, false)
        }
        Command::Train {
            exp,
            data,
            resume,
            checkpoint_every,
            out_dir,
        } => {
            let data = data.as_deref().map(existing).transpose()?;
            let config = match (&data, &exp.config) {
                (Some(d), None) => exp.apply(load_data(d)?.0)?,
                _ => exp.resolve()?,
            };
            let job = Job::Train {
                config,
                data,
                checkpoint_every,
            };
            (pick(out_dir, &job), job, resume)
        }
        Command::Eval {
            run,
            data,
            compare,
            config,
            out_dir,
        } => {
            let run = existing(&run)?;
            let recorded = Manifest::read(&run).ok();
            let (recorded_cfg, recorded_data) = match recorded.map(|m| m.job) {
                Some(Job::Train { config, data, .. }) => (Some(config), data),
                _ => (None, None),
            };
            let config = match config {
                Some(p) => read_config(&p)?,
                None => recorded_cfg.context("no --config given and the run has no train manifest")?,
            };
            let data = match data {
                Some(d) => Some(existing(&d)?),
                None => recorded_data,
            };
            let compare = compare.as_deref().map(existing).transpose()?;
            let job = Job::Eval { config, run, data, compare };
            (pick(out_dir, &job), job, false)
        }
        Command::Spectrum { n, sets, data, out_dir } => {
            let (n, sets) = match (sets, data) {
                (Some(s), _) => (n.context("--sets needs --n")?, parse_sets(&s)?),
                (None, Some(d)) => {
                    let (_, world, _) = load_data(&existing(&d)?)?;
                    (world.gt.n, world.fixed_sets().iter().map(|s| s.indices().to_vec()).collect())
                }
                (None, None) => bail!("spectrum needs --sets or --data"),
            };
            let job = Job::Spectrum { n, sets };
            (pick(out_dir, &job), job, false)
        }
        Command::Oracle {
            n,
            seed,
            augs,
            supports,
            random_bases,
            variant,
            out_dir,
        } => {
            let supports = supports.as_deref().map(parse_sets).transpose()?.unwrap_or_default();
            let job = Job::Oracle {
                n,
                seed,
                augs,
                supports,
                random_bases,
                variant,
            };
            (pick(out_dir, &job), job, false)
        }
        Command::DftDemo { n, out_dir } => {
            let job = Job::DftDemo { n };
            (pick(out_dir, &job), job, false)
        }
        Command::ReproLinear { exp, out_dir } => {
            let mut exp = exp;
            if exp.seed.is_none() && exp.config.is_none() {
                exp.seed = Some(7);
            }
            let job = Job::ReproLinear { config: exp.resolve()? };
            (pick(out_dir, &job), job, false)
        }
        Command::Replay { manifest, out_dir } => {
            let m = Manifest::read(&manifest)?;
            if m.version != manifest::VERSION {
                eprintln!("warning: manifest written by version {}, running {}", m.version, manifest::VERSION);
            }
            let dir = match out_dir {
                Some(d) => d,
                None => root.join(format!("{}-replay", m.job.default_dir_name())),
            };
            (dir, m.job, false)
        }
    };
    let (dir, job, resume) = planned;
    Ok((job, dir, resume))
}

fn run(cli: Cli) -> Result<()> {
    let (job, dir, resume) = plan(cli)?;
    if resume {
        execute_train_resuming(&job, &dir)
    } else {
        execute(&job, &dir)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
