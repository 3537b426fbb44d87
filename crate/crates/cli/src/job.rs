use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use invlab::analyze::{
    complementarity_score, cross_identifiability, delta_heatmap, evaluate_run, l0_objective, oracle_search,
    preserves_partition, L0Variant, Metrics, RunEvaluation, SearchMode, L0_TOL,
};
use invlab::experiment::{build_world, ExperimentConfig};
use invlab::frequency::{dft_shift_spectrum, frequencies_from_sets, spectrum_table, CoordSet};
use invlab::numerics::{gaussian, Mat, RngStream};
use invlab::synth::{gen_augmentation_on, gen_augmentation_with, pairs_for_aug, AugmentationOptions, AugmentationSpec, Dataset, PairBatch, World};
use invlab::train::{Trainer, CURVE_HEADER};
use invlab::EncoderModel;

use crate::manifest::Manifest;

const ORACLE_AUG_STREAM: u64 = 20;
const ORACLE_BASIS_STREAM: u64 = 21;
/// Rows shown in each change heatmap.
const HEATMAP_ROWS: usize = 256;
/// Tolerance for the partition check on oracle minimizers.
const PARTITION_TOL: f64 = 1e-9;

/// A fully resolved command: every default and flag already folded in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Gen {
        config: ExperimentConfig,
    },
    Train {
        config: ExperimentConfig,
        /// Directory written by `gen`; the world is rebuilt from `config` when absent.
        data: Option<PathBuf>,
        checkpoint_every: usize,
    },
    Eval {
        config: ExperimentConfig,
        run: PathBuf,
        data: Option<PathBuf>,
        /// Second trained run for the cross-model score.
        compare: Option<PathBuf>,
    },
    Spectrum {
        n: usize,
        /// Fixed coordinate set of each augmentation.
        sets: Vec<Vec<usize>>,
    },
    Oracle {
        n: usize,
        seed: u64,
        augs: usize,
        /// Moved coordinates of each planted augmentation; drawn at random when empty.
        supports: Vec<Vec<usize>>,
        random_bases: usize,
        variant: L0Variant,
    },
    DftDemo {
        n: usize,
    },
    ReproLinear {
        config: ExperimentConfig,
    },
}

impl Job {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Gen { config } | Job::Train { config, .. } | Job::Eval { config, .. } | Job::ReproLinear { config } => Some(config.seed),
            Job::Oracle { seed, .. } => Some(*seed),
            Job::Spectrum { .. } | Job::DftDemo { .. } => None,
        }
    }

    /// Directory name used under the output root when `--out-dir` is not given.
    pub fn default_dir_name(&self) -> String {
        match self {
            Job::Gen { config } => format!("gen-seed{}", config.seed),
            Job::Train { config, .. } => format!("train-seed{}-init{}", config.seed, config.train.seed),
            Job::Eval { config, .. } => format!("eval-seed{}", config.seed),
            Job::Spectrum { n, .. } => format!("spectrum-n{n}"),
            Job::Oracle { n, seed, .. } => format!("oracle-n{n}-seed{seed}"),
            Job::DftDemo { n } => format!("dft-n{n}"),
            Job::ReproLinear { config } => format!("repro-linear-seed{}", config.seed),
        }
    }
}

/// Artifact directory that remembers what was written into it.
struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn create(dir: &Path) -> Result<Out> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Out {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn csv(&mut self, name: &str, m: &Mat) -> Result<()> {
        let p = self.path(name);
        m.write_csv(&p).with_context(|| format!("writing {}", p.display()))
    }
}

/// Runs `job` into `dir` and records its manifest there.
pub fn execute(job: &Job, dir: &Path) -> Result<()> {
    let mut out = Out::create(dir)?;
    match job {
        Job::Gen { config } => run_gen(config, &mut out)?,
        Job::Train {
            config,
            data,
            checkpoint_every,
        } => run_train(config, data.as_deref(), *checkpoint_every, false, &mut out)?,
        Job::Eval { config, run, data, compare } => {
            run_eval(config, run, data.as_deref(), compare.as_deref(), &mut out)?;
        }
        Job::Spectrum { n, sets } => run_spectrum(*n, sets, &mut out)?,
        Job::Oracle {
            n,
            seed,
            augs,
            supports,
            random_bases,
            variant,
        } => run_oracle(*n, *seed, *augs, supports, *random_bases, *variant, &mut out)?,
        Job::DftDemo { n } => run_dft(*n, &mut out)?,
        Job::ReproLinear { config } => run_repro(config, &mut out)?,
    }
    Manifest::new(job.clone(), out.files).write(dir)
}

/// Like [`execute`] for `train`, continuing from a checkpoint in `dir` when one exists.
pub fn execute_train_resuming(job: &Job, dir: &Path) -> Result<()> {
    let Job::Train {
        config,
        data,
        checkpoint_every,
    } = job
    else {
        bail!("resume only applies to train");
    };
    let mut out = Out::create(dir)?;
    run_train(config, data.as_deref(), *checkpoint_every, true, &mut out)?;
    Manifest::new(job.clone(), out.files).write(dir)
}

#[derive(Serialize)]
struct AugmentationRecord<'a> {
    fixed: &'a CoordSet,
    block_start: usize,
    block_size: usize,
    support: &'a [usize],
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AugmentationFile<'a> {
    seed: u64,
    n: usize,
    augmentations: Vec<AugmentationRecord<'a>>,
}

fn augmentation_file(seed: u64, n: usize, augs: &[AugmentationSpec]) -> AugmentationFile<'_> {
    AugmentationFile {
        seed,
        n,
        augmentations: augs
            .iter()
            .map(|a| AugmentationRecord {
                fixed: &a.fixed,
                block_start: a.block_start,
                block_size: a.block_size,
                support: &a.support,
                b: a.block.to_rows(),
            })
            .collect(),
    }
}

fn run_gen(config: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let (world, ds) = build_world(config)?;
    out.json("world.json", &world)?;
    out.json("augmentations.json", &augmentation_file(config.seed, config.n, &world.augs))?;
    out.csv("x.csv", &ds.x)?;
    out.csv("z.csv", &ds.z)?;
    out.csv("h_inv.csv", &world.gt.h_inv)?;
    out.csv("h.csv", &world.gt.h)?;
    for (k, a) in world.augs.iter().enumerate() {
        out.csv(&format!("t_latent_{k}.csv"), &a.t_latent)?;
    }
    println!("seed {}: {} samples, n = {}, m = {}", config.seed, ds.len(), ds.n, ds.m);
    for (k, a) in world.augs.iter().enumerate() {
        println!("  T{k}: moves {:?}, fixes {}", a.support, a.fixed);
    }
    println!("wrote {}", out.dir.display());
    Ok(())
}

/// Loads the world and dataset written by `gen` into `dir`.
pub fn load_data(dir: &Path) -> Result<(ExperimentConfig, World, Dataset)> {
    let manifest = Manifest::read(dir)?;
    let Job::Gen { config } = manifest.job else {
        bail!("{} is not a gen directory", dir.display());
    };
    let world: World = serde_json::from_str(&std::fs::read_to_string(dir.join("world.json")).context("reading world.json")?)
        .context("malformed world.json")?;
    let x = Mat::read_csv(dir.join("x.csv")).context("reading x.csv")?;
    let z = Mat::read_csv(dir.join("z.csv")).context("reading z.csv")?;
    if x.rows() != z.rows() || x.cols() != world.gt.m || z.cols() != world.gt.n {
        bail!("x.csv and z.csv in {} do not match world.json", dir.display());
    }
    let ds = Dataset {
        z,
        x,
        seed: config.seed,
        n: world.gt.n,
        m: world.gt.m,
    };
    Ok((config, world, ds))
}

fn world_for(config: &ExperimentConfig, data: Option<&Path>) -> Result<(World, Dataset)> {
    match data {
        Some(dir) => {
            let (_, world, ds) = load_data(dir)?;
            Ok((world, ds))
        }
        None => Ok(build_world(config)?),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    init_seed: u64,
    epochs: usize,
    final_total: Option<f64>,
    snapshots: Vec<(usize, f64)>,
    wall_clock_secs: f64,
}

fn run_train(config: &ExperimentConfig, data: Option<&Path>, checkpoint_every: usize, resume: bool, out: &mut Out) -> Result<()> {
    let (world, ds) = world_for(config, data)?;
    let tc = config.train.clone();
    let curve = out.path("loss_curve.csv");
    let checkpoint = out.dir.join("optimizer.json");
    let mut trainer = if resume && checkpoint.exists() {
        let t = Trainer::resume(tc, &out.dir).context("loading checkpoint")?;
        truncate_curve(&curve, t.epoch)?;
        println!("resuming at epoch {}", t.epoch);
        t
    } else {
        if curve.exists() {
            std::fs::remove_file(&curve)?;
        }
        Trainer::new(tc, &ds)?
    };
    trainer.append_curve_to(&curve)?;
    let start = Instant::now();
    let result = (|| -> invlab::Result<()> {
        while trainer.epoch < trainer.config.epochs {
            trainer.run_epoch(&ds, &world)?;
            if checkpoint_every > 0 && trainer.epoch % checkpoint_every == 0 {
                trainer.save(&out.dir)?;
            }
        }
        Ok(())
    })();
    let summary = TrainSummary {
        seed: config.seed,
        init_seed: config.train.seed,
        epochs: trainer.epoch,
        final_total: trainer.report.final_total(),
        snapshots: trainer.report.snapshots.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    out.json("report.json", &summary)?;
    result.context("training failed")?;
    trainer.save(&out.dir)?;
    out.files.push("optimizer.json".into());
    out.files.push("model.json".into());
    for (k, _) in trainer.adam.m.iter().enumerate() {
        out.files.push(format!("adam_{k}.csv"));
    }
    for entry in std::fs::read_dir(&out.dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if (name.starts_with("enc_") || name.starts_with("dec_")) && name.ends_with(".csv") {
            out.files.push(name);
        }
    }
    println!(
        "trained {} epochs in {:.1}s, final objective {:.6}",
        trainer.epoch,
        summary.wall_clock_secs,
        summary.final_total.unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Drops curve lines past `epochs` so a resumed run appends cleanly.
fn truncate_curve(path: &Path, epochs: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept: Vec<&str> = text.lines().take(epochs + 1).collect();
    if kept.first() != Some(&CURVE_HEADER) {
        bail!("{} is not a loss curve", path.display());
    }
    kept.push("");
    std::fs::write(path, kept.join("\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile {
    seed: u64,
    #[serde(flatten)]
    metrics: Metrics,
}

#[derive(Serialize)]
struct EvaluationFile<'a> {
    seed: u64,
    #[serde(flatten)]
    evaluation: &'a RunEvaluation,
}

fn head_rows(pairs: &PairBatch, rows: usize) -> PairBatch {
    let idx: Vec<usize> = (0..pairs.len().min(rows)).collect();
    PairBatch {
        x: pairs.x.select_rows(&idx),
        x_aug: pairs.x_aug.select_rows(&idx),
        aug_ids: idx.iter().map(|&i| pairs.aug_ids[i]).collect(),
    }
}

fn run_eval(config: &ExperimentConfig, run: &Path, data: Option<&Path>, compare: Option<&Path>, out: &mut Out) -> Result<Metrics> {
    let model = EncoderModel::load(run).with_context(|| format!("loading model from {}", run.display()))?;
    let (world, ds) = world_for(config, data)?;
    let ev = evaluate_run(&model, &ds, &world)?;
    let mut metrics = ev.metrics();
    for (k, m) in ev.aligned.iter().enumerate() {
        out.csv(&format!("action_{k}.csv"), m)?;
        let pairs = pairs_for_aug(&ds, &world, Some(k))?;
        let stem = out.path(&format!("heatmap_{k}.pgm"));
        delta_heatmap(&model, &head_rows(&pairs, HEATMAP_ROWS), stem.with_extension(""))?;
        out.files.push(format!("heatmap_{k}.csv"));
        out.files.push(format!("heatmap_{k}.json"));
    }
    if let Some([fa, fb]) = &config.families {
        let pa = fa.iter().map(|&k| pairs_for_aug(&ds, &world, Some(k))).collect::<invlab::Result<Vec<_>>>()?;
        let pb = fb.iter().map(|&k| pairs_for_aug(&ds, &world, Some(k))).collect::<invlab::Result<Vec<_>>>()?;
        metrics.complementarity = Some(complementarity_score(&model, &pa, &pb)?);
    }
    if let Some(other) = compare {
        let model2 = EncoderModel::load(other).with_context(|| format!("loading model from {}", other.display()))?;
        let fd = frequencies_from_sets(&world.fixed_sets(), world.gt.n)?;
        let cross = cross_identifiability(&model, &model2, &ds, &fd)?;
        out.csv("cross_map.csv", &cross.map)?;
        metrics.cross_id_score = Some(cross.score);
    }
    out.json("evaluation.json", &EvaluationFile { seed: config.seed, evaluation: &ev })?;
    out.json("metrics.json", &MetricsFile { seed: config.seed, metrics: metrics.clone() })?;

    println!("alignment {:?} (cost {}, exhaustive {})", ev.alignment.perm, ev.alignment.cost, ev.alignment.exhaustive);
    for (k, f1) in ev.per_aug_f1.iter().enumerate() {
        println!("  T{k}: predicted {} true {} F1 {:.3}", ev.predicted_support[k], ev.true_support[k], f1);
    }
    println!("diag {:.4} ± {:.4}, L0 {} (minimum {})", ev.diag_mean, ev.diag_std, ev.l0_value, ev.l0_truth);
    if let Some(c) = metrics.complementarity {
        println!("complementarity {c:.3e}");
    }
    if let Some(c) = metrics.cross_id_score {
        println!("cross-model score {c:.4}");
    }
    Ok(metrics)
}

fn run_spectrum(n: usize, sets: &[Vec<usize>], out: &mut Out) -> Result<()> {
    let sets = sets.iter().map(|s| CoordSet::new(s.clone(), n)).collect::<invlab::Result<Vec<_>>>()?;
    let fd = frequencies_from_sets(&sets, n)?;
    let table = spectrum_table(&fd);
    let names: Vec<String> = (0..sets.len()).map(|k| format!("T{k}")).collect();
    out.text("spectrum.csv", &table.to_csv(&fd, &names))?;
    out.json("frequencies.json", &fd)?;
    print!("{}", table.render(&fd, &names));
    Ok(())
}

#[derive(Serialize)]
struct ExhaustiveSummary {
    best_value: usize,
    minimizers: usize,
    evaluated: usize,
    all_preserve_partition: bool,
}

#[derive(Serialize)]
struct OracleSummary {
    seed: u64,
    n: usize,
    variant: L0Variant,
    supports: Vec<Vec<usize>>,
    planted_value: usize,
    exhaustive: Option<ExhaustiveSummary>,
    random_bases: usize,
    random_min: Option<usize>,
    random_below_optimum: usize,
    claims_hold: bool,
}

fn run_oracle(n: usize, seed: u64, augs: usize, supports: &[Vec<usize>], random_bases: usize, variant: L0Variant, out: &mut Out) -> Result<()> {
    if n < 2 {
        bail!("oracle needs n >= 2");
    }
    let mut rng = RngStream::new(seed, ORACLE_AUG_STREAM);
    let specs = if supports.is_empty() {
        let opts = AugmentationOptions {
            min_block: 1,
            max_block: n - 1,
            singular_floor: 0.5,
            permuted: true,
        };
        (0..augs).map(|_| gen_augmentation_with(&mut rng, n, &opts)).collect::<invlab::Result<Vec<_>>>()?
    } else {
        supports.iter().map(|s| gen_augmentation_on(&mut rng, n, s, 0.5)).collect::<invlab::Result<Vec<_>>>()?
    };
    let ts: Vec<Mat> = specs.iter().map(|a| a.t_latent.clone()).collect();
    let fixed: Vec<CoordSet> = specs.iter().map(|a| a.fixed.clone()).collect();
    let fd = frequencies_from_sets(&fixed, n)?;
    let planted = l0_objective(&Mat::identity(n), &ts, L0_TOL, variant)?;
    let optimum;
    let exhaustive = if n <= 4 {
        let res = oracle_search(&ts, n, SearchMode::ExhaustiveSignedPerm, variant)?;
        let mut all = true;
        for c in &res.minimizers {
            all &= preserves_partition(&c.p, &ts, &fd, PARTITION_TOL)?;
        }
        optimum = res.best.l_value;
        Some(ExhaustiveSummary {
            best_value: res.best.l_value,
            minimizers: res.minimizers.len(),
            evaluated: res.evaluated,
            all_preserve_partition: all,
        })
    } else {
        optimum = planted;
        None
    };

    let mut basis_rng = RngStream::new(seed, ORACLE_BASIS_STREAM);
    let mut values = Vec::with_capacity(random_bases);
    let mut csv = String::from("index,l_value\n");
    while values.len() < random_bases {
        let p = gaussian(&mut basis_rng, n, n);
        let Ok(v) = l0_objective(&p, &ts, L0_TOL, variant) else { continue };
        csv.push_str(&format!("{},{v}\n", values.len()));
        values.push(v);
    }
    let below = values.iter().filter(|&&v| v < optimum).count();
    let claims_hold = below == 0 && exhaustive.as_ref().is_none_or(|e| e.best_value == planted && e.all_preserve_partition);
    let summary = OracleSummary {
        seed,
        n,
        variant,
        supports: specs.iter().map(|a| a.support.clone()).collect(),
        planted_value: planted,
        exhaustive,
        random_bases,
        random_min: values.iter().copied().min(),
        random_below_optimum: below,
        claims_hold,
    };
    out.json("augmentations.json", &augmentation_file(seed, n, &specs))?;
    out.text("random_bases.csv", &csv)?;
    out.json("oracle.json", &summary)?;

    println!("planted supports {:?}, frequencies {}", summary.supports, fd.classes.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
    println!("planted basis L = {planted}");
    if let Some(e) = &summary.exhaustive {
        println!(
            "signed permutations: min L = {} over {} candidates, {} minimizers, partition preserved: {}",
            e.best_value, e.evaluated, e.minimizers, e.all_preserve_partition
        );
    }
    println!(
        "random bases: {} drawn, min L = {}, below optimum: {below}",
        random_bases,
        summary.random_min.map_or("-".into(), |v| v.to_string())
    );
    println!("claims hold: {}", if claims_hold { "yes" } else { "no" });
    Ok(())
}

fn run_dft(n: usize, out: &mut Out) -> Result<()> {
    let spec = dft_shift_spectrum(n)?;
    let mut csv = String::from("k,l,re,im\n");
    for (k, row) in spec.table.iter().enumerate() {
        for (l, c) in row.iter().enumerate() {
            csv.push_str(&format!("{k},{l},{:.16e},{:.16e}\n", c.re, c.im));
        }
    }
    out.text("dft.csv", &csv)?;
    out.json("dft.json", &spec)?;
    print!("{}", spec.render());
    println!("max residual {:.3e}", spec.max_residual);
    for l in 0..n {
        println!("fixed by τ^{l}: {:?}", spec.invariant_frequencies(l, 1e-12).iter().map(|k| format!("v{k}")).collect::<Vec<_>>());
    }
    Ok(())
}

/// Pass/fail row of the reproduction table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

#[derive(Serialize)]
struct ReproSummary<'a> {
    seed: u64,
    wall_clock_secs: f64,
    checks: &'a [Check],
    pass: bool,
}

/// Minimum block-support F1 required of every augmentation.
pub const F1_THRESHOLD: f64 = 0.95;
/// Minimum off-block diagonal mean of the aligned actions.
pub const DIAG_THRESHOLD: f64 = 0.90;
/// Runtime budget per seed, in seconds.
pub const RUNTIME_BUDGET_SECS: f64 = 600.0;

fn run_repro(config: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let root = std::fs::canonicalize(&out.dir)?;
    let start = Instant::now();
    let gen = Job::Gen { config: config.clone() };
    execute(&gen, &root.join("gen"))?;
    let train = Job::Train {
        config: config.clone(),
        data: Some(root.join("gen")),
        checkpoint_every: 0,
    };
    execute(&train, &root.join("train"))?;
    let eval = Job::Eval {
        config: config.clone(),
        run: root.join("train"),
        data: Some(root.join("gen")),
        compare: None,
    };
    execute(&eval, &root.join("eval"))?;
    let secs = start.elapsed().as_secs_f64();
    let metrics: Metrics = serde_json::from_str(&std::fs::read_to_string(root.join("eval").join("metrics.json"))?)?;
    out.json("metrics.json", &MetricsFile { seed: config.seed, metrics: metrics.clone() })?;
    let f1 = metrics.support_f1.unwrap_or(f64::NAN);
    let diag = metrics.diag_mean.unwrap_or(f64::NAN);

    let checks = vec![
        Check {
            name: "min block-support F1".into(),
            value: f1,
            threshold: format!(">= {F1_THRESHOLD}"),
            pass: f1 >= F1_THRESHOLD,
        },
        Check {
            name: "off-block diagonal mean".into(),
            value: diag,
            threshold: format!(">= {DIAG_THRESHOLD}"),
            pass: diag >= DIAG_THRESHOLD,
        },
        Check {
            name: "runtime seconds".into(),
            value: secs,
            threshold: format!("<= {RUNTIME_BUDGET_SECS}"),
            pass: secs <= RUNTIME_BUDGET_SECS,
        },
    ];
    let pass = checks.iter().all(|c| c.pass);
    out.json(
        "acceptance.json",
        &ReproSummary {
            seed: config.seed,
            wall_clock_secs: secs,
            checks: &checks,
            pass,
        },
    )?;
    println!("{:<26} {:>10} {:>10}  status", "check", "value", "threshold");
    for c in &checks {
        println!("{:<26} {:>10.4} {:>10}  {}", c.name, c.value, c.threshold, if c.pass { "PASS" } else { "FAIL" });
    }
    let evaluation: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval").join("evaluation.json"))?)?;
    if let Some(sweep) = evaluation["eta_sweep"].as_array() {
        let cells: Vec<String> = sweep
            .iter()
            .filter_map(|p| Some(format!("eta {} -> F1 {:.3}", p[0].as_f64()?, p[1].as_f64()?)))
            .collect();
        println!("empirical invariance: {}", cells.join(", "));
    }
    println!("overall: {}", if pass { "PASS" } else { "FAIL" });
    Ok(())
}
