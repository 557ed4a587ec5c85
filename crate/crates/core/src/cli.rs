//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{time_iteration, write_bench_csv};
use crate::checkpoint::{load_into, write_checkpoint};
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::dataset::{read_dataset, write_dataset, RolloutDataset};
use crate::error::{Error, Result};
use crate::eval::{one_step, rollouts, write_rollouts, ConstantVelocity, EvalReport, ModelPredictor};
use crate::features::{compute_norm_stats, Featurizer};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::particles::NormStats;
use crate::tensor::{Precision, Scalar};
use crate::train::{fit, samples};
use crate::verify::run_all;
use crate::worlds::WorldSpec;

pub const STATS: &str = "stats.json";
pub const CHECKPOINT: &str = "model";

#[derive(Debug, Parser)]
#[command(name = "tie-sim", version, about = "Learned particle simulation with implicit-edge attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset into the output directory.
    GenData(Common),
    /// Fit a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Recursive rollouts on the validation split, written as binary files.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// One-step and rollout metrics against the constant-velocity baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Multiply-add counts and iteration timing over synthetic pair lists.
    Bench(Common),
    /// Run every oracle suite.
    Verify(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    #[arg(long, value_parser = ["gnn", "vanilla", "tie"])]
    pub backbone: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub normalized_attention: Option<String>,
    #[arg(long)]
    pub abstract_particles: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub history: Option<usize>,
    /// Dotted `key=value` configuration overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    /// Defaults, then the file, then flags, then overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_with(|_| Ok(()))
    }

    /// Like `resolve`, with `adjust` applied to the file layer before flags.
    pub fn resolve_with(&self, adjust: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
        let mut base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        adjust(&mut base)?;
        let mut flags = Vec::new();
        if let Some(s) = self.seed {
            flags.extend([format!("data.seed={s}"), format!("train.seed={s}"), format!("bench.seed={s}")]);
        }
        if let Some(p) = &self.precision {
            flags.push(format!("train.precision=\"{p}\""));
        }
        if let Some(b) = &self.backbone {
            flags.push(format!("model.backbone=\"{b}\""));
        }
        if let Some(n) = &self.normalized_attention {
            flags.push(format!("model.normalized_attention={}", n == "on"));
        }
        if let Some(n) = self.abstract_particles {
            flags.push(format!("model.abstract_particles={n}"));
        }
        if let Some(r) = self.radius {
            flags.push(format!("model.radius={r}"));
        }
        if let Some(h) = self.history {
            flags.push(format!("model.history={h}"));
        }
        flags.extend(self.overrides.iter().cloned());
        base.with_overrides(&flags)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => gen_data(&common.resolve()?, &common.out),
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, &data, &common.out),
                Precision::F64 => train::<f64>(&cfg, &data, &common.out),
            }
        }
        Command::Rollout { common, data, model } => evaluate(&common, &data, &model, true),
        Command::Eval { common, data, model } => evaluate(&common, &data, &model, false),
        Command::Bench(common) => bench(&common.resolve()?, &common.out),
        Command::Verify(common) => verify(&common.resolve()?, &common.out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let world = WorldSpec::preset(d.world, d.particles);
    let ds = RolloutDataset::generate(&d.name, world, d.train, d.valid, d.frames, d.seed)?;
    write_dataset(&ds, out)?;
    cfg.write(out)?;
    println!("wrote {} train and {} valid rollouts to {}", d.train, d.valid, out.display());
    Ok(())
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn train<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let stats = compute_norm_stats(&ds)?;
    let f = Featurizer::new(&ds, stats.clone(), cfg.model.history, cfg.model.radius)?;
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = Model::new(&cfg.model, f.input_dim(), ds.meta.num_materials, &mut store, &mut rng)?;
    let train = samples::<T>(&f, &ds.train)?;
    let valid = samples::<T>(&f, &ds.valid)?;
    cfg.write(out)?;
    write_json(&out.join(STATS), &stats)?;
    log::info!("{} parameters, {} training samples", store.num_scalars(), train.len());
    match fit(&model, &mut store, &train, &valid, &cfg.train) {
        Ok(history) => {
            history.write_csv(&out.join("history.csv"))?;
            write_checkpoint(&store, out, CHECKPOINT)?;
            if let Some(last) = history.records.last() {
                println!(
                    "trained {} epochs in {:.1} s: train {:.4e}, valid {:.4e}",
                    history.records.len(),
                    history.seconds,
                    last.train_loss,
                    last.valid_loss
                );
            }
            Ok(())
        }
        Err(e @ Error::Divergence { .. }) => {
            write_checkpoint(&store, out, CHECKPOINT)?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn evaluate(common: &Common, data: &Path, model_dir: &Path, write_bins: bool) -> Result<()> {
    // The model section and precision come from the trained run; explicit
    // flags still apply on top.
    let cfg = common.resolve_with(|base| {
        let trained = RunConfig::load(&model_dir.join(RESOLVED_CONFIG))?;
        base.model = trained.model;
        base.train.precision = trained.train.precision;
        Ok(())
    })?;
    match cfg.train.precision {
        Precision::F32 => evaluate_with::<f32>(&cfg, data, model_dir, &common.out, write_bins),
        Precision::F64 => evaluate_with::<f64>(&cfg, data, model_dir, &common.out, write_bins),
    }
}

fn evaluate_with<T: Scalar>(cfg: &RunConfig, data: &Path, model_dir: &Path, out: &Path, write_bins: bool) -> Result<()> {
    let ds = read_dataset(data)?;
    let stats_path = model_dir.join(STATS);
    let raw = fs::read(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
    let stats: NormStats = serde_json::from_slice(&raw).map_err(|e| Error::Metadata {
        path: stats_path.clone(),
        reason: e.to_string(),
    })?;
    let f = Featurizer::new(&ds, stats, cfg.model.history, cfg.model.radius)?;
    let mut store = ParamStore::<T>::new();
    let model = Model::new(&cfg.model, f.input_dim(), ds.meta.num_materials, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_into(&mut store, model_dir, CHECKPOINT)?;

    let e = &cfg.eval;
    let count = if e.rollouts == 0 { ds.valid.len() } else { e.rollouts.min(ds.valid.len()) };
    let truth = &ds.valid[..count];
    let (ids, k, dt) = (&ds.meta.material_ids, ds.meta.num_materials, ds.meta.dt);
    let mut predictor = ModelPredictor {
        model: &model,
        store: &store,
        featurizer: &f,
    };
    let one = one_step(&mut predictor, truth, ids, k, e.one_step_steps)?;
    let base = one_step(&mut ConstantVelocity, truth, ids, k, e.one_step_steps)?;
    let steps = e.steps.min(ds.meta.frames - 1);
    let (rollout, baseline_rollout, results) = if steps > 0 {
        let (summary, results) = rollouts(&mut predictor, truth, steps, dt, ids, k)?;
        let (base_summary, _) = rollouts(&mut ConstantVelocity, truth, steps, dt, ids, k)?;
        (Some(summary), Some(base_summary), results)
    } else {
        (None, None, Vec::new())
    };
    let report = EvalReport {
        backbone: format!("{:?}", cfg.model.backbone).to_lowercase(),
        one_step: one,
        baseline_one_step: base,
        rollout,
        baseline_rollout,
    };
    cfg.write(out)?;
    report.write(&out.join("report.json"))?;
    if write_bins {
        write_rollouts(out, &results)?;
    }
    println!(
        "one-step M3SE {:.4e} ± {:.4e} (constant velocity {:.4e}) over {count} rollouts",
        report.one_step.mean, report.one_step.std, report.baseline_one_step.mean
    );
    if let (Some(r), Some(b)) = (&report.rollout, &report.baseline_rollout) {
        println!("{}-step rollout M3SE {:.4e} (constant velocity {:.4e}), {} divergent", r.steps, r.m3se.mean, b.m3se.mean, r.divergent);
    }
    Ok(())
}

fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let b = &cfg.bench;
    cfg.write(out)?;
    let mut profiles = Vec::new();
    for &backbone in &b.backbones {
        let mut model = cfg.model.clone();
        model.backbone = backbone;
        for &e in &b.pairs {
            let p = time_iteration(&model, b.input_dim, b.particles, e, b.trials, b.seed)?;
            println!(
                "{:<8} N={:<5} E={:<7} MACs {:>14} (analytic {:>14}) {:>9.2} ± {:.2} ms",
                format!("{backbone:?}").to_lowercase(),
                p.n,
                p.e,
                p.measured_macs,
                p.analytic_macs,
                p.wall_ms_mean,
                p.wall_ms_std
            );
            if p.measured_macs != p.analytic_macs {
                return Err(Error::Verification(format!("MAC count mismatch for {backbone:?} at E={e}")));
            }
            profiles.push(p);
        }
    }
    write_bench_csv(&out.join("bench.csv"), &profiles)?;
    write_json(&out.join("bench.json"), &profiles)
}

fn verify(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write(out)?;
    let results = run_all(cfg.train.seed);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("failing suites: {}", failed.join(", "))))
    }
}
