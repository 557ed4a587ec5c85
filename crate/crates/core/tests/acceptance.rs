//! Acceptance criteria, one verdict line each.
//!
//! `cargo test --release --test acceptance` runs all of them; trailing
//! arguments select criteria by number (`-- 6 7`).

use std::io::Write;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tie_sim::bench::{analytic_macs, time_iteration};
use tie_sim::autodiff::CostTag;
use tie_sim::dataset::RolloutDataset;
use tie_sim::eval::{one_step, ConstantVelocity, ModelPredictor};
use tie_sim::features::{compute_norm_stats, Featurizer};
use tie_sim::model::{BackboneKind, Model, ModelConfig};
use tie_sim::nn::ParamStore;
use tie_sim::train::{fit, samples, TrainConfig};
use tie_sim::verify::{abstract_suite, gradient_suite, implicit_edge_suite, metric_suite, neighbor_suite, sigma_suite, SuiteResult};
use tie_sim::worlds::{WorldKind, WorldSpec};
use tie_sim::{Precision, Result};

const SEED: u64 = 0;

type Criterion = (u32, &'static str, fn() -> Result<Verdict>);

struct Verdict {
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn suite(r: SuiteResult, limit_secs: f64) -> Verdict {
    Verdict {
        passed: r.passed && r.seconds < limit_secs,
        detail: format!("{} in {:.2} s (limit {limit_secs} s)", r.detail, r.seconds),
    }
}

fn implicit_edges() -> Result<Verdict> {
    Ok(suite(implicit_edge_suite(100, SEED), 30.0))
}

fn sigma() -> Result<Verdict> {
    Ok(suite(sigma_suite(1000, SEED), 5.0))
}

fn gradients() -> Result<Verdict> {
    Ok(suite(gradient_suite(SEED), 120.0))
}

fn metric() -> Result<Verdict> {
    Ok(suite(metric_suite(SEED), 1.0))
}

fn neighbors() -> Result<Verdict> {
    Ok(suite(neighbor_suite(50, 1024, SEED), 30.0))
}

fn cost_scaling() -> Result<Verdict> {
    let (n, d_in) = (512, 14);
    let pairs = [2000, 4000, 8000, 16000];
    let tie = ModelConfig {
        backbone: BackboneKind::Tie,
        normalized_attention: true,
        blocks: 4,
        hidden: 128,
        heads: 4,
        mlp_hidden: 256,
        abstract_particles: 0,
        ..ModelConfig::default()
    };
    let gnn = ModelConfig {
        backbone: BackboneKind::Gnn,
        ..tie.clone()
    };
    let mut exact = true;
    let mut notes = Vec::new();
    let mut spreads = Vec::new();
    for cfg in [&tie, &gnn] {
        let profiles = pairs
            .iter()
            .map(|&e| time_iteration(cfg, d_in, n, e, 5, SEED))
            .collect::<Result<Vec<_>>>()?;
        for p in &profiles {
            let analytic = analytic_macs(cfg, d_in, n, p.e, 1);
            exact &= p.measured_macs == p.analytic_macs
                && p.token_update_macs == analytic.get(CostTag::TokenUpdate)
                && p.edge_mlp_macs == analytic.get(CostTag::EdgeMlp);
        }
        let first = &profiles[0];
        match cfg.backbone {
            BackboneKind::Tie => {
                let flat = profiles.iter().all(|p| p.token_update_macs == first.token_update_macs && p.edge_mlp_macs == 0);
                exact &= flat && first.token_update_macs > 0;
                notes.push(format!("TIE token-update MACs {} at every E", first.token_update_macs));
            }
            _ => {
                let doubling = profiles.windows(2).all(|w| w[1].edge_mlp_macs == 2 * w[0].edge_mlp_macs);
                exact &= doubling && first.edge_mlp_macs > 0;
                notes.push(format!(
                    "GNN edge-MLP MACs {} doubling each step: {doubling}",
                    profiles.iter().map(|p| p.edge_mlp_macs.to_string()).collect::<Vec<_>>().join(" → ")
                ));
            }
        }
        let times: Vec<f64> = profiles.iter().map(|p| p.wall_ms_median).collect();
        let lo = times.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = times.iter().cloned().fold(0.0, f64::max);
        spreads.push((cfg.backbone, times.clone(), (hi - lo) / lo, times[3] / times[0] - 1.0));
    }
    for (backbone, times, spread, growth) in &spreads {
        let ms: Vec<String> = times.iter().map(|t| format!("{t:.0}")).collect();
        let soft = match backbone {
            BackboneKind::Tie => format!("spread {:.0}% (expected < 25%)", 100.0 * spread),
            _ => format!("growth {:.0}% (expected > 50%)", 100.0 * growth),
        };
        say(&format!("  soft timing {backbone:?}: median ms {} over E {pairs:?}, {soft}", ms.join(" / ")));
    }
    Ok(Verdict {
        passed: exact,
        detail: format!("N={n}, d=128, L=4: instrumented = analytic; {}", notes.join("; ")),
    })
}

/// Desk-scale configuration shared by both attention backbones.
fn desk_model(backbone: BackboneKind, normalized: bool) -> ModelConfig {
    ModelConfig {
        backbone,
        normalized_attention: normalized,
        blocks: 2,
        hidden: 64,
        heads: 4,
        mlp_hidden: 128,
        abstract_particles: 0,
        ..ModelConfig::default()
    }
}

fn desk_training() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        samples_per_epoch: 2000,
        valid_samples: 300,
        time_budget_secs: 1200.0,
        precision: Precision::F32,
        seed: SEED,
        ..TrainConfig::default()
    }
}

fn desk_learning() -> Result<Verdict> {
    let ds = RolloutDataset::generate("box_splash", WorldSpec::preset(WorldKind::BoxSplash, 64), 200, 20, 50, SEED)?;
    let stats = compute_norm_stats(&ds)?;
    let (ids, k) = (&ds.meta.material_ids, ds.meta.num_materials);
    let baseline = one_step(&mut ConstantVelocity, &ds.valid, ids, k, 0)?.mean;
    let tcfg = desk_training();
    let mut scores = Vec::new();
    let mut within_budget = true;
    for (name, cfg) in [("TIE", desk_model(BackboneKind::Tie, true)), ("vanilla", desk_model(BackboneKind::Vanilla, false))] {
        let f = Featurizer::new(&ds, stats.clone(), cfg.history, cfg.radius)?;
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&cfg, f.input_dim(), k, &mut store, &mut ChaCha8Rng::seed_from_u64(tcfg.seed))?;
        let train = samples::<f32>(&f, &ds.train)?;
        let valid = samples::<f32>(&f, &ds.valid)?;
        let history = fit(&model, &mut store, &train, &valid, &tcfg)?;
        within_budget &= history.seconds <= 1200.0;
        let mut predictor = ModelPredictor {
            model: &model,
            store: &store,
            featurizer: &f,
        };
        let score = one_step(&mut predictor, &ds.valid, ids, k, 0)?.mean;
        say(&format!(
            "  {name}: {} epochs in {:.0} s, one-step M3SE {score:.4e} ({:.3}× constant velocity)",
            history.records.len(),
            history.seconds,
            score / baseline
        ));
        scores.push(score);
    }
    let (tie, vanilla) = (scores[0], scores[1]);
    Ok(Verdict {
        passed: within_budget && tie <= 0.5 * baseline && tie <= vanilla,
        detail: format!(
            "TIE {tie:.4e} vs constant velocity {baseline:.4e} (ratio {:.3}, need ≤ 0.5) and vanilla {vanilla:.4e}",
            tie / baseline
        ),
    })
}

fn abstract_contract() -> Result<Verdict> {
    Ok(suite(abstract_suite(SEED), 30.0))
}

fn tie_sim(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_tie-sim"))
        .args(args)
        .output()
        .map_err(|e| tie_sim::Error::Contract(format!("spawn tie-sim: {e}")))?;
    if !out.status.success() {
        return Err(tie_sim::Error::Contract(format!(
            "tie-sim {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(())
}

fn reproducibility() -> Result<Verdict> {
    let tmp = tempfile::tempdir().map_err(|e| tie_sim::Error::Contract(e.to_string()))?;
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let data = dir("data");
    tie_sim(&["gen-data", "--out", &data, "data.particles=32", "data.frames=12", "data.train=6", "data.valid=2"])?;
    let args = ["--precision", "f64", "--abstract-particles", "1", "model.hidden=32", "model.mlp_hidden=64", "model.blocks=2", "train.epochs=3"];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir(name);
        let mut full = vec!["train", "--data", &data, "--out", &out];
        full.extend(args);
        tie_sim(&full)?;
        let path = Path::new(&out).join("history.csv");
        runs.push(std::fs::read(&path).map_err(|e| tie_sim::Error::Contract(e.to_string()))?);
    }
    let identical = runs[0] == runs[1];
    Ok(Verdict {
        passed: identical && !runs[0].is_empty(),
        detail: format!("two f64 train runs, history.csv byte-identical: {identical} ({} bytes)", runs[0].len()),
    })
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "implicit-edge exactness", implicit_edges),
        (2, "sigma recovery", sigma),
        (3, "gradient correctness", gradients),
        (4, "metric identity", metric),
        (5, "neighbor-graph equivalence", neighbors),
        (6, "cost scaling", cost_scaling),
        (7, "desk-scale learning", desk_learning),
        (8, "abstract-particle contract", abstract_contract),
        (9, "reproducibility", reproducibility),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check().unwrap_or_else(|e| Verdict {
            passed: false,
            detail: format!("error: {e}"),
        });
        if !v.passed {
            failed += 1;
        }
        say(&format!(
            "{} criterion {id} {name}: {} [{:.1} s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        ));
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        say(&format!("{failed} criteria failed"));
        ExitCode::FAILURE
    }
}
