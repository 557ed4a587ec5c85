//! Closed-form multiply–add counts, instrumented counts and iteration timing.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CostTag, MacCounter, Tape};
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::model::{Aggregator, BackboneKind, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::particles::NeighborGraph;
use crate::tensor::Tensor;

fn mlp(rows: usize, dims: &[usize]) -> u64 {
    dims.windows(2).map(|w| (rows * w[0] * w[1]) as u64).sum()
}

/// Map cost: a bias-free linear layer in linear mode, else `[in, hidden, out]`.
fn map(cfg: &ModelConfig, rows: usize, fan_in: usize, fan_out: usize) -> u64 {
    if cfg.linear {
        mlp(rows, &[fan_in, fan_out])
    } else {
        mlp(rows, &[fan_in, cfg.mlp_hidden, fan_out])
    }
}

/// Forward MACs by cost bucket for `systems` systems with `n` particles and
/// `e` pairs in total. Abstract particles add `systems · N_a` rows and one or
/// two pairs per particle.
pub fn analytic_macs(cfg: &ModelConfig, d_in: usize, n: usize, e: usize, systems: usize) -> MacCounter {
    let mut c = MacCounter::default();
    let (d, l) = (cfg.hidden, cfg.blocks);
    let add = |c: &mut MacCounter, tag, v: u64| c.add(tag, v);
    add(&mut c, CostTag::Decoder, map(cfg, n, d, 3));
    match cfg.backbone {
        BackboneKind::Gnn => {
            add(&mut c, CostTag::Encoder, map(cfg, n, d_in, d));
            add(&mut c, CostTag::EdgeMlp, map(cfg, e, 2 * d_in, d));
            for _ in 1..l {
                add(&mut c, CostTag::EdgeMlp, map(cfg, e, 3 * d, d));
            }
            for _ in 0..l {
                add(&mut c, CostTag::NodeUpdate, map(cfg, n, 2 * d, d));
                if cfg.aggregator == Aggregator::Mean {
                    add(&mut c, CostTag::NodeUpdate, (n * d) as u64);
                }
            }
        }
        BackboneKind::Tie | BackboneKind::Vanilla => {
            let (n2, e2) = if cfg.abstract_particles > 0 {
                let per = if cfg.bidirectional_abstract { 2 } else { 1 };
                (n + systems * cfg.abstract_particles, e + per * n)
            } else {
                (n, e)
            };
            add(&mut c, CostTag::Encoder, map(cfg, n2, d_in, d));
            let (n2, e2, h) = (n2 as u64, e2 as u64, cfg.heads as u64);
            let (d64, dm) = (d as u64, cfg.mlp_hidden as u64);
            let tie = cfg.backbone == BackboneKind::Tie;
            for b in 0..l {
                let fan_in = if b == 0 && tie { d_in as u64 } else { d64 };
                let memory = if b > 0 && tie { 2 * n2 * d64 * d64 } else { 0 };
                add(&mut c, CostTag::TokenUpdate, 2 * n2 * fan_in * d64 + memory);
                let scores = match (cfg.backbone, cfg.normalized_attention) {
                    (BackboneKind::Vanilla, _) => 2 * e2 * d64,
                    (_, false) => n2 * d64 + 2 * e2 * d64,
                    (_, true) => 7 * n2 * d64 + 3 * e2 * d64 + 2 * h * e2,
                };
                add(&mut c, CostTag::Attention, n2 * d64 * d64 + scores);
                if !cfg.linear {
                    add(&mut c, CostTag::NodeUpdate, n2 * d64 * d64 + 2 * n2 * d64 * dm);
                }
            }
        }
    }
    c
}

/// The part of the forward cost that grows with the pair count.
pub fn pair_macs(cfg: &ModelConfig, d_in: usize, n: usize, e: usize) -> u64 {
    let with = analytic_macs(cfg, d_in, n, e, 1).total();
    let without = analytic_macs(cfg, d_in, n, 0, 1).total();
    with - without
}

/// `e` distinct ordered pairs `(i, j)`, `i ≠ j`, drawn uniformly.
pub fn synthetic_graph(n: usize, e: usize, seed: u64) -> Result<NeighborGraph> {
    let total = n * n.saturating_sub(1);
    if e > total {
        return Err(Error::Input(format!("{e} pairs requested but only {total} exist for {n} particles")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = sample(&mut rng, total, e)
        .into_iter()
        .map(|k| {
            let (i, j) = (k / (n - 1), k % (n - 1));
            (i, if j >= i { j + 1 } else { j })
        })
        .collect();
    NeighborGraph::from_pairs(n, pairs, 1.0)
}

pub fn synthetic_batch(n: usize, e: usize, d_in: usize, num_materials: usize, seed: u64) -> Result<Batch<f64>> {
    let graph = synthetic_graph(n, e, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = (0..n * d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ids: Vec<usize> = (0..n).map(|i| i % num_materials).collect();
    Batch::single(Tensor::new(vec![n, d_in], x)?, graph, &ids, num_materials)
}

/// Forward MACs counted by the tape.
pub fn measured_macs(model: &Model, store: &ParamStore<f64>, batch: &Batch<f64>) -> Result<MacCounter> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    model.forward(&mut tape, &p, batch)?;
    Ok(tape.macs().clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub backbone: BackboneKind,
    pub n: usize,
    pub e: usize,
    pub n_a: usize,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub analytic_macs: u64,
    pub measured_macs: u64,
    pub token_update_macs: u64,
    pub edge_mlp_macs: u64,
    pub wall_ms_mean: f64,
    pub wall_ms_std: f64,
    pub wall_ms_median: f64,
}

/// Count MACs and time `trials` forward+backward passes after one warm-up.
pub fn time_iteration(cfg: &ModelConfig, d_in: usize, n: usize, e: usize, trials: usize, seed: u64) -> Result<CostProfile> {
    if trials < 5 {
        return Err(Error::Config(format!("timing needs at least 5 trials, got {trials}")));
    }
    let k = cfg.abstract_particles.max(1);
    let batch = synthetic_batch(n, e, d_in, k, seed)?;
    let mut store = ParamStore::new();
    let model = Model::new(cfg, d_in, k, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let measured = measured_macs(&model, &store, &batch)?;
    let analytic = analytic_macs(cfg, d_in, n, e, 1);
    let mut times = Vec::with_capacity(trials);
    for trial in 0..=trials {
        let start = Instant::now();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &batch)?;
        let sq = tape.square(out);
        let loss = tape.mean_all(sq);
        tape.backward(loss)?;
        if trial > 0 {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean = times.iter().sum::<f64>() / trials as f64;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / trials as f64).sqrt();
    times.sort_by(f64::total_cmp);
    let median = if trials % 2 == 1 { times[trials / 2] } else { 0.5 * (times[trials / 2 - 1] + times[trials / 2]) };
    Ok(CostProfile {
        backbone: cfg.backbone,
        n,
        e,
        n_a: cfg.abstract_particles,
        d: cfg.hidden,
        blocks: cfg.blocks,
        heads: cfg.heads,
        analytic_macs: analytic.total(),
        measured_macs: measured.total(),
        token_update_macs: measured.get(CostTag::TokenUpdate),
        edge_mlp_macs: measured.get(CostTag::EdgeMlp),
        wall_ms_mean: mean,
        wall_ms_std: std,
        wall_ms_median: median,
    })
}

#[derive(Serialize)]
struct BenchRow {
    backbone: BackboneKind,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "E")]
    e: usize,
    macs: u64,
    wall_ms_mean: f64,
    wall_ms_std: f64,
}

pub fn write_bench_csv(path: &Path, profiles: &[CostProfile]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in profiles {
        w.serialize(BenchRow {
            backbone: p.backbone,
            n: p.n,
            e: p.e,
            macs: p.measured_macs,
            wall_ms_mean: p.wall_ms_mean,
            wall_ms_std: p.wall_ms_std,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
