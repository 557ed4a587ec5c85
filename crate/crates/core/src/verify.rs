//! Oracle suites: each compares an optimized path against an independent one.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::crosscheck::implicit_edge_gap;
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::model::{BackboneKind, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::particles::{build_neighbor_graph, window, NeighborGraph, Vec3};
use crate::tensor::Tensor;
use crate::tie::{abstract_pairs, normalized_head, pair_variance, Tie};
use crate::train::{m3se, mse, mse_loss};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<22} {} ({:.2} s)", self.name, self.detail, self.seconds)
    }
}

fn run(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor<f64>> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn uniform_positions(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Vec3> {
    (0..n).map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]).collect()
}

/// Receiver plus sender tokens against pair-by-pair explicit edges.
pub fn implicit_edge_suite(configs: usize, seed: u64) -> SuiteResult {
    run("implicit-edge", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut pairs = 0;
        for k in 0..configs {
            let blocks = rng.random_range(1..=4);
            let d = [4, 16][rng.random_range(0..2)];
            let heads = [1, 2, 4][rng.random_range(0..3)];
            let n = rng.random_range(4..=32);
            let pos = uniform_positions(&mut rng, n, 0.0, 1.0);
            let graph = build_neighbor_graph(&pos, 0.5)?;
            pairs += graph.len();
            let batch = Batch::single(normal(&mut rng, n, d)?, graph, &vec![0; n], 1)?;
            worst = worst.max(implicit_edge_gap(&batch, blocks, heads, seed.wrapping_add(k as u64))?);
        }
        Ok((worst <= 1e-10, format!("{configs} configurations, {pairs} pairs, max deviation {worst:.2e}")))
    })
}

/// Recovered pair σ against the direct population standard deviation of `r + s`,
/// and the σ-scaled value against layer-normalizing `r + s` directly.
pub fn sigma_suite(pairs: usize, seed: u64) -> SuiteResult {
    run("sigma-recovery", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = NeighborGraph::from_pairs(2, vec![(0, 1)], 1.0)?;
        let (mut worst_sigma, mut worst_value) = (0.0f64, 0.0f64);
        for k in 0..pairs {
            let d = [2, 8, 64][k % 3];
            let scale = rng.random_range(0.5..2.0);
            let shift: f64 = StandardNormal.sample(&mut rng);
            let mut t = normal(&mut rng, 2, d)?;
            t.data_mut().iter_mut().for_each(|v| *v = *v * scale + shift);
            let (r, s) = (t.row(0).to_vec(), t.row(1).to_vec());
            let sum: Vec<f64> = r.iter().zip(&s).map(|(a, b)| a + b).collect();
            let mean = sum.iter().sum::<f64>() / d as f64;
            let direct = (sum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64).sqrt();

            let mut tape = Tape::new();
            let rv = tape.leaf(t.clone());
            let sv = tape.leaf(t.clone());
            let (var, _, _) = pair_variance(&mut tape, &graph, rv, sv)?;
            let sigma = tape.value(var).data()[0].sqrt();
            worst_sigma = worst_sigma.max((sigma - direct).abs() / direct);

            let q = tape.leaf(normal(&mut rng, 2, d)?);
            let out = normalized_head(&mut tape, &graph, q, rv, sv)?;
            for c in 0..d {
                let want = (sum[c] - mean) / direct;
                worst_value = worst_value.max((tape.value(out).at(0, c) - want).abs() / want.abs().max(1.0));
            }
        }
        Ok((
            worst_sigma <= 1e-9 && worst_value <= 1e-9,
            format!("{pairs} pairs, max relative σ error {worst_sigma:.2e}, max value error {worst_value:.2e}"),
        ))
    })
}

/// Configuration of the gradient check model: 2 blocks, 2 heads, d = 16,
/// normalized attention and one abstract particle per material.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneKind::Tie,
        normalized_attention: true,
        blocks: 2,
        hidden: 16,
        heads: 2,
        mlp_hidden: 16,
        abstract_particles: 2,
        ..ModelConfig::default()
    }
}

/// Reverse-mode gradients of every parameter against central differences.
pub fn gradient_suite(seed: u64) -> SuiteResult {
    run("gradients", || {
        let cfg = gradient_check_config();
        let (n, d_in, k) = (8, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&cfg, d_in, k, &mut store, &mut rng)?;
        // Perturb the unit gains and zero shifts so every parameter matters.
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
        }
        let pos = uniform_positions(&mut rng, n, 0.0, 1.0);
        let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
        let batch = Batch::single(normal(&mut rng, n, d_in)?, build_neighbor_graph(&pos, 0.6)?, &ids, k)?;
        let target = normal(&mut rng, n, 3)?;
        let loss_of = |store: &ParamStore<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = model.forward(&mut tape, &p, &batch)?;
            let loss = mse_loss(&mut tape, out, &target)?;
            Ok(tape.value(loss).data()[0])
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &batch)?;
        let loss = mse_loss(&mut tape, out, &target)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = p.vars().iter().map(|&v| grads.wrt(v).into_data()).collect();

        let h = 1e-5;
        let floor = 1e-6;
        let (mut worst, mut checked, mut worst_name) = (0.0f64, 0usize, String::new());
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut probe = store.clone();
        for (pi, name) in names.iter().enumerate() {
            let id = probe.id(name).ok_or_else(|| Error::Contract(format!("parameter {name} vanished")))?;
            for j in 0..probe.get(id).len() {
                let orig = probe.get(id).data()[j];
                probe.get_mut(id).data_mut()[j] = orig + h;
                let up = loss_of(&probe)?;
                probe.get_mut(id).data_mut()[j] = orig - h;
                let down = loss_of(&probe)?;
                probe.get_mut(id).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                if rel > worst {
                    worst = rel;
                    worst_name = format!("{name}[{j}]");
                }
                checked += 1;
            }
        }
        Ok((
            worst <= 1e-4,
            format!("{checked} scalars in {} tensors, max relative error {worst:.2e} at {worst_name}", names.len()),
        ))
    })
}

/// Material-wise error reduces to the plain one for a single material.
pub fn metric_suite(seed: u64) -> SuiteResult {
    run("metric-identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut identical = true;
        for n in 1..=64 {
            let a = uniform_positions(&mut rng, n, -1.0, 1.0);
            let b = uniform_positions(&mut rng, n, -1.0, 1.0);
            identical &= m3se(&a, &b, &vec![0; n], 1)?.to_bits() == mse(&a, &b)?.to_bits();
        }
        let hand = m3se(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0; 3]], &[[0.0; 3]; 3], &[0, 1, 1], 2)?;
        Ok((identical && hand == 1.5, format!("K=1 bitwise identical: {identical}; K=2 example {hand}")))
    })
}

/// Spatial hash pair sets against an all-pairs scan.
pub fn neighbor_suite(configs: usize, max_n: usize, seed: u64) -> SuiteResult {
    run("neighbor-graph", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0;
        let mut pairs = 0;
        for k in 0..configs {
            let n = 1 + k * (max_n - 1) / configs.saturating_sub(1).max(1);
            let extent = rng.random_range(0.2..2.0);
            let mut pos = uniform_positions(&mut rng, n, -extent, extent);
            if k % 5 == 0 && n > 1 {
                // Coincident points and lattice-aligned neighbors.
                pos[n - 1] = pos[0];
                pos[n / 2] = [pos[0][0] + 0.05, pos[0][1], pos[0][2]];
            }
            let radius = extent * rng.random_range(0.02..0.3);
            let fast = build_neighbor_graph(&pos, radius)?;
            let mut brute = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && window(&pos[i], &pos[j], radius)? {
                        brute.push((i, j));
                    }
                }
            }
            let got: Vec<(usize, usize)> = fast.pairs().collect();
            pairs += brute.len();
            if got != brute {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("{configs} configurations up to N={max_n}, {pairs} pairs, {mismatches} mismatches")))
    })
}

fn small_tie(n_a: usize, bidirectional: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneKind::Tie,
        normalized_attention: true,
        blocks: 2,
        hidden: 8,
        heads: 2,
        mlp_hidden: 8,
        abstract_particles: n_a,
        bidirectional_abstract: bidirectional,
        ..ModelConfig::default()
    }
}

/// Token counts, connectivity and output rows with abstract particles, plus
/// bitwise equality of the bank-free path.
pub fn abstract_suite(seed: u64) -> SuiteResult {
    run("abstract-particles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = 0;
        let mut failures = Vec::new();
        let mut example: Vec<(usize, usize)> = abstract_pairs(&[4], &[0, 0, 1, 1], 2, true)?;
        example.sort_unstable();
        if example != [(0, 4), (1, 4), (2, 5), (3, 5), (4, 0), (4, 1), (5, 2), (5, 3)] {
            failures.push("enumerated example".to_string());
        }
        for n in [1, 4, 9, 16] {
            for k in 1..=3 {
                for systems in 1..=2 {
                    for (n_a, bidirectional) in [(0, true), (k, true), (k, false)] {
                        cases += 1;
                        let cfg = small_tie(n_a, bidirectional);
                        let parts: Vec<Batch<f64>> = (0..systems)
                            .map(|_| {
                                let pos = uniform_positions(&mut rng, n, 0.0, 1.0);
                                let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                                Batch::single(normal(&mut rng, n, 5)?, build_neighbor_graph(&pos, 0.5)?, &ids, k)
                            })
                            .collect::<Result<_>>()?;
                        let batch = Batch::concat(&parts)?;
                        let mut store = ParamStore::new();
                        let tie = Tie::new(&cfg, 5, k, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
                        let mut tape = Tape::new();
                        let p = store.bind(&mut tape);
                        let tr = tie.forward_trace(&mut tape, &p, &batch)?;
                        let total = n * systems;
                        let tokens = tape.value(tr.states[0]).rows();
                        let rows = tape.value(tr.output).rows();
                        // Independent enumeration of the expected pair set.
                        let mut want: BTreeSet<(usize, usize)> = batch.graph.pairs().collect();
                        if n_a > 0 {
                            for i in 0..total {
                                let a = total + (i / n) * k + batch.material_ids[i];
                                want.insert((a, i));
                                if bidirectional {
                                    want.insert((i, a));
                                }
                            }
                        }
                        let got: BTreeSet<(usize, usize)> = tr.graph.pairs().collect();
                        let abstract_abstract = got.iter().any(|&(r, s)| r >= total && s >= total);
                        if tokens != total + systems * n_a || rows != total || got != want || abstract_abstract {
                            failures.push(format!("N={n} K={k} systems={systems} N_a={n_a} bidirectional={bidirectional}"));
                        }
                    }
                }
            }
        }
        // A bank-free model equals a banked one whose abstract particles only listen.
        let (n, k) = (12, 3);
        let pos = uniform_positions(&mut rng, n, 0.0, 1.0);
        let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
        let batch = Batch::single(normal(&mut rng, n, 5)?, build_neighbor_graph(&pos, 0.5)?, &ids, k)?;
        let output = |cfg: &ModelConfig| -> Result<(Tensor<f64>, ParamStore<f64>)> {
            let mut store = ParamStore::new();
            let tie = Tie::new(cfg, 5, k, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = tie.forward(&mut tape, &p, &batch)?;
            Ok((tape.value(out).clone(), store))
        };
        let (plain, plain_store) = output(&small_tie(0, true))?;
        let (again, _) = output(&small_tie(0, true))?;
        let (listening, banked_store) = output(&small_tie(k, false))?;
        let shared = plain_store.iter().zip(banked_store.iter()).all(|(a, b)| a == b);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let bitwise = bits(&plain) == bits(&again) && bits(&plain) == bits(&listening);
        if !(shared && bitwise) {
            failures.push(format!("bank-free path: shared parameters {shared}, bitwise {bitwise}"));
        }
        Ok((
            failures.is_empty(),
            if failures.is_empty() {
                format!("{cases} (N, K, N_a) cases, enumerated example and bitwise bank-free path hold")
            } else {
                format!("failed: {}", failures.join("; "))
            },
        ))
    })
}

/// Every suite at full size, in a fixed order.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        implicit_edge_suite(100, seed),
        sigma_suite(1000, seed),
        gradient_suite(seed),
        metric_suite(seed),
        neighbor_suite(50, 1024, seed),
        abstract_suite(seed),
    ]
}
