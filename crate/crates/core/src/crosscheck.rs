//! Weight-tied comparisons between the implicit-edge transformer and the
//! explicit-edge network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::gnn::{expand_edge_linear, Gnn};
use crate::model::{Aggregator, BackboneKind, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::tie::Tie;

fn stack(parts: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    let cols = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::shape("stack", parts[0].shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Tensor::new(vec![rows, cols], data)
}

fn linear_cfg(backbone: BackboneKind, blocks: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        backbone,
        normalized_attention: false,
        blocks,
        hidden: d,
        heads,
        mlp_hidden: d,
        linear: true,
        ..ModelConfig::default()
    }
}

fn missing(what: &str) -> Error {
    Error::Contract(format!("{what} weight missing in linear mode"))
}

/// Largest `|r^(l)_i + s^(l)_j − e^(l+1)_ij|` over all pairs and layers, with the
/// explicit edges expanded pair by pair from the transformer's own weights and
/// node states. The encoder is the identity, so `d = d_in`.
pub fn implicit_edge_gap(batch: &Batch<f64>, blocks: usize, heads: usize, seed: u64) -> Result<f64> {
    let d = batch.x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tie_store = ParamStore::new();
    let tie = Tie::new(&linear_cfg(BackboneKind::Tie, blocks, d, heads), d, batch.num_materials, &mut tie_store, &mut rng)?;
    tie_store.assign(tie.encoder_weight_id().ok_or_else(|| missing("encoder"))?, Tensor::identity(d))?;
    let mut gnn_store = ParamStore::new();
    let gnn = Gnn::new(&linear_cfg(BackboneKind::Gnn, blocks, d, 1), d, &mut gnn_store, &mut rng)?;
    for l in 0..blocks {
        let (_, w_r, w_s, w_m) = tie.block_weight_ids(l);
        let mut parts = vec![tie_store.get(w_r), tie_store.get(w_s)];
        if let Some(m) = w_m {
            parts.push(tie_store.get(m));
        }
        gnn_store.assign(gnn.edge_weight_id(l).ok_or_else(|| missing("edge"))?, stack(&parts)?)?;
    }

    let mut tape = Tape::new();
    let p = tie_store.bind(&mut tape);
    let tr = tie.forward_trace(&mut tape, &p, batch)?;
    let nodes: Vec<Tensor<f64>> = tr.states.iter().map(|v| tape.value(*v).clone()).collect();
    let mut gap = 0.0f64;
    for l in 0..blocks {
        let explicit = expand_edge_linear(&gnn, &gnn_store, &batch.x, &nodes, &batch.graph, l)?;
        let (r, s) = (tape.value(tr.receivers[l]), tape.value(tr.senders[l]));
        for (k, (i, j)) in batch.graph.pairs().enumerate() {
            for c in 0..d {
                gap = gap.max((r.at(i, c) + s.at(j, c) - explicit.at(k, c)).abs());
            }
        }
    }
    Ok(gap)
}

/// Largest output difference between the plain transformer with `W_Q = 0` and
/// a mean-aggregating network whose edge maps are `[W_r; W_s(; W_m)]` and node
/// maps `[0; I]`. Needs every particle to have at least one neighbor.
pub fn tied_mean_gap(batch: &Batch<f64>, blocks: usize, d: usize, heads: usize, seed: u64) -> Result<f64> {
    let d_in = batch.x.cols();
    if (0..batch.rows()).any(|i| batch.graph.neighbors(i).is_empty()) {
        return Err(Error::Input("tied mean comparison needs every particle to have a neighbor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tie_store = ParamStore::new();
    let tie = Tie::new(&linear_cfg(BackboneKind::Tie, blocks, d, heads), d_in, batch.num_materials, &mut tie_store, &mut rng)?;
    let mut gnn_cfg = linear_cfg(BackboneKind::Gnn, blocks, d, 1);
    gnn_cfg.aggregator = Aggregator::Mean;
    let mut gnn_store = ParamStore::new();
    let gnn = Gnn::new(&gnn_cfg, d_in, &mut gnn_store, &mut rng)?;

    let enc = tie_store.get(tie.encoder_weight_id().ok_or_else(|| missing("encoder"))?).clone();
    gnn_store.assign(gnn.encoder_weight_id().ok_or_else(|| missing("encoder"))?, enc)?;
    let dec = tie_store.get(tie.decoder_weight_id().ok_or_else(|| missing("decoder"))?).clone();
    gnn_store.assign(gnn.decoder_weight_id().ok_or_else(|| missing("decoder"))?, dec)?;
    let node = stack(&[&Tensor::zeros(&[d, d]), &Tensor::identity(d)])?;
    for l in 0..blocks {
        let (w_q, w_r, w_s, w_m) = tie.block_weight_ids(l);
        tie_store.assign(w_q, Tensor::zeros(&[d, d]))?;
        let (wr, ws) = (tie_store.get(w_r).clone(), tie_store.get(w_s).clone());
        let edge = match w_m {
            None => stack(&[&wr, &ws])?,
            Some(m) => stack(&[&wr, &ws, tie_store.get(m)])?,
        };
        gnn_store.assign(gnn.edge_weight_id(l).ok_or_else(|| missing("edge"))?, edge)?;
        gnn_store.assign(gnn.node_weight_id(l).ok_or_else(|| missing("node"))?, node.clone())?;
    }

    let run = |f: &dyn Fn(&mut Tape<f64>) -> Result<crate::autodiff::Var>| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).clone())
    };
    let a = run(&|tape| {
        let p = tie_store.bind(tape);
        tie.forward(tape, &p, batch)
    })?;
    let b = run(&|tape| {
        let p = gnn_store.bind(tape);
        gnn.forward(tape, &p, batch)
    })?;
    Ok(a.max_abs_diff(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::build_neighbor_graph;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(n: usize, d_in: usize, radius: f64, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<[f64; 3]> = (0..n).map(|_| [rng.random::<f64>() * 0.3, rng.random::<f64>() * 0.3, 0.0]).collect();
        let x: Vec<f64> = (0..n * d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        Batch::single(Tensor::new(vec![n, d_in], x).unwrap(), build_neighbor_graph(&pos, radius).unwrap(), &vec![0; n], 1).unwrap()
    }

    #[test]
    fn receiver_plus_sender_equals_explicit_edge() {
        for (blocks, heads, seed) in [(1, 1, 1), (3, 2, 2), (4, 4, 3)] {
            let gap = implicit_edge_gap(&batch(12, 8, 0.12, seed), blocks, heads, seed).unwrap();
            assert!(gap < 1e-10, "gap {gap}");
        }
    }

    #[test]
    fn zero_query_matches_mean_aggregation() {
        for (blocks, heads, seed) in [(1, 1, 4), (2, 2, 5), (3, 4, 6)] {
            let gap = tied_mean_gap(&batch(10, 5, 1.0, seed), blocks, 8, heads, seed).unwrap();
            assert!(gap < 1e-10, "gap {gap}");
        }
        assert!(tied_mean_gap(&batch(10, 5, 1e-3, 7), 1, 8, 1, 7).is_err());
    }
}
