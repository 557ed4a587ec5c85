//! Explicit-edge message passing.
//!
//! Layer indices follow the edge recursion `e^{(l+1)} = f_E^{(l)}(v_i, v_j, e^{(l)})`
//! with the edge encoder acting as layer 0: `e^{(1)}_{ij} = f_E^{(0)}(x_i, x_j)`.
//! Every layer then updates nodes with `v^{(l+1)} = f_V^{(l)}(v^{(l)}, agg_j e^{(l+1)}_{ij})`.

use rand::Rng;

use crate::autodiff::{CostTag, Tape, Var};
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::model::{Aggregator, ModelConfig};
use crate::nn::{Bound, Linear, Mlp, ParamStore};
use crate::particles::NeighborGraph;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
enum Map {
    Linear(Linear),
    Mlp(Mlp),
}

impl Map {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Map::Linear(l) => l.forward(tape, p, x),
            Map::Mlp(m) => m.forward(tape, p, x),
        }
    }

    fn linear(&self) -> Option<&Linear> {
        match self {
            Map::Linear(l) => Some(l),
            Map::Mlp(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gnn {
    pub cfg: ModelConfig,
    pub d_in: usize,
    enc_v: Map,
    /// Layer 0 edge map on `[x_i; x_j]`, then layers `1..L` on `[v_i; v_j; e]`.
    prop_e: Vec<Map>,
    prop_v: Vec<Map>,
    dec: Map,
}

/// Intermediate features of one forward pass.
#[derive(Clone, Debug)]
pub struct GnnTrace {
    /// `v^{(0)} .. v^{(L)}`.
    pub nodes: Vec<Var>,
    /// `e^{(1)} .. e^{(L)}`, one row per pair.
    pub edges: Vec<Var>,
    pub output: Var,
}

impl Gnn {
    pub fn new<T: Scalar>(cfg: &ModelConfig, d_in: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.hidden;
        let h = cfg.mlp_hidden;
        let map = |store: &mut ParamStore<T>, rng: &mut _, name: &str, fan_in: usize, fan_out: usize, norm: bool| {
            if cfg.linear {
                Map::Linear(Linear::new(store, name, fan_in, fan_out, false, rng))
            } else {
                Map::Mlp(Mlp::new(store, name, &[fan_in, h, fan_out], true, norm, rng))
            }
        };
        let enc_v = map(store, rng, "gnn.enc_v", d_in, d, true);
        let mut prop_e = vec![map(store, rng, "gnn.edge0", 2 * d_in, d, true)];
        for l in 1..cfg.blocks {
            prop_e.push(map(store, rng, &format!("gnn.edge{l}"), 3 * d, d, true));
        }
        let prop_v = (0..cfg.blocks)
            .map(|l| map(store, rng, &format!("gnn.node{l}"), 2 * d, d, true))
            .collect();
        let dec = map(store, rng, "gnn.dec", d, 3, false);
        Ok(Gnn {
            cfg: cfg.clone(),
            d_in,
            enc_v,
            prop_e,
            prop_v,
            dec,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<Var> {
        Ok(self.forward_trace(tape, p, batch)?.output)
    }

    pub fn forward_trace<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<GnnTrace> {
        let g = &batch.graph;
        let n = batch.rows();
        let x = tape.constant(batch.x.clone());
        let prev = tape.set_tag(CostTag::Encoder);
        let mut v = self.enc_v.forward(tape, p, x)?;
        let mut nodes = vec![v];
        let mut edges = Vec::new();
        let inv_deg = match self.cfg.aggregator {
            Aggregator::Sum => None,
            Aggregator::Mean => {
                let inv: Vec<T> = (0..n)
                    .map(|i| {
                        let deg = g.offsets[i + 1] - g.offsets[i];
                        if deg == 0 { T::zero() } else { T::one() / T::from_f(deg as f64) }
                    })
                    .collect();
                Some(tape.constant(Tensor::new(vec![n, 1], inv)?))
            }
        };
        let mut e: Option<Var> = None;
        for l in 0..self.cfg.blocks {
            tape.set_tag(CostTag::EdgeMlp);
            let e_next = match e {
                None => {
                    let xi = tape.gather_rows(x, g.receivers.clone())?;
                    let xj = tape.gather_rows(x, g.senders.clone())?;
                    let input = tape.concat(&[xi, xj], 1)?;
                    self.prop_e[0].forward(tape, p, input)?
                }
                Some(e_prev) => {
                    let vi = tape.gather_rows(v, g.receivers.clone())?;
                    let vj = tape.gather_rows(v, g.senders.clone())?;
                    let input = tape.concat(&[vi, vj, e_prev], 1)?;
                    let upd = self.prop_e[l].forward(tape, p, input)?;
                    if self.cfg.linear { upd } else { tape.add(e_prev, upd)? }
                }
            };
            edges.push(e_next);
            tape.set_tag(CostTag::NodeUpdate);
            let mut agg = tape.scatter_add_rows(e_next, g.receivers.clone(), n)?;
            if let Some(w) = inv_deg {
                agg = tape.scale_rows(agg, w)?;
            }
            let input = tape.concat(&[v, agg], 1)?;
            let upd = self.prop_v[l].forward(tape, p, input)?;
            v = if self.cfg.linear { upd } else { tape.add(v, upd)? };
            nodes.push(v);
            e = Some(e_next);
        }
        tape.set_tag(CostTag::Decoder);
        let output = self.dec.forward(tape, p, v)?;
        tape.set_tag(prev);
        Ok(GnnTrace { nodes, edges, output })
    }

    /// Bias-free weight of edge layer `l` (`[W_r; W_s]` at 0, `[W_r; W_s; W_m]` after).
    pub fn edge_weight<'a, T: Scalar>(&self, params: &'a ParamStore<T>, l: usize) -> Result<&'a Tensor<T>> {
        let lin = self
            .prop_e
            .get(l)
            .and_then(Map::linear)
            .ok_or_else(|| Error::Contract("edge weights exist only in linear mode".into()))?;
        Ok(params.get(lin.weight))
    }

    pub fn edge_weight_id(&self, l: usize) -> Option<crate::nn::ParamId> {
        self.prop_e.get(l).and_then(Map::linear).map(|lin| lin.weight)
    }

    pub fn node_weight_id(&self, l: usize) -> Option<crate::nn::ParamId> {
        self.prop_v.get(l).and_then(Map::linear).map(|lin| lin.weight)
    }

    pub fn encoder_weight_id(&self) -> Option<crate::nn::ParamId> {
        self.enc_v.linear().map(|lin| lin.weight)
    }

    pub fn decoder_weight_id(&self) -> Option<crate::nn::ParamId> {
        self.dec.linear().map(|lin| lin.weight)
    }
}

/// Explicit per-pair edge recursion in linear mode: `e^{(l+1)}` for every pair.
///
/// `x` holds the raw inputs and `nodes[k]` the node features `v^{(k)}`; layer 0
/// applies `[W_r; W_s]` to `[x_i; x_j]`, later layers apply `[W_r; W_s; W_m]`
/// to `[v_i; v_j; e^{(l)}]`, each pair computed independently.
pub fn expand_edge_linear<T: Scalar>(
    gnn: &Gnn,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    nodes: &[Tensor<T>],
    graph: &NeighborGraph,
    l: usize,
) -> Result<Tensor<T>> {
    if !gnn.cfg.linear {
        return Err(Error::Contract("expand_edge_linear requires linear mode".into()));
    }
    if l >= gnn.cfg.blocks || nodes.len() < l {
        return Err(Error::Contract(format!("layer {l} needs node features up to v^({})", l.saturating_sub(1))));
    }
    let pair_input = |a: &[T], b: &[T], e: Option<&[T]>| -> Vec<T> {
        let mut v = Vec::with_capacity(a.len() * 3);
        v.extend_from_slice(a);
        v.extend_from_slice(b);
        if let Some(e) = e {
            v.extend_from_slice(e);
        }
        v
    };
    let mut edges: Vec<Vec<T>> = Vec::with_capacity(graph.len());
    let w0 = gnn.edge_weight(params, 0)?;
    for (i, j) in graph.pairs() {
        let input = Tensor::new(vec![1, 2 * x.cols()], pair_input(x.row(i), x.row(j), None))?;
        edges.push(input.matmul(w0)?.into_data());
    }
    for k in 1..=l {
        let w = gnn.edge_weight(params, k)?;
        let v = &nodes[k];
        edges = graph
            .pairs()
            .zip(&edges)
            .map(|((i, j), e)| {
                let input = Tensor::new(vec![1, 3 * v.cols()], pair_input(v.row(i), v.row(j), Some(e)))?;
                Ok(input.matmul(w)?.into_data())
            })
            .collect::<Result<_>>()?;
    }
    let d = edges.first().map_or(w0.cols(), Vec::len);
    Tensor::new(vec![graph.len(), d], edges.into_iter().flatten().collect())
}
