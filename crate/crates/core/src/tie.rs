//! Transformer with implicit edges.
//!
//! Every particle carries a state token `v`, a receiver token `r` and a sender
//! token `s`. Block `l` updates
//!
//! ```text
//! r^(0) = W_r x                          s^(0) = W_s x
//! r^(l) = W_r v^(l) + W_m r^(l-1)        s^(l) = W_s v^(l) + W_m s^(l-1)
//! ```
//!
//! so that `r^(l)_i + s^(l)_j` equals the explicit
//! edge `e^(l+1)_ij` of a linear message-passing network, while all work stays
//! per particle. Attention then mixes the sender tokens of neighbors into the
//! receiver. Heads are column blocks of width `d / heads`; `W_m` acts on the
//! concatenated head tokens.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{CostTag, Tape, Var};
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::model::{BackboneKind, ModelConfig};
use crate::nn::{glorot, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::particles::NeighborGraph;
use crate::tensor::{Scalar, Tensor};

/// Lower clamp of the recovered pair variance.
pub const SIGMA2_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Implicit-edge scores and `r_i + Σ α s_j` aggregation.
    Plain,
    /// Decentralized, σ-scaled receiver/sender tokens with gain and shift.
    Normalized,
    /// Query/key/value attention over state tokens.
    Vanilla,
}

#[derive(Clone, Debug)]
struct Post {
    out: Linear,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct Block {
    w_q: ParamId,
    /// `W_r` or, in vanilla mode, `W_K`.
    w_r: ParamId,
    /// `W_s` or, in vanilla mode, `W_V`.
    w_s: ParamId,
    w_m: Option<ParamId>,
    gain: Option<ParamId>,
    shift: Option<ParamId>,
    post: Option<Post>,
}

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
}

#[derive(Clone, Debug)]
pub struct Tie {
    pub cfg: ModelConfig,
    pub d_in: usize,
    pub num_materials: usize,
    pub kind: AttentionKind,
    enc: Map,
    bank: Option<ParamId>,
    blocks: Vec<Block>,
    dec: Map,
}

/// Tokens of one forward pass over the extended (normal plus abstract) rows.
#[derive(Clone, Debug)]
pub struct TieTrace {
    /// `v^(0) .. v^(L)`.
    pub states: Vec<Var>,
    /// `r^(0) .. r^(L-1)`; in vanilla mode the keys.
    pub receivers: Vec<Var>,
    /// `s^(0) .. s^(L-1)`; in vanilla mode the values.
    pub senders: Vec<Var>,
    pub graph: NeighborGraph,
    pub output: Var,
}

impl Tie {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        d_in: usize,
        num_materials: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(num_materials)?;
        let kind = match (cfg.backbone, cfg.normalized_attention) {
            (BackboneKind::Vanilla, _) => AttentionKind::Vanilla,
            (BackboneKind::Tie, true) => AttentionKind::Normalized,
            (BackboneKind::Tie, false) => AttentionKind::Plain,
            (BackboneKind::Gnn, _) => return Err(Error::Config("Tie cannot build a gnn backbone".into())),
        };
        let d = cfg.hidden;
        let enc = if cfg.linear {
            Map::Linear(Linear::new(store, "tie.enc", d_in, d, false, rng))
        } else {
            Map::Mlp(Mlp::new(store, "tie.enc", &[d_in, cfg.mlp_hidden, d], true, true, rng))
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let name = |s: &str| format!("tie.block{l}.{s}");
            let vanilla = kind == AttentionKind::Vanilla;
            // The first receiver and sender tokens read the raw inputs.
            let rows = if l == 0 && !vanilla { d_in } else { d };
            let w_q = store.add(name("w_q"), glorot(rng, d, d));
            let w_r = store.add(name(if vanilla { "w_k" } else { "w_r" }), glorot(rng, rows, d));
            let w_s = store.add(name(if vanilla { "w_v" } else { "w_s" }), glorot(rng, rows, d));
            let w_m = (l > 0 && !vanilla).then(|| store.add(name("w_m"), glorot(rng, d, d)));
            let (gain, shift) = if kind == AttentionKind::Normalized {
                (
                    Some(store.add(name("gain"), Tensor::full(&[1, d], T::one()))),
                    Some(store.add(name("shift"), Tensor::zeros(&[1, d]))),
                )
            } else {
                (None, None)
            };
            let post = (!cfg.linear).then(|| Post {
                out: Linear::new(store, &name("out"), d, d, true, rng),
                norm1: LayerNorm::new(store, &name("norm1"), d),
                mlp: Mlp::new(store, &name("mlp"), &[d, cfg.mlp_hidden, d], true, false, rng),
                norm2: LayerNorm::new(store, &name("norm2"), d),
            });
            blocks.push(Block {
                w_q,
                w_r,
                w_s,
                w_m,
                gain,
                shift,
                post,
            });
        }
        let dec = if cfg.linear {
            Map::Linear(Linear::new(store, "tie.dec", d, 3, false, rng))
        } else {
            Map::Mlp(Mlp::new(store, "tie.dec", &[d, cfg.mlp_hidden, 3], true, false, rng))
        };
        // Created last so that a bank-free model shares every other parameter.
        // Abstract particles are learned virtual inputs, one per material.
        let bank = (cfg.abstract_particles > 0).then(|| store.add("tie.abstract", glorot(rng, num_materials, d_in)));
        Ok(Tie {
            cfg: cfg.clone(),
            d_in,
            num_materials,
            kind,
            enc,
            bank,
            blocks,
            dec,
        })
    }

    pub fn encoder_weight_id(&self) -> Option<ParamId> {
        match &self.enc {
            Map::Linear(l) => Some(l.weight),
            Map::Mlp(_) => None,
        }
    }

    pub fn decoder_weight_id(&self) -> Option<ParamId> {
        match &self.dec {
            Map::Linear(l) => Some(l.weight),
            Map::Mlp(_) => None,
        }
    }

    /// `(W_Q, W_r, W_s, W_m)` of block `l`.
    pub fn block_weight_ids(&self, l: usize) -> (ParamId, ParamId, ParamId, Option<ParamId>) {
        let b = &self.blocks[l];
        (b.w_q, b.w_r, b.w_s, b.w_m)
    }

    pub fn bank_id(&self) -> Option<ParamId> {
        self.bank
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<Var> {
        Ok(self.forward_trace(tape, p, batch)?.output)
    }

    pub fn forward_trace<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<TieTrace> {
        let n = batch.rows();
        let prev = tape.set_tag(CostTag::Encoder);
        let x = tape.constant(batch.x.clone());
        let bank = self.bank.map(|id| p.var(id));
        let (x, graph) = attach_abstract_particles(tape, x, bank, batch, self.cfg.bidirectional_abstract)?;
        let mut v = self.enc.forward(tape, p, x)?;
        let mut states = vec![v];
        let mut receivers: Vec<Var> = Vec::new();
        let mut senders: Vec<Var> = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            tape.set_tag(CostTag::TokenUpdate);
            let src = if l == 0 && self.kind != AttentionKind::Vanilla { x } else { v };
            let mut r = tape.matmul(src, p.var(block.w_r))?;
            let mut s = tape.matmul(src, p.var(block.w_s))?;
            if let (Some(w_m), Some(&r_prev), Some(&s_prev)) = (block.w_m, receivers.last(), senders.last()) {
                let mr = tape.matmul(r_prev, p.var(w_m))?;
                let ms = tape.matmul(s_prev, p.var(w_m))?;
                r = tape.add(r, mr)?;
                s = tape.add(s, ms)?;
            }
            receivers.push(r);
            senders.push(s);
            tape.set_tag(CostTag::Attention);
            let q = tape.matmul(v, p.var(block.w_q))?;
            let mixed = self.attend(tape, p, block, &graph, q, r, s)?;
            v = match &block.post {
                None => mixed,
                Some(post) => {
                    tape.set_tag(CostTag::NodeUpdate);
                    let proj = post.out.forward(tape, p, mixed)?;
                    let u = tape.add(v, proj)?;
                    let u = post.norm1.forward(tape, p, u)?;
                    let m = post.mlp.forward(tape, p, u)?;
                    let sum = tape.add(u, m)?;
                    post.norm2.forward(tape, p, sum)?
                }
            };
            states.push(v);
        }
        tape.set_tag(CostTag::Decoder);
        let normal = if graph.num_nodes == n { v } else { tape.slice(v, 0, 0, n)? };
        let output = self.dec.forward(tape, p, normal)?;
        tape.set_tag(prev);
        Ok(TieTrace {
            states,
            receivers,
            senders,
            graph,
            output,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        block: &Block,
        graph: &NeighborGraph,
        q: Var,
        r: Var,
        s: Var,
    ) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let rh = tape.slice(r, 1, h * dh, dh)?;
            let sh = tape.slice(s, 1, h * dh, dh)?;
            heads.push(match self.kind {
                AttentionKind::Plain => plain_head(tape, graph, qh, rh, sh)?,
                AttentionKind::Normalized => normalized_head(tape, graph, qh, rh, sh)?,
                AttentionKind::Vanilla => vanilla_head(tape, graph, qh, rh, sh)?,
            });
        }
        let mut out = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        if let (Some(g), Some(b)) = (block.gain, block.shift) {
            out = tape.mul_row(out, p.var(g))?;
            out = tape.add_row(out, p.var(b))?;
        }
        Ok(out)
    }
}

fn inv_sqrt<T: Scalar>(dh: usize) -> T {
    T::one() / T::from_f(dh as f64).sqrt()
}

/// `r_i + Σ_j softmax_j((q_i·r_i + q_i·s_j)/√d) s_j`; isolated rows give `r_i`.
pub fn plain_head<T: Scalar>(tape: &mut Tape<T>, g: &NeighborGraph, q: Var, r: Var, s: Var) -> Result<Var> {
    let (n, dh) = (tape.value(q).rows(), tape.value(q).cols());
    let self_score = tape.row_dot(q, r)?;
    let pair = tape.pair_dot(q, s, g.receivers.clone(), g.senders.clone())?;
    let self_e = tape.gather_rows(self_score, g.receivers.clone())?;
    let logits = tape.add(self_e, pair)?;
    let logits = tape.scale(logits, inv_sqrt(dh));
    let alpha = tape.segment_softmax(logits, g.offsets.clone())?;
    let agg = tape.pair_aggregate(alpha, s, g.receivers.clone(), g.senders.clone(), n)?;
    tape.add(r, agg)
}

/// Per-pair recovered variance of `r_i + s_j` from per-token statistics:
/// `(r·r + s·s + 2 r·s)/d − (μ_r + μ_s)²`. Returns `(σ², μ_r, μ_s)`.
pub fn pair_variance<T: Scalar>(tape: &mut Tape<T>, g: &NeighborGraph, r: Var, s: Var) -> Result<(Var, Var, Var)> {
    let dh = tape.value(r).cols();
    let inv_d = T::one() / T::from_f(dh as f64);
    let mu_r = tape.mean(r, 1)?;
    let mu_s = tape.mean(s, 1)?;
    let rr = tape.row_dot(r, r)?;
    let ss = tape.row_dot(s, s)?;
    let rs = tape.pair_dot(r, s, g.receivers.clone(), g.senders.clone())?;
    let rr_e = tape.gather_rows(rr, g.receivers.clone())?;
    let ss_e = tape.gather_rows(ss, g.senders.clone())?;
    let rs2 = tape.scale(rs, T::from_f(2.0));
    let second = tape.add(rr_e, ss_e)?;
    let second = tape.add(second, rs2)?;
    let second = tape.scale(second, inv_d);
    let mr_e = tape.gather_rows(mu_r, g.receivers.clone())?;
    let ms_e = tape.gather_rows(mu_s, g.senders.clone())?;
    let mean = tape.add(mr_e, ms_e)?;
    let mean2 = tape.square(mean);
    let var = tape.sub(second, mean2)?;
    Ok((var, mu_r, mu_s))
}

/// Subtract a per-row scalar (`rows × 1`) from every column.
fn center<T: Scalar>(tape: &mut Tape<T>, x: Var, mu: Var) -> Result<Var> {
    let dh = tape.value(x).cols();
    let ones = tape.constant(Tensor::full(&[1, dh], T::one()));
    let spread = tape.matmul(mu, ones)?;
    tape.sub(x, spread)
}

/// `Σ_j softmax_j(ω''_ij/√d) · ((r_i − μ_r) + (s_j − μ_s)) / σ_ij` with
/// `ω''_ij = q_i·((r_i − μ_r) + (s_j − μ_s)) / σ_ij`; isolated rows give 0.
pub fn normalized_head<T: Scalar>(tape: &mut Tape<T>, g: &NeighborGraph, q: Var, r: Var, s: Var) -> Result<Var> {
    let (n, dh) = (tape.value(q).rows(), tape.value(q).cols());
    let (var, mu_r, mu_s) = pair_variance(tape, g, r, s)?;
    let inv_sigma = tape.rsqrt_clamped(var, T::from_f(SIGMA2_FLOOR));
    let rc = center(tape, r, mu_r)?;
    let sc = center(tape, s, mu_s)?;
    let q_rc = tape.row_dot(q, rc)?;
    let q_sc = tape.pair_dot(q, sc, g.receivers.clone(), g.senders.clone())?;
    let q_rc_e = tape.gather_rows(q_rc, g.receivers.clone())?;
    let raw = tape.add(q_rc_e, q_sc)?;
    let logits = tape.mul(raw, inv_sigma)?;
    let logits = tape.scale(logits, inv_sqrt(dh));
    let alpha = tape.segment_softmax(logits, g.offsets.clone())?;
    let w = tape.mul(alpha, inv_sigma)?;
    let w_sum = tape.scatter_add_rows(w, g.receivers.clone(), n)?;
    let self_part = tape.scale_rows(rc, w_sum)?;
    let pair_part = tape.pair_aggregate(w, sc, g.receivers.clone(), g.senders.clone(), n)?;
    tape.add(self_part, pair_part)
}

/// `Σ_j softmax_j(q_i·k_j/√d) v_j` over neighbors; isolated rows give 0.
pub fn vanilla_head<T: Scalar>(tape: &mut Tape<T>, g: &NeighborGraph, q: Var, k: Var, val: Var) -> Result<Var> {
    let (n, dh) = (tape.value(q).rows(), tape.value(q).cols());
    let logits = tape.pair_dot(q, k, g.receivers.clone(), g.senders.clone())?;
    let logits = tape.scale(logits, inv_sqrt(dh));
    let alpha = tape.segment_softmax(logits, g.offsets.clone())?;
    tape.pair_aggregate(alpha, val, g.receivers.clone(), g.senders.clone(), n)
}

/// Pairs linking every particle with its material's abstract particle.
///
/// Abstract rows follow all normal rows, one bank copy per system in batch
/// order. Pairs are `(receiver, sender)`; the abstract particle always
/// receives from its particles, and with `bidirectional` they receive from it.
pub fn abstract_pairs(
    sizes: &[usize],
    material_ids: &[usize],
    num_materials: usize,
    bidirectional: bool,
) -> Result<Vec<(usize, usize)>> {
    let total: usize = sizes.iter().sum();
    if material_ids.len() != total {
        return Err(Error::shape("abstract_pairs", &[total], &[material_ids.len()]));
    }
    if let Some(&m) = material_ids.iter().find(|&&m| m >= num_materials) {
        return Err(Error::Input(format!("material id {m} out of range for {num_materials} materials")));
    }
    let mut pairs = Vec::with_capacity(2 * total);
    let mut base = 0;
    for (b, &size) in sizes.iter().enumerate() {
        for i in base..base + size {
            let a = total + b * num_materials + material_ids[i];
            pairs.push((a, i));
            if bidirectional {
                pairs.push((i, a));
            }
        }
        base += size;
    }
    Ok(pairs)
}

/// Append one bank copy per system to the per-particle rows and extend the graph.
/// Without a bank both are returned unchanged.
pub fn attach_abstract_particles<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    bank: Option<Var>,
    batch: &Batch<T>,
    bidirectional: bool,
) -> Result<(Var, NeighborGraph)> {
    let Some(bank) = bank else {
        return Ok((tokens, batch.graph.clone()));
    };
    let k = batch.num_materials;
    if tape.value(bank).rows() != k {
        return Err(Error::shape("attach_abstract_particles", tape.value(bank).shape(), &[k, tape.value(tokens).cols()]));
    }
    let copies: Arc<[usize]> = (0..batch.sizes.len()).flat_map(|_| 0..k).collect();
    let rows = tape.gather_rows(bank, copies)?;
    let extended = tape.concat(&[tokens, rows], 0)?;
    let mut pairs: Vec<(usize, usize)> = batch.graph.pairs().collect();
    pairs.extend(abstract_pairs(&batch.sizes, &batch.material_ids, k, bidirectional)?);
    let graph = NeighborGraph::from_pairs(batch.rows() + batch.sizes.len() * k, pairs, batch.graph.radius)?;
    Ok((extended, graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::build_neighbor_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn cfg(backbone: BackboneKind, normalized: bool, linear: bool) -> ModelConfig {
        ModelConfig {
            backbone,
            normalized_attention: normalized,
            blocks: 2,
            hidden: 8,
            heads: 2,
            mlp_hidden: 16,
            linear,
            ..ModelConfig::default()
        }
    }

    fn random_batch(n: usize, d_in: usize, k: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<[f64; 3]> = (0..n).map(|_| [rng.random::<f64>() * 0.3, rng.random::<f64>() * 0.3, 0.0]).collect();
        let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
        Batch::single(normal(&mut rng, n, d_in), build_neighbor_graph(&pos, 0.15).unwrap(), &ids, k).unwrap()
    }

    #[test]
    fn abstract_connectivity_example() {
        let pairs = abstract_pairs(&[4], &[0, 0, 1, 1], 2, true).unwrap();
        let mut got = pairs.clone();
        got.sort();
        let mut want = vec![(4, 0), (4, 1), (0, 4), (1, 4), (5, 2), (5, 3), (2, 5), (3, 5)];
        want.sort();
        assert_eq!(got, want);
        assert!(abstract_pairs(&[2], &[0, 2], 2, true).is_err());
        let one_way = abstract_pairs(&[4], &[0, 0, 1, 1], 2, false).unwrap();
        assert!(one_way.iter().all(|&(r, _)| r >= 4));
    }

    #[test]
    fn no_bank_is_identity() {
        let b = random_batch(6, 3, 2, 1);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(normal(&mut ChaCha8Rng::seed_from_u64(2), 6, 4));
        let (w, g) = attach_abstract_particles(&mut tape, v, None, &b, true).unwrap();
        assert_eq!(w, v);
        assert_eq!(g, b.graph);
    }

    #[test]
    fn single_neighbor_plain_attention_is_r_plus_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = NeighborGraph::from_pairs(2, vec![(0, 1)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let (q, r, s) = (tape.leaf(normal(&mut rng, 2, 4)), tape.leaf(normal(&mut rng, 2, 4)), tape.leaf(normal(&mut rng, 2, 4)));
        let out = plain_head(&mut tape, &g, q, r, s).unwrap();
        let (rv, sv, ov) = (tape.value(r).clone(), tape.value(s).clone(), tape.value(out).clone());
        for c in 0..4 {
            assert!((ov.at(0, c) - rv.at(0, c) - sv.at(1, c)).abs() < 1e-14);
            assert_eq!(ov.at(1, c), rv.at(1, c));
        }
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        // q ⟂ s_j makes every score equal.
        let g = NeighborGraph::from_pairs(4, vec![(0, 1), (0, 2), (0, 3)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]).unwrap());
        let r = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let s = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 4.0]]).unwrap());
        let out = plain_head(&mut tape, &g, q, r, s).unwrap();
        let o = tape.value(out);
        assert!((o.at(0, 0) - 0.5).abs() < 1e-14);
        assert!((o.at(0, 1) - (0.5 + (1.0 - 2.0 + 4.0) / 3.0)).abs() < 1e-14);
    }

    fn direct_std(r: &[f64], s: &[f64]) -> f64 {
        let x: Vec<f64> = r.iter().zip(s).map(|(a, b)| a + b).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sigma_of(r: &[f64], s: &[f64]) -> f64 {
        let d = r.len();
        let g = NeighborGraph::from_pairs(2, vec![(0, 1)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let rt = tape.leaf(Tensor::new(vec![2, d], [r, &vec![0.0; d][..]].concat()).unwrap());
        let st = tape.leaf(Tensor::new(vec![2, d], [&vec![0.0; d][..], s].concat()).unwrap());
        let (var, _, _) = pair_variance(&mut tape, &g, rt, st).unwrap();
        tape.value(var).data()[0].sqrt()
    }

    #[test]
    fn sigma_examples() {
        assert!((sigma_of(&[1.0, -1.0], &[2.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!((direct_std(&[1.0, -1.0], &[2.0, 0.0]) - 2.0).abs() < 1e-15);
        let r = [0.3, -1.2, 2.5, 0.1];
        let s: Vec<f64> = r.iter().map(|v| -v).collect();
        assert!(sigma_of(&r, &s).abs() < 1e-7);
        assert_eq!(direct_std(&r, &s), 0.0);
    }

    #[test]
    fn constant_tokens_take_the_clamped_path() {
        let g = NeighborGraph::from_pairs(2, vec![(0, 1), (1, 0)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::full(&[2, 3], 0.7));
        let r = tape.leaf(Tensor::full(&[2, 3], 1.5));
        let s = tape.leaf(Tensor::full(&[2, 3], 1.5));
        let out = normalized_head(&mut tape, &g, q, r, s).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalized_value_is_layer_normalized_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = NeighborGraph::from_pairs(2, vec![(0, 1)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let (q, r, s) = (tape.leaf(normal(&mut rng, 2, 8)), tape.leaf(normal(&mut rng, 2, 8)), tape.leaf(normal(&mut rng, 2, 8)));
        let out = normalized_head(&mut tape, &g, q, r, s).unwrap();
        let e: Vec<f64> = tape.value(r).row(0).iter().zip(tape.value(s).row(1)).map(|(a, b)| a + b).collect();
        let m = e.iter().sum::<f64>() / 8.0;
        let sd = (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0).sqrt();
        for c in 0..8 {
            assert!((tape.value(out).at(0, c) - (e[c] - m) / sd).abs() < 1e-12);
        }
        assert!(tape.value(out).row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_query_vanilla_attention_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = NeighborGraph::from_pairs(3, vec![(0, 1), (0, 2), (1, 0)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::zeros(&[3, 4]));
        let (k, v) = (tape.leaf(normal(&mut rng, 3, 4)), tape.leaf(normal(&mut rng, 3, 4)));
        let out = vanilla_head(&mut tape, &g, q, k, v).unwrap();
        let (vv, o) = (tape.value(v).clone(), tape.value(out).clone());
        for c in 0..4 {
            assert!((o.at(0, c) - 0.5 * (vv.at(1, c) + vv.at(2, c))).abs() < 1e-14);
            assert!((o.at(1, c) - vv.at(0, c)).abs() < 1e-14);
            assert_eq!(o.at(2, c), 0.0);
        }
    }

    #[test]
    fn vanilla_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_batch(4, 3, 1, 7);
        let g = NeighborGraph::from_pairs(4, vec![(0, 1), (0, 2), (0, 3), (1, 0), (2, 3), (3, 1), (3, 2)], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let (q, k, v) = (tape.leaf(normal(&mut rng, 4, 5)), tape.leaf(normal(&mut rng, 4, 5)), tape.leaf(normal(&mut rng, 4, 5)));
        let out = vanilla_head(&mut tape, &g, q, k, v).unwrap();
        let (qv, kv, vv) = (tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone());
        for i in 0..4 {
            let nb = g.neighbors(i);
            let logits: Vec<f64> = nb.iter().map(|&j| (0..5).map(|c| qv.at(i, c) * kv.at(j, c)).sum::<f64>() / 5f64.sqrt()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..5 {
                let direct: f64 = nb.iter().zip(&logits).map(|(&j, l)| l.exp() / z * vv.at(j, c)).sum();
                assert!((direct - tape.value(out).at(i, c)).abs() < 1e-9);
            }
        }
        let _ = b;
    }

    #[test]
    fn outputs_have_one_row_per_particle() {
        for (n, k, na) in [(5, 1, 0), (5, 1, 1), (9, 2, 2), (12, 3, 3), (7, 2, 0)] {
            let mut c = cfg(BackboneKind::Tie, true, false);
            c.abstract_particles = na;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let tie = Tie::new(&c, 3, k, &mut store, &mut rng).unwrap();
            let b = random_batch(n, 3, k, 9);
            let both = Batch::concat(&[b.clone(), random_batch(n, 3, k, 10)]).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let tr = tie.forward_trace(&mut tape, &p, &both).unwrap();
            assert_eq!(tape.value(tr.output).shape(), &[2 * n, 3]);
            assert_eq!(tape.value(tr.states[0]).rows(), 2 * n + 2 * na);
            assert!(tape.value(tr.output).is_finite());
        }
    }

    #[test]
    fn permutation_equivariance() {
        for (backbone, normalized) in [(BackboneKind::Tie, true), (BackboneKind::Tie, false), (BackboneKind::Vanilla, false)] {
            let mut c = cfg(backbone, normalized, false);
            c.abstract_particles = 2;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let tie = Tie::new(&c, 3, 2, &mut store, &mut rng).unwrap();
            let b = random_batch(10, 3, 2, 12);
            let perm: Vec<usize> = (0..10).map(|k| (k * 3 + 1) % 10).collect();
            let mut inv = [0; 10];
            for (k, &o) in perm.iter().enumerate() {
                inv[o] = k;
            }
            let x = Tensor::new(vec![10, 3], perm.iter().flat_map(|&o| b.x.row(o).to_vec()).collect()).unwrap();
            let ids: Vec<usize> = perm.iter().map(|&o| b.material_ids[o]).collect();
            let pairs = b.graph.pairs().map(|(i, j)| (inv[i], inv[j])).collect();
            let pb = Batch::single(x, NeighborGraph::from_pairs(10, pairs, 0.15).unwrap(), &ids, 2).unwrap();
            let run = |batch: &Batch<f64>| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let out = tie.forward(&mut tape, &p, batch).unwrap();
                tape.value(out).clone()
            };
            let (a, bb) = (run(&b), run(&pb));
            for (k, &o) in perm.iter().enumerate() {
                for col in 0..3 {
                    assert!((bb.at(k, col) - a.at(o, col)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn identity_encoder_and_weights_carry_tokens() {
        let mut c = cfg(BackboneKind::Tie, false, true);
        c.hidden = 4;
        c.heads = 1;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tie = Tie::new(&c, 4, 1, &mut store, &mut rng).unwrap();
        let enc = tie.encoder_weight_id().unwrap();
        *store.get_mut(enc) = Tensor::identity(4);
        let (_, w_r, _, _) = tie.block_weight_ids(0);
        *store.get_mut(w_r) = Tensor::identity(4);
        let (_, w_r1, _, w_m1) = tie.block_weight_ids(1);
        *store.get_mut(w_r1) = Tensor::zeros(&[4, 4]);
        *store.get_mut(w_m1.unwrap()) = Tensor::identity(4);
        let b = random_batch(6, 4, 1, 14);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let tr = tie.forward_trace(&mut tape, &p, &b).unwrap();
        assert!(tape.value(tr.receivers[0]).max_abs_diff(&b.x) == 0.0);
        assert!(tape.value(tr.receivers[1]).max_abs_diff(&b.x) == 0.0);
    }

    #[test]
    fn zero_inputs_give_zero_tokens() {
        let c = cfg(BackboneKind::Tie, false, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tie = Tie::new(&c, 3, 1, &mut store, &mut rng).unwrap();
        let mut b = random_batch(5, 3, 1, 16);
        b.x = Tensor::zeros(&[5, 3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let tr = tie.forward_trace(&mut tape, &p, &b).unwrap();
        for v in tr.receivers.iter().chain(&tr.senders).chain(&tr.states) {
            assert!(tape.value(*v).data().iter().all(|x| *x == 0.0));
        }
    }
}
