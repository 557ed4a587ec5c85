//! Model configuration and backbone dispatch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::gnn::Gnn;
use crate::nn::{Bound, ParamStore};
use crate::tensor::Scalar;
use crate::tie::Tie;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gnn,
    Vanilla,
    Tie,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gnn" => Ok(BackboneKind::Gnn),
            "vanilla" => Ok(BackboneKind::Vanilla),
            "tie" => Ok(BackboneKind::Tie),
            _ => Err(Error::Config(format!("unknown backbone {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub normalized_attention: bool,
    /// Number of blocks (TIE, vanilla) or propagation rounds (GNN).
    pub blocks: usize,
    /// Token / feature width `d`.
    pub hidden: usize,
    pub heads: usize,
    /// Hidden width of the post-attention and GNN MLPs.
    pub mlp_hidden: usize,
    /// Abstract particles: 0 or the number of materials.
    pub abstract_particles: usize,
    /// Normal particles also attend to their material's abstract particle.
    pub bidirectional_abstract: bool,
    /// Frames of state history in the input.
    pub history: usize,
    pub radius: f64,
    /// Bias-free single linear maps everywhere, no post-processing.
    pub linear: bool,
    pub aggregator: Aggregator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tie,
            normalized_attention: true,
            blocks: 4,
            hidden: 128,
            heads: 4,
            mlp_hidden: 256,
            abstract_particles: 0,
            bidirectional_abstract: true,
            history: 1,
            radius: 0.08,
            linear: false,
            aggregator: Aggregator::Sum,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, num_materials: usize) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_hidden == 0 || self.history == 0 {
            return Err(Error::Config("blocks, hidden, heads, mlp_hidden and history must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("radius must be positive".into()));
        }
        if self.abstract_particles != 0 && self.abstract_particles != num_materials {
            return Err(Error::Config(format!(
                "abstract_particles must be 0 or the material count {num_materials}, got {}",
                self.abstract_particles
            )));
        }
        if !self.linear && self.hidden < 2 {
            return Err(Error::Config("layer norm needs hidden ≥ 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// A constructed backbone; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Model {
    Gnn(Gnn),
    Attention(Tie),
}

impl Model {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        d_in: usize,
        num_materials: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(num_materials)?;
        Ok(match cfg.backbone {
            BackboneKind::Gnn => Model::Gnn(Gnn::new(cfg, d_in, store, rng)?),
            BackboneKind::Tie | BackboneKind::Vanilla => Model::Attention(Tie::new(cfg, d_in, num_materials, store, rng)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Gnn(g) => &g.cfg,
            Model::Attention(t) => &t.cfg,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Gnn(g) => g.d_in,
            Model::Attention(t) => t.d_in,
        }
    }

    /// Normalized velocity predictions, one row per input particle.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<Var> {
        if batch.x.cols() != self.input_dim() {
            return Err(Error::shape("model input", &[batch.rows(), self.input_dim()], batch.x.shape()));
        }
        match self {
            Model::Gnn(g) => g.forward(tape, p, batch),
            Model::Attention(t) => t.forward(tape, p, batch),
        }
    }
}
