//! Particle system state, the radius window, fixed-radius neighbor search and
//! per-channel normalization statistics.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Fixed attributes (material one-hot).
    pub attributes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub particles: Vec<ParticleState>,
    pub material_ids: Vec<usize>,
    pub step: usize,
}

impl SystemState {
    pub fn new(positions: &[Vec3], velocities: &[Vec3], material_ids: &[usize], step: usize) -> Result<Self> {
        if positions.len() != velocities.len() || positions.len() != material_ids.len() {
            return Err(Error::Input(format!(
                "state arrays disagree: {} positions, {} velocities, {} materials",
                positions.len(),
                velocities.len(),
                material_ids.len()
            )));
        }
        let k = material_ids.iter().max().map_or(0, |m| m + 1);
        let particles = positions
            .iter()
            .zip(velocities)
            .zip(material_ids)
            .map(|((&p, &q), &m)| {
                let mut attributes = vec![0.0; k];
                attributes[m] = 1.0;
                ParticleState {
                    position: p,
                    velocity: q,
                    attributes,
                }
            })
            .collect();
        let state = SystemState {
            particles,
            material_ids: material_ids.to_vec(),
            step,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn num_materials(&self) -> usize {
        self.material_ids.iter().max().map_or(0, |m| m + 1)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.particles.iter().map(|p| p.position).collect()
    }

    pub fn velocities(&self) -> Vec<Vec3> {
        self.particles.iter().map(|p| p.velocity).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles.is_empty() {
            return Err(Error::Input("system has no particles".into()));
        }
        let k = self.num_materials();
        let mut seen = vec![false; k];
        for &m in &self.material_ids {
            seen[m] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Input(format!("material ids are not dense: {missing} is unused")));
        }
        let d_a = self.particles[0].attributes.len();
        for (i, p) in self.particles.iter().enumerate() {
            let finite = p.position.iter().chain(&p.velocity).chain(&p.attributes).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Input(format!("particle {i} has a non-finite component")));
            }
            if p.attributes.len() != d_a {
                return Err(Error::Input(format!("particle {i} attribute length differs")));
            }
        }
        Ok(())
    }
}

/// `1(‖p_i − p_j‖₂ < R)`.
pub fn window(p_i: &Vec3, p_j: &Vec3, radius: f64) -> Result<bool> {
    if !(radius > 0.0) {
        return Err(Error::Input(format!("radius must be positive, got {radius}")));
    }
    if p_i.iter().chain(p_j).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite position".into()));
    }
    Ok(dist2(p_i, p_j) < radius * radius)
}

/// Directed interaction list sorted by `(receiver, sender)`, with CSR offsets by receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub num_nodes: usize,
    pub receivers: Arc<[usize]>,
    pub senders: Arc<[usize]>,
    /// `offsets[i]..offsets[i + 1]` are the pairs received by node `i`.
    pub offsets: Arc<[usize]>,
    pub radius: f64,
}

impl NeighborGraph {
    /// Build from an arbitrary pair list; pairs are sorted, duplicates kept.
    pub fn from_pairs(num_nodes: usize, mut pairs: Vec<(usize, usize)>, radius: f64) -> Result<Self> {
        if let Some(&(r, s)) = pairs.iter().find(|&&(r, s)| r >= num_nodes || s >= num_nodes) {
            return Err(Error::Input(format!("pair ({r}, {s}) out of range for {num_nodes} nodes")));
        }
        pairs.sort_unstable();
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(r, _) in &pairs {
            offsets[r + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        Ok(NeighborGraph {
            num_nodes,
            receivers: pairs.iter().map(|p| p.0).collect(),
            senders: pairs.iter().map(|p| p.1).collect(),
            offsets: offsets.into(),
            radius,
        })
    }

    pub fn empty(num_nodes: usize, radius: f64) -> Self {
        Self::from_pairs(num_nodes, Vec::new(), radius).expect("empty graph")
    }

    pub fn len(&self) -> usize {
        self.receivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receivers.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.receivers.iter().copied().zip(self.senders.iter().copied())
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.senders[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Disjoint union: node indices of `other` are shifted by `self.num_nodes`.
    pub fn disjoint_union(graphs: &[&NeighborGraph]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut base = 0;
        let mut radius = 0.0f64;
        for g in graphs {
            pairs.extend(g.pairs().map(|(r, s)| (r + base, s + base)));
            base += g.num_nodes;
            radius = radius.max(g.radius);
        }
        Self::from_pairs(base, pairs, radius)
    }
}

fn cell_of(p: &Vec3, inv: f64) -> (i64, i64, i64) {
    (
        (p[0] * inv).floor() as i64,
        (p[1] * inv).floor() as i64,
        (p[2] * inv).floor() as i64,
    )
}

/// All pairs `(i, j)`, `i ≠ j`, with `‖p_i − p_j‖ < R`, found with a uniform
/// hash grid of cell size `R`.
pub fn build_neighbor_graph(positions: &[Vec3], radius: f64) -> Result<NeighborGraph> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Input(format!("radius must be positive, got {radius}")));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite position".into()));
    }
    let inv = 1.0 / radius;
    let r2 = radius * radius;
    let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells.entry(cell_of(p, inv)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let mut found = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let (cx, cy, cz) = cell_of(p, inv);
        found.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(members) = cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        found.extend(
                            members
                                .iter()
                                .copied()
                                .filter(|&j| j != i && dist2(p, &positions[j]) < r2),
                        );
                    }
                }
            }
        }
        found.sort_unstable();
        pairs.extend(found.iter().map(|&j| (i, j)));
    }
    NeighborGraph::from_pairs(positions.len(), pairs, radius)
}

/// `p + Δt · q̂`, element-wise.
pub fn integrate_positions(positions: &[Vec3], velocities: &[Vec3], dt: f64) -> Result<Vec<Vec3>> {
    if positions.len() != velocities.len() {
        return Err(Error::shape("integrate_positions", &[positions.len(), 3], &[velocities.len(), 3]));
    }
    if !(dt > 0.0) {
        return Err(Error::Input(format!("dt must be positive, got {dt}")));
    }
    Ok(positions
        .iter()
        .zip(velocities)
        .map(|(p, q)| [p[0] + dt * q[0], p[1] + dt * q[1], p[2] + dt * q[2]])
        .collect())
}

pub const MIN_STD: f64 = 1e-8;

/// Mean and standard deviation per input channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over rows of equal width. Channels whose spread
    /// is below [`MIN_STD`] are clamped and reported with a warning.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut shift: Vec<f64> = Vec::new();
        for row in rows {
            if count == 0 {
                shift = row.to_vec();
                sum = vec![0.0; row.len()];
                sum_sq = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(Error::Input("rows of different width".into()));
            }
            for (c, &v) in row.iter().enumerate() {
                let d = v - shift[c];
                sum[c] += d;
                sum_sq[c] += d * d;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("cannot compute statistics of an empty dataset".into()));
        }
        let n = count as f64;
        let mut mean = Vec::with_capacity(sum.len());
        let mut std = Vec::with_capacity(sum.len());
        for c in 0..sum.len() {
            let m = sum[c] / n;
            let var = (sum_sq[c] / n - m * m).max(0.0);
            mean.push(shift[c] + m);
            let s = var.sqrt();
            if s < MIN_STD {
                log::warn!("channel {c} is constant; std clamped to {MIN_STD}");
                std.push(MIN_STD);
            } else {
                std.push(s);
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}
