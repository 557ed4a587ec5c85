//! Model inputs: normalized state history, material one-hot and boundary
//! features per particle, plus the neighbor graph of the newest frame.

use std::sync::Arc;

use crate::dataset::{Rollout, RolloutDataset};
use crate::error::{Error, Result};
use crate::particles::{build_neighbor_graph, NeighborGraph, NormStats, Vec3};
use crate::tensor::{Scalar, Tensor};
use crate::worlds::WorldSpec;

/// Normalization channel layout: position (3), velocity (3), attributes, boundary.
pub const POS: usize = 0;
pub const VEL: usize = 3;

/// Per-frame kinematic state.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl Frame {
    pub fn of(rollout: &Rollout, t: usize) -> Self {
        Frame {
            positions: rollout.positions(t),
            velocities: rollout.velocities(t),
        }
    }
}

/// A batch of one or more systems laid out as a disjoint union.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `ΣN × d_in` normalized inputs.
    pub x: Tensor<T>,
    pub graph: NeighborGraph,
    pub material_ids: Arc<[usize]>,
    /// Particles per system, in row order.
    pub sizes: Vec<usize>,
    pub num_materials: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn single(x: Tensor<T>, graph: NeighborGraph, material_ids: &[usize], num_materials: usize) -> Result<Self> {
        let n = x.rows();
        if graph.num_nodes != n || material_ids.len() != n {
            return Err(Error::shape("Batch::single", &[n], &[graph.num_nodes, material_ids.len()]));
        }
        if let Some(&m) = material_ids.iter().find(|&&m| m >= num_materials) {
            return Err(Error::Input(format!("material id {m} out of range for {num_materials} materials")));
        }
        Ok(Batch {
            x,
            graph,
            material_ids: material_ids.into(),
            sizes: vec![n],
            num_materials,
        })
    }

    pub fn concat(parts: &[Batch<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let d_in = first.x.cols();
        let mut data = Vec::new();
        let mut ids = Vec::new();
        let mut sizes = Vec::new();
        for p in parts {
            if p.x.cols() != d_in || p.num_materials != first.num_materials {
                return Err(Error::shape("Batch::concat", first.x.shape(), p.x.shape()));
            }
            data.extend_from_slice(p.x.data());
            ids.extend_from_slice(&p.material_ids);
            sizes.extend_from_slice(&p.sizes);
        }
        let graphs: Vec<&NeighborGraph> = parts.iter().map(|p| &p.graph).collect();
        let rows = ids.len();
        Ok(Batch {
            x: Tensor::new(vec![rows, d_in], data)?,
            graph: NeighborGraph::disjoint_union(&graphs)?,
            material_ids: ids.into(),
            sizes,
            num_materials: first.num_materials,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

/// Builds normalized inputs and targets for one dataset.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub world: WorldSpec,
    pub material_ids: Vec<usize>,
    pub num_materials: usize,
    pub stats: NormStats,
    pub history: usize,
    pub radius: f64,
}

fn raw_channels(world: &WorldSpec, material_ids: &[usize], k: usize, step: usize, frame: &Frame) -> Vec<Vec<f64>> {
    let boundary = world.boundary_features(step, &frame.positions);
    (0..frame.positions.len())
        .map(|i| {
            let mut row = Vec::with_capacity(6 + k + boundary[i].len());
            row.extend_from_slice(&frame.positions[i]);
            row.extend_from_slice(&frame.velocities[i]);
            row.extend((0..k).map(|m| if material_ids[i] == m { 1.0 } else { 0.0 }));
            row.extend_from_slice(&boundary[i]);
            row
        })
        .collect()
}

/// Channel statistics over every frame and particle of the training split.
pub fn compute_norm_stats(dataset: &RolloutDataset) -> Result<NormStats> {
    if dataset.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let meta = &dataset.meta;
    let mut rows = Vec::new();
    for r in &dataset.train {
        for t in 0..r.frames() {
            rows.extend(raw_channels(&meta.world, &meta.material_ids, meta.num_materials, t, &Frame::of(r, t)));
        }
    }
    NormStats::from_rows(rows.iter().map(Vec::as_slice))
}

impl Featurizer {
    pub fn new(dataset: &RolloutDataset, stats: NormStats, history: usize, radius: f64) -> Result<Self> {
        if history == 0 {
            return Err(Error::Config("history must be at least 1".into()));
        }
        let meta = &dataset.meta;
        let f = Featurizer {
            world: meta.world.clone(),
            material_ids: meta.material_ids.clone(),
            num_materials: meta.num_materials,
            stats,
            history,
            radius,
        };
        if f.stats.channels() != f.channel_count() {
            return Err(Error::shape("Featurizer::new", &[f.channel_count()], &[f.stats.channels()]));
        }
        Ok(f)
    }

    fn channel_count(&self) -> usize {
        6 + self.num_materials + self.world.boundary_dim()
    }

    /// Input width: `6 · H + K + boundary`.
    pub fn input_dim(&self) -> usize {
        6 * self.history + self.num_materials + self.world.boundary_dim()
    }

    /// Inputs at frame `step` from `frames` (oldest first, newest last);
    /// missing history repeats the oldest frame.
    pub fn batch<T: Scalar>(&self, frames: &[&Frame], step: usize) -> Result<Batch<T>> {
        let newest = *frames.last().ok_or_else(|| Error::Input("no frames given".into()))?;
        let n = newest.positions.len();
        if n != self.material_ids.len() || frames.iter().any(|f| f.positions.len() != n || f.velocities.len() != n) {
            return Err(Error::shape("Featurizer::batch", &[self.material_ids.len()], &[n]));
        }
        let d_in = self.input_dim();
        let current = raw_channels(&self.world, &self.material_ids, self.num_materials, step, newest);
        let mut data = Vec::with_capacity(n * d_in);
        for i in 0..n {
            for h in 0..self.history {
                let back = self.history - 1 - h;
                let f = frames[frames.len().saturating_sub(1 + back)];
                for a in 0..3 {
                    data.push(T::from_f(self.stats.normalize(POS + a, f.positions[i][a])));
                }
                for a in 0..3 {
                    data.push(T::from_f(self.stats.normalize(VEL + a, f.velocities[i][a])));
                }
            }
            for (c, &v) in current[i].iter().enumerate().skip(6) {
                data.push(T::from_f(self.stats.normalize(c, v)));
            }
        }
        let graph = build_neighbor_graph(&newest.positions, self.radius)?;
        Batch::single(Tensor::new(vec![n, d_in], data)?, graph, &self.material_ids, self.num_materials)
    }

    /// Inputs for predicting frame `t + 1` of a stored rollout.
    pub fn rollout_batch<T: Scalar>(&self, rollout: &Rollout, t: usize) -> Result<Batch<T>> {
        let first = t.saturating_sub(self.history - 1);
        let frames: Vec<Frame> = (first..=t).map(|s| Frame::of(rollout, s)).collect();
        let refs: Vec<&Frame> = frames.iter().collect();
        self.batch(&refs, t)
    }

    /// Normalized velocity target `N × 3`.
    pub fn target<T: Scalar>(&self, velocities: &[Vec3]) -> Result<Tensor<T>> {
        let data = velocities
            .iter()
            .flat_map(|q| (0..3).map(move |a| T::from_f(self.stats.normalize(VEL + a, q[a]))))
            .collect();
        Tensor::new(vec![velocities.len(), 3], data)
    }

    pub fn denormalize_velocity<T: Scalar>(&self, out: &Tensor<T>) -> Result<Vec<Vec3>> {
        if out.cols() != 3 {
            return Err(Error::shape("denormalize_velocity", out.shape(), &[out.rows(), 3]));
        }
        Ok((0..out.rows())
            .map(|i| {
                let r = out.row(i);
                [
                    self.stats.denormalize(VEL, r[0].to_f()),
                    self.stats.denormalize(VEL + 1, r[1].to_f()),
                    self.stats.denormalize(VEL + 2, r[2].to_f()),
                ]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::WorldKind;

    fn dataset() -> RolloutDataset {
        RolloutDataset::generate("f", WorldSpec::preset(WorldKind::BoxSplash, 27), 3, 1, 12, 4).unwrap()
    }

    #[test]
    fn normalized_training_channels_are_standardized() {
        let ds = dataset();
        let stats = compute_norm_stats(&ds).unwrap();
        let f = Featurizer::new(&ds, stats, 1, 0.08).unwrap();
        let mut cols = vec![Vec::new(); f.input_dim()];
        for r in &ds.train {
            for t in 0..r.frames() {
                let b = f.rollout_batch::<f64>(r, t).unwrap();
                for i in 0..b.rows() {
                    for (c, v) in b.x.row(i).iter().enumerate() {
                        cols[c].push(*v);
                    }
                }
            }
        }
        for (c, col) in cols.iter().enumerate() {
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            // Constant channels normalize to zero.
            assert!((var - 1.0).abs() < 1e-9 || var < 1e-12, "channel {c} var {var}");
        }
    }

    #[test]
    fn target_roundtrip() {
        let ds = dataset();
        let f = Featurizer::new(&ds, compute_norm_stats(&ds).unwrap(), 2, 0.08).unwrap();
        let q = ds.valid[0].velocities(5);
        let back = f.denormalize_velocity(&f.target::<f64>(&q).unwrap()).unwrap();
        for (a, b) in q.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn history_repeats_the_first_frame() {
        let ds = dataset();
        let f = Featurizer::new(&ds, compute_norm_stats(&ds).unwrap(), 3, 0.08).unwrap();
        assert_eq!(f.input_dim(), 18 + 1 + 7);
        let b = f.rollout_batch::<f64>(&ds.train[0], 0).unwrap();
        let row = b.x.row(4);
        assert_eq!(&row[0..6], &row[6..12]);
        assert_eq!(&row[0..6], &row[12..18]);
        let b = f.rollout_batch::<f64>(&ds.train[0], 5).unwrap();
        assert_ne!(&b.x.row(4)[0..6], &b.x.row(4)[12..18]);
    }

    #[test]
    fn concat_offsets_graphs() {
        let ds = dataset();
        let f = Featurizer::new(&ds, compute_norm_stats(&ds).unwrap(), 1, 0.08).unwrap();
        let a = f.rollout_batch::<f32>(&ds.train[0], 3).unwrap();
        let b = f.rollout_batch::<f32>(&ds.train[1], 3).unwrap();
        let both = Batch::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both.rows(), 54);
        assert_eq!(both.graph.len(), a.graph.len() + b.graph.len());
        assert_eq!(both.sizes, vec![27, 27]);
        assert!(both.graph.pairs().skip(a.graph.len()).all(|(r, s)| r >= 27 && s >= 27));
    }
}
