//! One-step and recursive rollout evaluation against ground truth.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::Rollout;
use crate::error::{Error, Result};
use crate::features::{Featurizer, Frame};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::particles::{integrate_positions, SystemState, Vec3};
use crate::tensor::Scalar;
use crate::train::material_mse;
use crate::worlds::{World, WorldSpec};

/// Predicts world-unit velocities for the frame after the newest one.
pub trait Predictor {
    /// Called once per rollout with its first frame.
    fn reset(&mut self, _initial: &Frame) -> Result<()> {
        Ok(())
    }

    /// `frames` oldest first; `step` is the index of the newest frame.
    fn predict(&mut self, frames: &[&Frame], step: usize) -> Result<Vec<Vec3>>;

    /// Frames of history the predictor looks at.
    fn history(&self) -> usize {
        1
    }
}

pub struct ModelPredictor<'a, T: Scalar> {
    pub model: &'a Model,
    pub store: &'a ParamStore<T>,
    pub featurizer: &'a Featurizer,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&mut self, frames: &[&Frame], step: usize) -> Result<Vec<Vec3>> {
        let batch = self.featurizer.batch::<T>(frames, step)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let out = self.model.forward(&mut tape, &p, &batch)?;
        self.featurizer.denormalize_velocity(tape.value(out))
    }

    fn history(&self) -> usize {
        self.featurizer.history
    }
}

/// `q̂^(t+1) = q^t`.
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn predict(&mut self, frames: &[&Frame], _step: usize) -> Result<Vec<Vec3>> {
        let newest = frames.last().ok_or_else(|| Error::Input("no frames given".into()))?;
        Ok(newest.velocities.clone())
    }
}

/// The simulator itself, rebuilt from each rollout's first frame.
pub struct OraclePredictor {
    spec: WorldSpec,
    world: Option<World>,
}

impl OraclePredictor {
    pub fn new(spec: WorldSpec) -> Self {
        OraclePredictor { spec, world: None }
    }
}

impl Predictor for OraclePredictor {
    fn reset(&mut self, initial: &Frame) -> Result<()> {
        let state = SystemState::new(&initial.positions, &initial.velocities, &self.spec.material_ids(), 0)?;
        self.world = Some(World::new(self.spec.clone(), &state)?);
        Ok(())
    }

    fn predict(&mut self, frames: &[&Frame], step: usize) -> Result<Vec<Vec3>> {
        let world = self.world.as_ref().ok_or_else(|| Error::Contract("oracle used before reset".into()))?;
        let f = frames.last().ok_or_else(|| Error::Input("no frames given".into()))?;
        let state = SystemState::new(&f.positions, &f.velocities, &self.spec.material_ids(), step)?;
        Ok(world.step(&state)?.velocities())
    }
}

/// Mean and population standard deviation over rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Per-material mean squared error, averaged over rollouts.
    pub per_material: Vec<f64>,
    pub rollouts: usize,
}

impl Summary {
    fn from_rollouts(m3se: &[f64], per_material: &[Vec<f64>]) -> Result<Self> {
        if m3se.is_empty() {
            return Err(Error::Input("nothing to summarize".into()));
        }
        let n = m3se.len() as f64;
        let mean = m3se.iter().sum::<f64>() / n;
        let std = (m3se.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let k = per_material[0].len();
        let per_material = (0..k).map(|m| per_material.iter().map(|r| r[m]).sum::<f64>() / n).collect();
        Ok(Summary {
            mean,
            std,
            per_material,
            rollouts: m3se.len(),
        })
    }
}

fn window(frames: &[Frame], t: usize, history: usize) -> Vec<&Frame> {
    frames[t + 1 - history.min(t + 1)..=t].iter().collect()
}

/// One-step M³SE per rollout over the first `steps` transitions (all if 0).
pub fn one_step(
    predictor: &mut dyn Predictor,
    truth: &[Rollout],
    material_ids: &[usize],
    num_materials: usize,
    steps: usize,
) -> Result<Summary> {
    let mut scores = Vec::with_capacity(truth.len());
    let mut per = Vec::with_capacity(truth.len());
    for r in truth {
        let frames: Vec<Frame> = (0..r.frames()).map(|t| Frame::of(r, t)).collect();
        predictor.reset(&frames[0])?;
        let last = if steps == 0 { r.frames() - 1 } else { steps.min(r.frames() - 1) };
        let mut acc = vec![0.0; num_materials];
        for t in 0..last {
            let q = predictor.predict(&window(&frames, t, predictor.history()), t)?;
            let m = material_mse(&q, &frames[t + 1].velocities, material_ids, num_materials)?;
            for (a, v) in acc.iter_mut().zip(&m) {
                *a += v / last as f64;
            }
        }
        scores.push(acc.iter().sum::<f64>() / num_materials as f64);
        per.push(acc);
    }
    Summary::from_rollouts(&scores, &per)
}

/// One recursive prediction from a ground-truth first frame.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// Predicted frames, starting with the ground-truth first frame.
    pub frames: Vec<Frame>,
    /// Velocity M³SE of each predicted frame.
    pub per_step: Vec<f64>,
    pub per_material: Vec<f64>,
    /// The prediction turned non-finite and was cut short.
    pub divergent: bool,
}

impl RolloutResult {
    pub fn m3se(&self) -> f64 {
        if self.per_step.is_empty() {
            return f64::NAN;
        }
        self.per_step.iter().sum::<f64>() / self.per_step.len() as f64
    }

    pub fn to_rollout(&self) -> Result<Rollout> {
        let p: Vec<Vec<Vec3>> = self.frames.iter().map(|f| f.positions.clone()).collect();
        let q: Vec<Vec<Vec3>> = self.frames.iter().map(|f| f.velocities.clone()).collect();
        Rollout::from_frames(&p, &q)
    }
}

/// Predict `steps` frames recursively; positions follow `p + Δt q̂` and the
/// neighbor graph is rebuilt by the predictor from predicted positions.
pub fn rollout(
    predictor: &mut dyn Predictor,
    truth: &Rollout,
    steps: usize,
    dt: f64,
    material_ids: &[usize],
    num_materials: usize,
) -> Result<RolloutResult> {
    if steps == 0 || steps >= truth.frames() {
        return Err(Error::Input(format!("rollout length {steps} must lie in 1..{}", truth.frames())));
    }
    let mut frames = vec![Frame::of(truth, 0)];
    predictor.reset(&frames[0])?;
    let mut per_step = Vec::with_capacity(steps);
    let mut per_material = vec![0.0; num_materials];
    let mut divergent = false;
    for t in 0..steps {
        let q = predictor.predict(&window(&frames, t, predictor.history()), t)?;
        if q.iter().flatten().any(|v| !v.is_finite()) {
            divergent = true;
            break;
        }
        let p = integrate_positions(&frames[t].positions, &q, dt)?;
        let m = material_mse(&q, &truth.velocities(t + 1), material_ids, num_materials)?;
        per_step.push(m.iter().sum::<f64>() / num_materials as f64);
        for (a, v) in per_material.iter_mut().zip(&m) {
            *a += v;
        }
        frames.push(Frame {
            positions: p,
            velocities: q,
        });
    }
    let done = per_step.len().max(1) as f64;
    per_material.iter_mut().for_each(|v| *v /= done);
    Ok(RolloutResult {
        frames,
        per_step,
        per_material,
        divergent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub steps: usize,
    pub m3se: Summary,
    /// Mean over finished rollouts of each step's M³SE.
    pub per_step: Vec<f64>,
    pub divergent: usize,
}

/// Recursive rollouts of every truth trajectory.
pub fn rollouts(
    predictor: &mut dyn Predictor,
    truth: &[Rollout],
    steps: usize,
    dt: f64,
    material_ids: &[usize],
    num_materials: usize,
) -> Result<(RolloutSummary, Vec<RolloutResult>)> {
    let results: Vec<RolloutResult> = truth
        .iter()
        .map(|r| rollout(predictor, r, steps, dt, material_ids, num_materials))
        .collect::<Result<_>>()?;
    let finished: Vec<&RolloutResult> = results.iter().filter(|r| !r.divergent).collect();
    let divergent = results.len() - finished.len();
    let scores: Vec<f64> = results.iter().map(RolloutResult::m3se).collect();
    let per: Vec<Vec<f64>> = results.iter().map(|r| r.per_material.clone()).collect();
    let per_step = (0..steps)
        .map(|t| finished.iter().map(|r| r.per_step[t]).sum::<f64>() / finished.len().max(1) as f64)
        .collect();
    Ok((
        RolloutSummary {
            steps,
            m3se: Summary::from_rollouts(&scores, &per)?,
            per_step,
            divergent,
        },
        results,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backbone: String,
    pub one_step: Summary,
    pub baseline_one_step: Summary,
    pub rollout: Option<RolloutSummary>,
    pub baseline_rollout: Option<RolloutSummary>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Write `rollout_000.bin`, `rollout_001.bin`, ... in the dataset payload format.
pub fn write_rollouts(dir: &Path, results: &[RolloutResult]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, r) in results.iter().enumerate() {
        let path = dir.join(format!("rollout_{k:03}.bin"));
        fs::write(&path, r.to_rollout()?.encode()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RolloutDataset;
    use crate::features::compute_norm_stats;
    use crate::model::ModelConfig;
    use crate::worlds::WorldKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset() -> RolloutDataset {
        RolloutDataset::generate("e", WorldSpec::preset(WorldKind::BoxSplash, 27), 2, 2, 12, 3).unwrap()
    }

    #[test]
    fn oracle_rollout_matches_truth() {
        let ds = dataset();
        let spec = ds.meta.world.clone();
        let mut oracle = OraclePredictor::new(spec.clone());
        let (summary, results) = rollouts(&mut oracle, &ds.valid, 10, spec.dt, &ds.meta.material_ids, 1).unwrap();
        // Truth is stored in single precision.
        assert!(summary.m3se.mean < 1e-9, "{}", summary.m3se.mean);
        assert_eq!(summary.divergent, 0);
        assert_eq!(results[0].frames.len(), 11);
    }

    #[test]
    fn single_step_rollout_equals_one_step() {
        let ds = dataset();
        let (summary, _) = rollouts(&mut ConstantVelocity, &ds.valid, 1, ds.meta.dt, &ds.meta.material_ids, 1).unwrap();
        let one = one_step(&mut ConstantVelocity, &ds.valid, &ds.meta.material_ids, 1, 1).unwrap();
        assert_eq!(summary.m3se.mean, one.mean);
    }

    #[test]
    fn constant_velocity_baseline_is_hand_computable() {
        let ds = dataset();
        let r = &ds.valid[0];
        let one = one_step(&mut ConstantVelocity, std::slice::from_ref(r), &ds.meta.material_ids, 1, 0).unwrap();
        let mut direct = 0.0;
        for t in 0..r.frames() - 1 {
            let (a, b) = (r.velocities(t), r.velocities(t + 1));
            direct += a.iter().zip(&b).map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>()).sum::<f64>() / 27.0;
        }
        assert!((one.mean - direct / (r.frames() - 1) as f64).abs() < 1e-15);
        assert_eq!(one.std, 0.0);
    }

    #[test]
    fn model_rollout_writes_decodable_files() {
        let ds = dataset();
        let stats = compute_norm_stats(&ds).unwrap();
        let cfg = ModelConfig {
            hidden: 8,
            heads: 2,
            mlp_hidden: 8,
            blocks: 1,
            ..ModelConfig::default()
        };
        let f = Featurizer::new(&ds, stats, 2, cfg.radius).unwrap();
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&cfg, f.input_dim(), 1, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut pred = ModelPredictor {
            model: &model,
            store: &store,
            featurizer: &f,
        };
        let (summary, results) = rollouts(&mut pred, &ds.valid, 5, ds.meta.dt, &ds.meta.material_ids, 1).unwrap();
        assert_eq!(summary.per_step.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        write_rollouts(dir.path(), &results).unwrap();
        let path = dir.path().join("rollout_001.bin");
        let back = Rollout::decode(&fs::read(&path).unwrap(), 6, 27, &path).unwrap();
        assert_eq!(back, results[1].to_rollout().unwrap());
        assert!(rollout(&mut pred, &ds.valid[0], 12, ds.meta.dt, &ds.meta.material_ids, 1).is_err());
    }
}
