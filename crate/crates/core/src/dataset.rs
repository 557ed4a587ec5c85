//! Rollout datasets and their on-disk layout.
//!
//! A dataset directory holds `meta.json` plus `train/rollout_%05d.bin` and
//! `valid/rollout_%05d.bin`. Each binary file is `T × N` records of six
//! little-endian `f32` values `(px, py, pz, qx, qy, qz)` followed by the first
//! eight bytes of the SHA-256 digest of that payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::particles::{SystemState, Vec3};
use crate::worlds::{generate_states, WorldSpec};

pub const CHECKSUM_BYTES: usize = 8;
const RECORD: usize = 6;

/// One trajectory stored as `T × N × 6` single-precision values.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    frames: usize,
    particles: usize,
    data: Vec<f32>,
}

impl Rollout {
    pub fn new(frames: usize, particles: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * particles * RECORD {
            return Err(Error::shape("Rollout::new", &[frames, particles, RECORD], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("rollout contains a non-finite value".into()));
        }
        Ok(Rollout { frames, particles, data })
    }

    pub fn from_states(states: &[SystemState]) -> Result<Self> {
        let n = states.first().map_or(0, SystemState::len);
        let mut data = Vec::with_capacity(states.len() * n * RECORD);
        for s in states {
            if s.len() != n {
                return Err(Error::Input("frames disagree on particle count".into()));
            }
            for p in &s.particles {
                data.extend(p.position.iter().chain(&p.velocity).map(|&v| v as f32));
            }
        }
        Rollout::new(states.len(), n, data)
    }

    /// Build from per-frame position and velocity arrays.
    pub fn from_frames(positions: &[Vec<Vec3>], velocities: &[Vec<Vec3>]) -> Result<Self> {
        let n = positions.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(positions.len() * n * RECORD);
        for (p, q) in positions.iter().zip(velocities) {
            if p.len() != n || q.len() != n {
                return Err(Error::Input("frames disagree on particle count".into()));
            }
            for (pi, qi) in p.iter().zip(q) {
                data.extend(pi.iter().chain(qi).map(|&v| v as f32));
            }
        }
        Rollout::new(positions.len(), n, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn record(&self, t: usize, i: usize) -> &[f32] {
        let o = (t * self.particles + i) * RECORD;
        &self.data[o..o + RECORD]
    }

    pub fn position(&self, t: usize, i: usize) -> Vec3 {
        let r = self.record(t, i);
        [r[0] as f64, r[1] as f64, r[2] as f64]
    }

    pub fn velocity(&self, t: usize, i: usize) -> Vec3 {
        let r = self.record(t, i);
        [r[3] as f64, r[4] as f64, r[5] as f64]
    }

    pub fn positions(&self, t: usize) -> Vec<Vec3> {
        (0..self.particles).map(|i| self.position(t, i)).collect()
    }

    pub fn velocities(&self, t: usize) -> Vec<Vec3> {
        (0..self.particles).map(|i| self.velocity(t, i)).collect()
    }

    /// Payload followed by its checksum.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4 + CHECKSUM_BYTES);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8], frames: usize, particles: usize, path: &Path) -> Result<Self> {
        let payload = frames * particles * RECORD * 4;
        let expected = (payload + CHECKSUM_BYTES) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let (body, sum) = bytes.split_at(payload);
        if checksum(body) != sum {
            return Err(Error::Checksum { path: path.to_path_buf() });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Rollout::new(frames, particles, data)
    }
}

pub fn checksum(payload: &[u8]) -> [u8; CHECKSUM_BYTES] {
    let digest = Sha256::digest(payload);
    let mut out = [0u8; CHECKSUM_BYTES];
    out.copy_from_slice(&digest[..CHECKSUM_BYTES]);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub world: WorldSpec,
    pub num_particles: usize,
    pub num_materials: usize,
    /// Width of the fixed attribute vector (material one-hot).
    pub attr_dim: usize,
    pub dt: f64,
    pub frames: usize,
    pub train_count: usize,
    pub valid_count: usize,
    pub material_ids: Vec<usize>,
    pub seed: u64,
}

impl DatasetMeta {
    fn check(&self) -> std::result::Result<(), String> {
        self.world.validate().map_err(|e| e.to_string())?;
        if self.num_particles != self.world.num_particles() || self.material_ids.len() != self.num_particles {
            return Err("particle count disagrees with the world counts".into());
        }
        if self.material_ids != self.world.material_ids() {
            return Err("material ids disagree with the world counts".into());
        }
        if self.num_materials != self.world.num_materials() || self.attr_dim != self.num_materials {
            return Err("material count or attribute width is inconsistent".into());
        }
        if self.frames < 2 {
            return Err("a dataset needs at least 2 frames per rollout".into());
        }
        if self.dt != self.world.dt {
            return Err("dt disagrees with the world spec".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutDataset {
    pub meta: DatasetMeta,
    pub train: Vec<Rollout>,
    pub valid: Vec<Rollout>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

/// Seed of rollout `index` in `split`, derived from the dataset seed.
pub fn rollout_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_u64,
        Split::Valid => 0x7661_u64,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 40) ^ index as u64
}

impl RolloutDataset {
    /// Generate every rollout with the reference integrator.
    pub fn generate(name: &str, world: WorldSpec, train: usize, valid: usize, frames: usize, seed: u64) -> Result<Self> {
        world.validate()?;
        let make = |split: Split, count: usize| -> Result<Vec<Rollout>> {
            (0..count)
                .map(|i| Rollout::from_states(&generate_states(&world, rollout_seed(seed, split, i), frames)?))
                .collect()
        };
        let train_rollouts = make(Split::Train, train)?;
        let valid_rollouts = make(Split::Valid, valid)?;
        let meta = DatasetMeta {
            name: name.to_string(),
            num_particles: world.num_particles(),
            num_materials: world.num_materials(),
            attr_dim: world.num_materials(),
            dt: world.dt,
            frames,
            train_count: train,
            valid_count: valid,
            material_ids: world.material_ids(),
            seed,
            world,
        };
        Ok(RolloutDataset {
            meta,
            train: train_rollouts,
            valid: valid_rollouts,
        })
    }

    pub fn split(&self, split: Split) -> &[Rollout] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        }
    }
}

pub fn rollout_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.dir()).join(format!("rollout_{index:05}.bin"))
}

pub fn write_dataset(dataset: &RolloutDataset, dir: &Path) -> Result<()> {
    for split in [Split::Train, Split::Valid] {
        let sub = dir.join(split.dir());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, r) in dataset.split(split).iter().enumerate() {
            let path = rollout_path(dir, split, i);
            fs::write(&path, r.encode()).map_err(|e| Error::io(&path, e))?;
        }
    }
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&dataset.meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&raw).map_err(|e| Error::Metadata {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    meta.check().map_err(|reason| Error::Metadata { path, reason })?;
    Ok(meta)
}

pub fn read_dataset(dir: &Path) -> Result<RolloutDataset> {
    let meta = read_meta(dir)?;
    let read_split = |split: Split, count: usize| -> Result<Vec<Rollout>> {
        (0..count)
            .map(|i| {
                let path = rollout_path(dir, split, i);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Rollout::decode(&bytes, meta.frames, meta.num_particles, &path)
            })
            .collect()
    };
    let train = read_split(Split::Train, meta.train_count)?;
    let valid = read_split(Split::Valid, meta.valid_count)?;
    Ok(RolloutDataset { meta, train, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::WorldKind;

    fn tiny() -> RolloutDataset {
        RolloutDataset::generate("tiny", WorldSpec::preset(WorldKind::BoxWash, 12), 2, 1, 5, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn payload_layout() {
        let r = Rollout::new(2, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]).unwrap();
        let bytes = r.encode();
        assert_eq!(bytes.len() - CHECKSUM_BYTES, 2 * 6 * 4);
        assert_eq!(&bytes[4..8], &1.0f32.to_le_bytes());
        assert_eq!(r.velocity(1, 0), [9.0, 10.0, 11.0]);
    }

    #[test]
    fn corrupt_files_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset(&ds, dir.path()).unwrap();
        let path = rollout_path(dir.path(), Split::Train, 1);
        let good = fs::read(&path).unwrap();

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Truncated { .. })));

        let mut flipped = good.clone();
        flipped[10] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum { .. })));

        fs::write(&path, &good).unwrap();
        fs::write(dir.path().join("meta.json"), b"{\"name\": 3}").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Metadata { .. })));
    }

    #[test]
    fn inconsistent_metadata_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.meta.num_particles += 1;
        write_dataset(&ds, dir.path()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Metadata { .. })));
    }

    #[test]
    fn stored_frames_integrate_consistently() {
        let ds = RolloutDataset::generate("s", WorldSpec::preset(WorldKind::BoxSplash, 64), 1, 0, 50, 11).unwrap();
        let r = &ds.train[0];
        for t in 0..r.frames() - 1 {
            let next = crate::particles::integrate_positions(&r.positions(t), &r.velocities(t + 1), ds.meta.dt).unwrap();
            for (a, b) in next.iter().zip(r.positions(t + 1)) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }
}
