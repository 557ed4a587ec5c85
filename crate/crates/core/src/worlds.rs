//! Reference spring-damper integrator for small multi-material particle worlds.
//!
//! All particles have unit mass. One step applies gravity, pairwise contact
//! repulsion, bond springs and soft wall springs, updates velocities, then
//! resolves wall penetration at the velocity level so that
//! `p^{t+1} = p^t + Δt · q^{t+1}` holds exactly for every recorded frame.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::{build_neighbor_graph, dist2, SystemState, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    /// Two fluid blobs thrown at each other in free space.
    DropMerge,
    /// A fluid block in a box whose +x wall moves.
    BoxSplash,
    /// A bonded soft blob on a floor squeezed by two plates.
    GripBlock,
    /// A fluid block and a stiffly bonded cube in a closed box.
    BoxWash,
}

impl WorldKind {
    pub fn num_materials(self) -> usize {
        match self {
            WorldKind::BoxWash => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for WorldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown world kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
    /// Particles per material; particles are stored grouped by material.
    pub counts: Vec<usize>,
    pub dt: f64,
    pub gravity: Vec3,
    /// Lattice spacing of initial placements.
    pub spacing: f64,
    /// Contact repulsion acts between unbonded pairs closer than this.
    pub force_radius: f64,
    pub repulsion: f64,
    pub contact_damping: f64,
    /// Per material; zero means unbonded (fluid).
    pub bond_stiffness: Vec<f64>,
    pub bond_damping: f64,
    /// Bonds join same-material particles initially closer than this.
    pub bond_radius: f64,
    /// Soft wall springs act within this distance of a plane.
    pub wall_margin: f64,
    pub wall_stiffness: f64,
    pub restitution: f64,
    pub box_lo: Vec3,
    pub box_hi: Vec3,
    /// Inward travel of moving planes.
    pub wall_amplitude: f64,
    /// Period of the moving-plane schedule in simulated time.
    pub wall_period: f64,
    /// Maximum magnitude per axis of random initial velocities.
    pub initial_speed: f64,
    /// Clip distance of the plane-distance input features.
    pub boundary_clip: f64,
}

impl WorldSpec {
    /// Desk-scale defaults for a kind with `n` particles in total.
    pub fn preset(kind: WorldKind, n: usize) -> Self {
        let counts = match kind {
            WorldKind::BoxWash => {
                let rigid = (n / 3).max(1);
                vec![n.saturating_sub(rigid).max(1), rigid]
            }
            _ => vec![n.max(1)],
        };
        let bond_stiffness = match kind {
            WorldKind::DropMerge | WorldKind::BoxSplash => vec![0.0],
            WorldKind::GripBlock => vec![400.0],
            WorldKind::BoxWash => vec![0.0, 1500.0],
        };
        let (box_hi, wall_amplitude, wall_period) = match kind {
            WorldKind::DropMerge => ([0.8, 0.8, 0.4], 0.0, 1.0),
            WorldKind::BoxSplash => ([0.4, 0.4, 0.3], 0.12, 0.6),
            WorldKind::GripBlock => ([0.4, 0.4, 0.3], 0.1, 1.0),
            WorldKind::BoxWash => ([0.5, 0.4, 0.3], 0.0, 1.0),
        };
        WorldSpec {
            kind,
            counts,
            dt: 0.01,
            gravity: [0.0, -3.0, 0.0],
            spacing: 0.05,
            force_radius: 0.06,
            repulsion: 300.0,
            contact_damping: 2.0,
            bond_stiffness,
            bond_damping: 1.0,
            bond_radius: 0.075,
            wall_margin: 0.025,
            wall_stiffness: 300.0,
            restitution: 0.2,
            box_lo: [0.0; 3],
            box_hi,
            wall_amplitude,
            wall_period,
            initial_speed: 0.5,
            boundary_clip: 0.1,
        }
    }

    pub fn num_particles(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn num_materials(&self) -> usize {
        self.counts.len()
    }

    pub fn material_ids(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(m, &c)| std::iter::repeat_n(m, c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("world spec: {what}")));
        if self.counts.is_empty() || self.counts.contains(&0) {
            return bad("every material needs at least one particle");
        }
        if self.counts.len() != self.kind.num_materials() {
            return bad("material count does not match the world kind");
        }
        if self.bond_stiffness.len() != self.counts.len() {
            return bad("bond_stiffness needs one entry per material");
        }
        let positive = [self.dt, self.spacing, self.force_radius, self.bond_radius, self.wall_period, self.boundary_clip];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("dt, spacing, radii, wall_period and boundary_clip must be positive");
        }
        let non_negative = [
            self.repulsion,
            self.contact_damping,
            self.bond_damping,
            self.wall_margin,
            self.wall_stiffness,
            self.wall_amplitude,
            self.initial_speed,
        ];
        if non_negative.iter().chain(&self.bond_stiffness).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("stiffness, damping, margin, amplitude and speed must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return bad("restitution must lie in [0, 1]");
        }
        if (0..3).any(|a| !(self.box_hi[a] > self.box_lo[a])) || self.gravity.iter().any(|g| !g.is_finite()) {
            return bad("box must have positive extent and gravity must be finite");
        }
        Ok(())
    }

    /// Kinematic planes bounding this world.
    pub fn planes(&self) -> Vec<Plane> {
        let (lo, hi) = (self.box_lo, self.box_hi);
        let fixed = |axis, inward, base| Plane {
            axis,
            inward,
            base,
            amplitude: 0.0,
            period: self.wall_period,
        };
        let moving = |axis, inward, base| Plane {
            axis,
            inward,
            base,
            amplitude: self.wall_amplitude,
            period: self.wall_period,
        };
        match self.kind {
            WorldKind::DropMerge => Vec::new(),
            WorldKind::BoxSplash => vec![
                fixed(0, 1.0, lo[0]),
                moving(0, -1.0, hi[0]),
                fixed(1, 1.0, lo[1]),
                fixed(1, -1.0, hi[1]),
                fixed(2, 1.0, lo[2]),
                fixed(2, -1.0, hi[2]),
            ],
            WorldKind::GripBlock => vec![moving(0, 1.0, lo[0]), moving(0, -1.0, hi[0]), fixed(1, 1.0, lo[1])],
            WorldKind::BoxWash => vec![
                fixed(0, 1.0, lo[0]),
                fixed(0, -1.0, hi[0]),
                fixed(1, 1.0, lo[1]),
                fixed(1, -1.0, hi[1]),
                fixed(2, 1.0, lo[2]),
                fixed(2, -1.0, hi[2]),
            ],
        }
    }

    /// Width of the per-particle boundary feature vector.
    pub fn boundary_dim(&self) -> usize {
        self.planes().iter().map(|p| if p.is_moving() { 2 } else { 1 }).sum()
    }

    /// Per particle: clipped distance to each plane, then the normal
    /// velocity of each moving plane, at frame `step`.
    pub fn boundary_features(&self, step: usize, positions: &[Vec3]) -> Vec<Vec<f64>> {
        let planes = self.planes();
        let t = step as f64 * self.dt;
        positions
            .iter()
            .map(|p| {
                let mut f = Vec::with_capacity(self.boundary_dim());
                for plane in &planes {
                    f.push(plane.distance(p, t).clamp(-self.boundary_clip, self.boundary_clip));
                    if plane.is_moving() {
                        f.push(plane.inward * plane.velocity(t, self.dt));
                    }
                }
                f
            })
            .collect()
    }

    fn extent(&self) -> f64 {
        (0..3).map(|a| self.box_hi[a] - self.box_lo[a]).fold(0.0, f64::max)
    }
}

/// Axis-aligned plane; particles live on the side `inward · (x − position) ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub axis: usize,
    pub inward: f64,
    pub base: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl Plane {
    pub fn is_moving(&self) -> bool {
        self.amplitude > 0.0
    }

    /// Coordinate at time `t`; moving planes travel inward along `(1 − cos)/2`.
    pub fn position(&self, t: f64) -> f64 {
        let travel = 0.5 * self.amplitude * (1.0 - (2.0 * PI * t / self.period).cos());
        self.base + self.inward * travel
    }

    /// Mean velocity over the step starting at `t`.
    pub fn velocity(&self, t: f64, dt: f64) -> f64 {
        (self.position(t + dt) - self.position(t)) / dt
    }

    pub fn distance(&self, p: &Vec3, t: f64) -> f64 {
        self.inward * (p[self.axis] - self.position(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
}

/// A world instance: spec plus the bonds formed from the initial placement.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub bonds: Vec<Bond>,
    bonded: HashSet<(usize, usize)>,
    material_ids: Vec<usize>,
}

/// Result of one reference step with the external impulses it applied.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub state: SystemState,
    pub wall_impulse: Vec3,
    pub gravity_impulse: Vec3,
}

fn add(a: &mut Vec3, b: Vec3, s: f64) {
    for k in 0..3 {
        a[k] += s * b[k];
    }
}

impl World {
    pub fn new(spec: WorldSpec, initial: &SystemState) -> Result<Self> {
        spec.validate()?;
        if initial.len() != spec.num_particles() || initial.material_ids != spec.material_ids() {
            return Err(Error::Input("state does not match the world's particle counts".into()));
        }
        let positions = initial.positions();
        let graph = build_neighbor_graph(&positions, spec.bond_radius)?;
        let mut bonds = Vec::new();
        for (i, j) in graph.pairs() {
            let m = initial.material_ids[i];
            if i < j && m == initial.material_ids[j] && spec.bond_stiffness[m] > 0.0 {
                bonds.push(Bond {
                    i,
                    j,
                    rest: dist2(&positions[i], &positions[j]).sqrt(),
                });
            }
        }
        let bonded = bonds.iter().map(|b| (b.i, b.j)).collect();
        Ok(World {
            material_ids: initial.material_ids.clone(),
            spec,
            bonds,
            bonded,
        })
    }

    /// Sum of pairwise (contact and bond) forces on each particle.
    pub fn internal_forces(&self, positions: &[Vec3], velocities: &[Vec3]) -> Result<Vec<Vec3>> {
        let s = &self.spec;
        let mut f = vec![[0.0; 3]; positions.len()];
        let pair_force = |i: usize, j: usize, stretch: f64, k: f64, c: f64, f: &mut Vec<Vec3>| {
            let d = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r < 1e-12 {
                return;
            }
            let n = [d[0] / r, d[1] / r, d[2] / r];
            let closing = (0..3).map(|a| (velocities[i][a] - velocities[j][a]) * n[a]).sum::<f64>();
            let mag = -k * stretch - c * closing;
            add(&mut f[i], n, mag);
            add(&mut f[j], n, -mag);
        };
        if s.repulsion > 0.0 || s.contact_damping > 0.0 {
            let graph = build_neighbor_graph(positions, s.force_radius)?;
            for (i, j) in graph.pairs() {
                if i < j && !self.bonded.contains(&(i, j)) {
                    let r = dist2(&positions[i], &positions[j]).sqrt();
                    pair_force(i, j, r - s.force_radius, s.repulsion, s.contact_damping, &mut f);
                }
            }
        }
        for b in &self.bonds {
            let r = dist2(&positions[b.i], &positions[b.j]).sqrt();
            let k = s.bond_stiffness[self.material_ids[b.i]];
            pair_force(b.i, b.j, r - b.rest, k, s.bond_damping, &mut f);
        }
        Ok(f)
    }

    /// Kinetic plus potential energy (contacts, bonds, soft walls, gravity).
    pub fn energy(&self, state: &SystemState) -> Result<f64> {
        let s = &self.spec;
        let p = state.positions();
        let mut e = 0.0;
        for (pi, part) in p.iter().zip(&state.particles) {
            e += 0.5 * part.velocity.iter().map(|v| v * v).sum::<f64>();
            e -= (0..3).map(|a| s.gravity[a] * pi[a]).sum::<f64>();
        }
        let graph = build_neighbor_graph(&p, s.force_radius)?;
        for (i, j) in graph.pairs() {
            if i < j && !self.bonded.contains(&(i, j)) {
                let gap = s.force_radius - dist2(&p[i], &p[j]).sqrt();
                e += 0.5 * s.repulsion * gap * gap;
            }
        }
        for b in &self.bonds {
            let stretch = dist2(&p[b.i], &p[b.j]).sqrt() - b.rest;
            e += 0.5 * s.bond_stiffness[self.material_ids[b.i]] * stretch * stretch;
        }
        let t = state.step as f64 * s.dt;
        for plane in s.planes() {
            for pi in &p {
                let gap = s.wall_margin - plane.distance(pi, t);
                if gap > 0.0 {
                    e += 0.5 * s.wall_stiffness * gap * gap;
                }
            }
        }
        Ok(e)
    }

    pub fn step(&self, state: &SystemState) -> Result<SystemState> {
        Ok(self.step_report(state)?.state)
    }

    pub fn step_report(&self, state: &SystemState) -> Result<StepReport> {
        let s = &self.spec;
        if state.len() != s.num_particles() {
            return Err(Error::Input("state does not match the world's particle counts".into()));
        }
        let dt = s.dt;
        let t0 = state.step as f64 * dt;
        let t1 = t0 + dt;
        let positions = state.positions();
        let velocities = state.velocities();
        let forces = self.internal_forces(&positions, &velocities)?;
        let planes = s.planes();
        let n = state.len();
        let mut wall_impulse = [0.0; 3];
        let mut new_p = Vec::with_capacity(n);
        let mut new_q = Vec::with_capacity(n);
        for i in 0..n {
            let p = positions[i];
            let mut q = velocities[i];
            add(&mut q, s.gravity, dt);
            add(&mut q, forces[i], dt);
            for plane in &planes {
                let gap = s.wall_margin - plane.distance(&p, t0);
                if gap > 0.0 {
                    let dv = plane.inward * s.wall_stiffness * gap * dt;
                    q[plane.axis] += dv;
                    wall_impulse[plane.axis] += dv;
                }
            }
            for plane in &planes {
                let a = plane.axis;
                let w1 = plane.position(t1);
                let predicted = plane.inward * (p[a] + dt * q[a] - w1);
                if predicted < 0.0 {
                    let target = w1 + plane.inward * (-s.restitution * predicted);
                    let corrected = (target - p[a]) / dt;
                    wall_impulse[a] += corrected - q[a];
                    q[a] = corrected;
                }
            }
            new_p.push([p[0] + dt * q[0], p[1] + dt * q[1], p[2] + dt * q[2]]);
            new_q.push(q);
        }
        let center: Vec<f64> = (0..3).map(|a| 0.5 * (s.box_lo[a] + s.box_hi[a])).collect();
        let limit = 10.0 * s.extent();
        for (i, p) in new_p.iter().enumerate() {
            let far = (0..3).any(|a| !p[a].is_finite() || (p[a] - center[a]).abs() > limit);
            if far || new_q[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp(format!("particle {i} left the domain at step {}", state.step + 1)));
            }
        }
        let mut next = state.clone();
        next.step += 1;
        for (part, (p, q)) in next.particles.iter_mut().zip(new_p.into_iter().zip(new_q)) {
            part.position = p;
            part.velocity = q;
        }
        let gravity_impulse = [s.gravity[0] * dt * n as f64, s.gravity[1] * dt * n as f64, s.gravity[2] * dt * n as f64];
        Ok(StepReport {
            state: next,
            wall_impulse,
            gravity_impulse,
        })
    }
}

/// Advance `state` by one reference step; bonds are formed from `state` itself.
pub fn step_oracle(spec: &WorldSpec, state: &SystemState) -> Result<SystemState> {
    World::new(spec.clone(), state)?.step(state)
}

/// `n` lattice points of a cube-like block with jitter, starting at `origin`.
fn block(n: usize, spacing: f64, origin: Vec3, jitter: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    let side = (1..).find(|s| s * s * s >= n).unwrap_or(1);
    (0..n)
        .map(|k| {
            let (x, y, z) = (k % side, (k / side) % side, k / (side * side));
            let mut j = || if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            [
                origin[0] + spacing * x as f64 + j(),
                origin[1] + spacing * y as f64 + j(),
                origin[2] + spacing * z as f64 + j(),
            ]
        })
        .collect()
}

fn block_width(n: usize, spacing: f64) -> f64 {
    let side = (1..).find(|s| s * s * s >= n).unwrap_or(1);
    spacing * (side - 1) as f64
}

fn random_velocity(speed: f64, rng: &mut impl Rng) -> Vec3 {
    if speed == 0.0 {
        return [0.0; 3];
    }
    [
        rng.random_range(-speed..speed),
        rng.random_range(-speed..speed),
        rng.random_range(-speed..speed),
    ]
}

/// Seeded initial placement for a world kind.
pub fn initial_state(spec: &WorldSpec, seed: u64) -> Result<SystemState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi, h) = (spec.box_lo, spec.box_hi, spec.spacing);
    let jitter = 0.05 * h;
    let margin = spec.wall_margin + 0.5 * h;
    let uniform = |a: f64, b: f64, rng: &mut ChaCha8Rng| if b > a { rng.random_range(a..b) } else { a };
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    match spec.kind {
        WorldKind::DropMerge => {
            let n = spec.counts[0];
            let (na, nb) = (n / 2, n - n / 2);
            let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
            let speed = spec.initial_speed.max(0.1);
            for (count, side) in [(na, -1.0), (nb, 1.0)] {
                if count == 0 {
                    continue;
                }
                let w = block_width(count, h);
                let gap = uniform(0.05, 0.15, &mut rng);
                let origin = [
                    mid[0] + side * (gap + 0.5 * w) - 0.5 * w,
                    mid[1] + uniform(-0.1, 0.1, &mut rng) - 0.5 * w,
                    mid[2] - 0.5 * w,
                ];
                let v = [-side * uniform(0.5 * speed, speed, &mut rng), uniform(0.0, 0.5 * speed, &mut rng), 0.0];
                for p in block(count, h, origin, jitter, &mut rng) {
                    positions.push(p);
                    velocities.push(v);
                }
            }
        }
        WorldKind::BoxSplash => {
            let n = spec.counts[0];
            let w = block_width(n, h);
            let room = hi[0] - spec.wall_amplitude - lo[0] - 2.0 * margin - w;
            let origin = [
                lo[0] + margin + uniform(0.0, room.max(0.0), &mut rng),
                lo[1] + margin + uniform(0.0, 0.1, &mut rng),
                lo[2] + margin + uniform(0.0, (hi[2] - lo[2] - 2.0 * margin - w).max(0.0), &mut rng),
            ];
            let v = random_velocity(spec.initial_speed, &mut rng);
            for p in block(n, h, origin, jitter, &mut rng) {
                positions.push(p);
                velocities.push(v);
            }
        }
        WorldKind::GripBlock => {
            let n = spec.counts[0];
            let w = block_width(n, h);
            let origin = [
                0.5 * (lo[0] + hi[0]) - 0.5 * w + uniform(-0.02, 0.02, &mut rng),
                lo[1] + margin + uniform(0.0, 0.02, &mut rng),
                0.5 * (lo[2] + hi[2]) - 0.5 * w,
            ];
            let v = [uniform(-0.2, 0.2, &mut rng), 0.0, uniform(-0.2, 0.2, &mut rng)];
            for p in block(n, h, origin, jitter, &mut rng) {
                positions.push(p);
                velocities.push(v);
            }
        }
        WorldKind::BoxWash => {
            let (nf, nr) = (spec.counts[0], spec.counts[1]);
            let wf = block_width(nf, h);
            let wr = block_width(nr, h);
            let origin_f = [
                lo[0] + margin + uniform(0.0, 0.05, &mut rng),
                lo[1] + margin + uniform(0.0, 0.1, &mut rng),
                lo[2] + margin,
            ];
            let vf = [uniform(0.5, 1.0, &mut rng) * spec.initial_speed.max(0.1), 0.0, 0.0];
            for p in block(nf, h, origin_f, jitter, &mut rng) {
                positions.push(p);
                velocities.push(vf);
            }
            let origin_r = [
                hi[0] - margin - wr - uniform(0.0, 0.1, &mut rng),
                lo[1] + margin,
                lo[2] + margin + uniform(0.0, (hi[2] - lo[2] - 2.0 * margin - wr).max(0.0), &mut rng),
            ];
            let _ = wf;
            for p in block(nr, h, origin_r, 0.0, &mut rng) {
                positions.push(p);
                velocities.push([0.0; 3]);
            }
        }
    }
    SystemState::new(&positions, &velocities, &spec.material_ids(), 0)
}

/// `T` frames of the reference trajectory from the seeded initial state.
pub fn generate_states(spec: &WorldSpec, seed: u64, frames: usize) -> Result<Vec<SystemState>> {
    if frames < 2 {
        return Err(Error::Input(format!("a rollout needs at least 2 frames, got {frames}")));
    }
    let first = initial_state(spec, seed)?;
    let world = World::new(spec.clone(), &first)?;
    let mut out = Vec::with_capacity(frames);
    out.push(first);
    for _ in 1..frames {
        let next = world.step(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}
