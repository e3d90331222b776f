//! Dynamic occupancy grid: per-cell Bernoulli occupancy plus a fixed-size
//! set of weighted velocity particles, with the predict (motion) and
//! correct (measurement) steps of the Bayes filter.

use std::sync::Arc;

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridGeometry, Vec2};
use crate::sensing::{Label, ObservationGrid};

/// Covariance jitter added by [`fit_gaussian`], (m/s)^2.
pub const GAUSSIAN_JITTER: f64 = 1e-6;

/// Tolerance on per-cell weight normalization.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyLimits {
    pub floor: f64,
    pub ceiling: f64,
}

impl OccupancyLimits {
    pub const UNIT: OccupancyLimits = OccupancyLimits { floor: 0.0, ceiling: 1.0 };

    #[inline]
    pub fn clamp(&self, w: f64) -> f64 {
        w.clamp(self.floor, self.ceiling)
    }
}

impl Default for OccupancyLimits {
    fn default() -> Self {
        Self { floor: 0.02, ceiling: 0.99 }
    }
}

/// Constant-velocity motion model with Gaussian velocity and position noise,
/// plus the birth process that keeps empty cells populated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionModel {
    /// Seconds per motion step.
    pub dt: f64,
    /// Velocity noise covariance, (m/s)^2.
    pub velocity_noise: Matrix2<f64>,
    /// Position noise covariance, m^2.
    pub position_noise: Matrix2<f64>,
    pub birth_prob: f64,
    /// Std-dev of birth-prior particle velocities, m/s.
    pub birth_velocity_sigma: f64,
    pub limits: OccupancyLimits,
}

impl MotionModel {
    /// Defaults: 30 Hz steps, velocity noise 0.05 m/s per step, no position
    /// noise. The geometry is accepted for callers that scale noise with
    /// cell size.
    pub fn for_geometry(_geom: &GridGeometry) -> Self {
        Self {
            dt: 1.0 / 30.0,
            velocity_noise: Matrix2::identity() * 0.05f64.powi(2),
            position_noise: Matrix2::zeros(),
            birth_prob: 0.001,
            birth_velocity_sigma: 1.0,
            limits: OccupancyLimits::default(),
        }
    }

    /// Noise-free transport with no birth and no clamping.
    pub fn noiseless(dt: f64) -> Self {
        Self {
            dt,
            velocity_noise: Matrix2::zeros(),
            position_noise: Matrix2::zeros(),
            birth_prob: 0.0,
            birth_velocity_sigma: 0.0,
            limits: OccupancyLimits::UNIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        for (name, c) in [("velocity_noise", &self.velocity_noise), ("position_noise", &self.position_noise)] {
            if GaussianSampler::new(c).is_none() {
                return bad(format!("{name} must be symmetric positive semidefinite"));
            }
        }
        if !(0.0..1.0).contains(&self.birth_prob) {
            return bad(format!("birth_prob must lie in [0, 1), got {}", self.birth_prob));
        }
        if !(self.birth_velocity_sigma >= 0.0) {
            return bad("birth_velocity_sigma must be non-negative".into());
        }
        let l = self.limits;
        if !(0.0 <= l.floor && l.floor < l.ceiling && l.ceiling <= 1.0) {
            return bad(format!("occupancy limits must satisfy 0 <= floor < ceiling <= 1, got [{}, {}]", l.floor, l.ceiling));
        }
        Ok(())
    }
}

/// False positive / false negative rates of the occupancy observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorNoiseModel {
    pub false_positive: f64,
    pub false_negative: f64,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self { false_positive: 0.02, false_negative: 0.1 }
    }
}

impl SensorNoiseModel {
    pub const NOISELESS: SensorNoiseModel = SensorNoiseModel { false_positive: 0.0, false_negative: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let (fp, fn_) = (self.false_positive, self.false_negative);
        if !((0.0..1.0).contains(&fp) && (0.0..1.0).contains(&fn_) && fp + fn_ < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sensor noise must satisfy 0 <= fp, fn < 1 and fp + fn < 1, got fp={fp}, fn={fn_}"
            )));
        }
        Ok(())
    }

    /// `(P(z | o = 1), P(z | o = 0))` for a known label.
    #[inline]
    pub fn likelihoods(&self, label: Label) -> Option<(f64, f64)> {
        match label {
            Label::Occupied => Some((1.0 - self.false_negative, self.false_positive)),
            Label::Free => Some((self.false_negative, 1.0 - self.false_positive)),
            Label::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub truncation_count: u64,
    pub cells_updated: u64,
    pub mass_before: f64,
    pub mass_after: f64,
}

impl UpdateStats {
    pub fn accumulate(&mut self, other: &UpdateStats) {
        self.truncation_count += other.truncation_count;
        self.cells_updated += other.cells_updated;
        self.mass_after = other.mass_after;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub velocity: Vec2,
    pub weight: f64,
}

/// Draws from N(0, C) for a 2x2 PSD covariance via its Cholesky factor.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSampler {
    l11: f64,
    l21: f64,
    l22: f64,
}

impl GaussianSampler {
    pub fn new(cov: &Matrix2<f64>) -> Option<Self> {
        let (a, b, b2, c) = (cov[(0, 0)], cov[(1, 0)], cov[(0, 1)], cov[(1, 1)]);
        let scale = a.abs().max(c.abs()).max(1e-300);
        if (b - b2).abs() > 1e-12 * scale || a < 0.0 || c < 0.0 || a * c - b * b < -1e-12 * scale * scale {
            return None;
        }
        let l11 = a.sqrt();
        let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
        let l22 = (c - l21 * l21).max(0.0).sqrt();
        Some(Self { l11, l21, l22 })
    }

    pub fn isotropic(sigma: f64) -> Self {
        Self { l11: sigma, l21: 0.0, l22: sigma }
    }

    pub fn is_zero(&self) -> bool {
        self.l11 == 0.0 && self.l21 == 0.0 && self.l22 == 0.0
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        Vec2::new(self.l11 * z1, self.l21 * z1 + self.l22 * z2)
    }
}

/// Per-buffer scratch for particle transport, reused across updates.
#[derive(Debug, Clone, Default)]
struct TransportScratch {
    dest: Vec<u32>,
    velocity: Vec<Vec2>,
    mass: Vec<f64>,
    offsets: Vec<u32>,
    order: Vec<u32>,
    picks: Vec<usize>,
}

const DROPPED: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct DynamicOccupancyGrid {
    geom: Arc<GridGeometry>,
    particles_per_cell: usize,
    occupancy: Vec<f64>,
    velocities: Vec<Vec2>,
    weights: Vec<f64>,
    pub timestamp: f64,
    scratch: TransportScratch,
}

impl PartialEq for DynamicOccupancyGrid {
    fn eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self.timestamp == other.timestamp
            && self.occupancy == other.occupancy
            && self.velocities == other.velocities
            && self.weights == other.weights
    }
}

/// Fresh grid: every cell at the occupancy floor with `m` birth-prior
/// particles of uniform weight.
pub fn init_grid<R: Rng + ?Sized>(geom: Arc<GridGeometry>, model: &MotionModel, m: usize, rng: &mut R) -> Result<DynamicOccupancyGrid> {
    if m == 0 {
        return Err(Error::InvalidParameter("particle count must be at least 1".into()));
    }
    let n = geom.num_cells();
    let birth = GaussianSampler::isotropic(model.birth_velocity_sigma);
    let velocities = (0..n * m).map(|_| birth.sample(rng)).collect();
    Ok(DynamicOccupancyGrid {
        particles_per_cell: m,
        occupancy: vec![model.limits.floor; n],
        velocities,
        weights: vec![1.0 / m as f64; n * m],
        timestamp: 0.0,
        scratch: TransportScratch::default(),
        geom,
    })
}

impl DynamicOccupancyGrid {
    /// Builds a grid from raw per-cell arrays (row-major, `m` particles per
    /// cell). Used by snapshot decoding and tests.
    pub fn from_parts(
        geom: Arc<GridGeometry>,
        m: usize,
        occupancy: Vec<f64>,
        velocities: Vec<Vec2>,
        weights: Vec<f64>,
        timestamp: f64,
    ) -> Result<Self> {
        let n = geom.num_cells();
        if m == 0 || occupancy.len() != n || velocities.len() != n * m || weights.len() != n * m {
            return Err(Error::InvalidParameter(format!("grid arrays do not match {n} cells x {m} particles")));
        }
        Ok(Self { geom, particles_per_cell: m, occupancy, velocities, weights, timestamp, scratch: TransportScratch::default() })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn geometry_arc(&self) -> &Arc<GridGeometry> {
        &self.geom
    }

    pub fn particles_per_cell(&self) -> usize {
        self.particles_per_cell
    }

    pub fn num_cells(&self) -> usize {
        self.occupancy.len()
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    pub fn occupancy_mut(&mut self) -> &mut [f64] {
        &mut self.occupancy
    }

    /// Velocities and weights of cell `i`.
    #[inline]
    pub fn cell_particles(&self, i: usize) -> (&[Vec2], &[f64]) {
        let m = self.particles_per_cell;
        (&self.velocities[i * m..(i + 1) * m], &self.weights[i * m..(i + 1) * m])
    }

    pub fn cell_particles_mut(&mut self, i: usize) -> (&mut [Vec2], &mut [f64]) {
        let m = self.particles_per_cell;
        (&mut self.velocities[i * m..(i + 1) * m], &mut self.weights[i * m..(i + 1) * m])
    }

    pub fn particles(&self, i: usize) -> impl Iterator<Item = Particle> + '_ {
        let (v, w) = self.cell_particles(i);
        v.iter().zip(w).map(|(&velocity, &weight)| Particle { velocity, weight })
    }

    /// Particle-weighted mean velocity of cell `i`.
    pub fn mean_velocity(&self, i: usize) -> Vec2 {
        let (v, w) = self.cell_particles(i);
        v.iter().zip(w).fold(Vec2::zeros(), |acc, (v, &w)| acc + v * w)
    }

    pub fn total_mass(&self) -> f64 {
        self.occupancy.iter().sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.particles_per_cell == other.particles_per_cell && (Arc::ptr_eq(&self.geom, &other.geom) || *self.geom == *other.geom)
    }

    /// Overwrites `self` with the contents of `src` without reallocating.
    pub fn copy_from(&mut self, src: &Self) -> Result<()> {
        if !self.same_shape(src) {
            return Err(Error::GeometryMismatch);
        }
        self.occupancy.copy_from_slice(&src.occupancy);
        self.velocities.copy_from_slice(&src.velocities);
        self.weights.copy_from_slice(&src.weights);
        self.timestamp = src.timestamp;
        Ok(())
    }

    /// Checks the structural invariants: occupancies inside `limits`, exactly
    /// `m` particles per cell with weights summing to one.
    pub fn check_invariants(&self, limits: OccupancyLimits) -> std::result::Result<(), String> {
        let m = self.particles_per_cell;
        if self.velocities.len() != self.num_cells() * m || self.weights.len() != self.num_cells() * m {
            return Err("particle count is not M per cell".into());
        }
        for (i, &w) in self.occupancy.iter().enumerate() {
            if !(w >= limits.floor && w <= limits.ceiling) {
                return Err(format!("cell {i}: occupancy {w} outside [{}, {}]", limits.floor, limits.ceiling));
            }
        }
        for (i, ws) in self.weights.chunks_exact(m).enumerate() {
            let s: f64 = ws.iter().sum();
            if (s - 1.0).abs() > WEIGHT_TOLERANCE || ws.iter().any(|&p| p < 0.0) {
                return Err(format!("cell {i}: weights sum to {s}"));
            }
        }
        Ok(())
    }
}

/// Systematic (low-variance) resampling: `out` receives `m` indices into
/// `masses`, with `u0` in `[0, 1/m)` as the single random offset.
fn systematic_indices(masses: &[f64], total: f64, m: usize, u0: f64, out: &mut Vec<usize>) {
    out.clear();
    let step = 1.0 / m as f64;
    let mut k = 0;
    let mut cumulative = masses[0] / total;
    for s in 0..m {
        let u = u0 + s as f64 * step;
        while cumulative <= u && k + 1 < masses.len() {
            k += 1;
            cumulative += masses[k] / total;
        }
        out.push(k);
    }
}

/// Resamples a weighted set of `(velocity, mass)` pairs down to exactly `m`
/// particles of weight `1/m`. A set with no positive mass yields `m` fresh
/// birth-prior particles.
pub fn resample_particles<R: Rng + ?Sized>(incoming: &[(Vec2, f64)], m: usize, birth_velocity_sigma: f64, rng: &mut R) -> Vec<Particle> {
    let weight = 1.0 / m as f64;
    let total: f64 = incoming.iter().map(|p| p.1).sum();
    if incoming.is_empty() || !(total > 0.0) {
        let birth = GaussianSampler::isotropic(birth_velocity_sigma);
        return (0..m).map(|_| Particle { velocity: birth.sample(rng), weight }).collect();
    }
    let masses: Vec<f64> = incoming.iter().map(|p| p.1).collect();
    let u0 = rng.random::<f64>() * weight;
    let mut picks = Vec::with_capacity(m);
    systematic_indices(&masses, total, m, u0, &mut picks);
    picks.into_iter().map(|k| Particle { velocity: incoming[k].0, weight }).collect()
}

/// Predict step: moves every particle by its velocity plus noise, sums the
/// occupancy mass arriving in each destination cell and resamples the
/// arriving particles back to `M` per cell.
pub fn motion_update<R: Rng + ?Sized>(
    src: &DynamicOccupancyGrid,
    dst: &mut DynamicOccupancyGrid,
    model: &MotionModel,
    rng: &mut R,
) -> Result<UpdateStats> {
    if !src.same_shape(dst) {
        return Err(Error::GeometryMismatch);
    }
    let geom = &*src.geom;
    let n = src.num_cells();
    let m = src.particles_per_cell;
    let velocity_noise =
        GaussianSampler::new(&model.velocity_noise).ok_or_else(|| Error::InvalidParameter("velocity_noise is not PSD".into()))?;
    let position_noise =
        GaussianSampler::new(&model.position_noise).ok_or_else(|| Error::InvalidParameter("position_noise is not PSD".into()))?;
    let noisy_velocity = !velocity_noise.is_zero();
    let noisy_position = !position_noise.is_zero();

    let mut scratch = std::mem::take(&mut dst.scratch);
    let TransportScratch { dest, velocity, mass, offsets, order, picks } = &mut scratch;
    dest.clear();
    velocity.clear();
    mass.clear();
    offsets.clear();
    offsets.resize(n + 1, 0);

    // Transport every particle to the cell containing its displaced point.
    for i in 0..n {
        let occupancy = src.occupancy[i];
        let center = geom.cell_center(i);
        let (vs, ps) = src.cell_particles(i);
        for (&v, &p) in vs.iter().zip(ps) {
            let mut target = center + v * model.dt;
            if noisy_position {
                target += position_noise.sample(rng);
            }
            let moved = if noisy_velocity { v + velocity_noise.sample(rng) } else { v };
            let mass_in = occupancy * p;
            let cell = if mass_in > 0.0 {
                if geom.wrap {
                    Some(geom.cell_of_wrapped(target))
                } else {
                    geom.cell_of_open(target)
                }
            } else {
                None
            };
            match cell {
                Some(j) => {
                    dest.push(j as u32);
                    offsets[j + 1] += 1;
                }
                None => dest.push(DROPPED),
            }
            velocity.push(moved);
            mass.push(mass_in);
        }
    }

    // Bucket arrivals by destination, preserving source order.
    for j in 0..n {
        offsets[j + 1] += offsets[j];
    }
    order.clear();
    order.resize(offsets[n] as usize, 0);
    {
        let mut cursor: Vec<u32> = offsets[..n].to_vec();
        for (k, &j) in dest.iter().enumerate() {
            if j != DROPPED {
                let slot = &mut cursor[j as usize];
                order[*slot as usize] = k as u32;
                *slot += 1;
            }
        }
    }

    let birth = GaussianSampler::isotropic(model.birth_velocity_sigma);
    let weight = 1.0 / m as f64;
    let limits = model.limits;
    let mut stats = UpdateStats { mass_before: src.total_mass(), ..Default::default() };
    let mut bucket_mass: Vec<f64> = Vec::with_capacity(4 * m);

    for j in 0..n {
        let arrivals = &order[offsets[j] as usize..offsets[j + 1] as usize];
        let out_v = &mut dst.velocities[j * m..(j + 1) * m];
        dst.weights[j * m..(j + 1) * m].fill(weight);
        if arrivals.is_empty() {
            dst.occupancy[j] = limits.clamp(model.birth_prob);
            for v in out_v.iter_mut() {
                *v = birth.sample(rng);
            }
            continue;
        }
        stats.cells_updated += 1;
        bucket_mass.clear();
        bucket_mass.extend(arrivals.iter().map(|&k| mass[k as usize]));
        let raw: f64 = bucket_mass.iter().sum();
        if raw > 1.0 {
            stats.truncation_count += 1;
        }
        let prior = raw.min(1.0);
        dst.occupancy[j] = limits.clamp((prior + model.birth_prob * (1.0 - prior)).min(limits.ceiling));

        if arrivals.len() == 1 {
            out_v.fill(velocity[arrivals[0] as usize]);
        } else {
            let u0 = rng.random::<f64>() * weight;
            systematic_indices(&bucket_mass, raw, m, u0, picks);
            for (slot, &pick) in out_v.iter_mut().zip(picks.iter()) {
                *slot = velocity[arrivals[pick] as usize];
            }
        }
    }

    dst.scratch = scratch;
    dst.timestamp = src.timestamp + model.dt;
    stats.mass_after = dst.total_mass();
    Ok(stats)
}

/// Correct step: per-cell Bayes rule on OCCUPIED / FREE observations.
/// UNKNOWN cells and all particle sets are left untouched.
pub fn measurement_update(
    grid: &mut DynamicOccupancyGrid,
    obs: &ObservationGrid,
    noise: &SensorNoiseModel,
    limits: OccupancyLimits,
) -> Result<UpdateStats> {
    if obs.len() != grid.num_cells() {
        return Err(Error::GeometryMismatch);
    }
    let mut stats = UpdateStats { mass_before: grid.total_mass(), ..Default::default() };
    for (w, &label) in grid.occupancy.iter_mut().zip(obs.labels()) {
        if let Some((p_occ, p_free)) = noise.likelihoods(label) {
            *w = limits.clamp(bayes_occupancy(*w, p_occ, p_free));
            stats.cells_updated += 1;
        }
    }
    stats.mass_after = grid.total_mass();
    Ok(stats)
}

#[inline]
pub fn bayes_occupancy(prior: f64, like_occupied: f64, like_free: f64) -> f64 {
    let num = prior * like_occupied;
    let den = num + (1.0 - prior) * like_free;
    if den > 0.0 {
        num / den
    } else {
        prior
    }
}

/// Number of motion steps covering `horizon`, which must be a positive
/// integer multiple of `dt`.
pub fn horizon_steps(horizon: f64, dt: f64) -> Result<usize> {
    let steps = (horizon / dt).round();
    if !(steps >= 1.0) || (steps * dt - horizon).abs() > 1e-9 * horizon.abs().max(1.0) {
        return Err(Error::InvalidHorizon { horizon, dt });
    }
    Ok(steps as usize)
}

/// Propagates `src` forward by `horizon` seconds into `dst`, using
/// `scratch` as the ping-pong buffer for multi-step horizons.
pub fn forecast_with_scratch<R: Rng + ?Sized>(
    src: &DynamicOccupancyGrid,
    dst: &mut DynamicOccupancyGrid,
    scratch: &mut DynamicOccupancyGrid,
    model: &MotionModel,
    horizon: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let steps = horizon_steps(horizon, model.dt)?;
    if !scratch.same_shape(src) {
        return Err(Error::GeometryMismatch);
    }
    // Arrange the ping-pong so the final step lands in `dst`.
    let mut stats = UpdateStats { mass_before: src.total_mass(), ..Default::default() };
    let (mut a, mut b): (&mut DynamicOccupancyGrid, &mut DynamicOccupancyGrid) =
        if steps % 2 == 1 { (dst, scratch) } else { (scratch, dst) };
    let first = motion_update(src, a, model, rng)?;
    stats.accumulate(&first);
    for _ in 1..steps {
        let s = motion_update(a, b, model, rng)?;
        stats.accumulate(&s);
        std::mem::swap(&mut a, &mut b);
    }
    Ok(stats)
}

pub fn forecast<R: Rng + ?Sized>(
    src: &DynamicOccupancyGrid,
    dst: &mut DynamicOccupancyGrid,
    model: &MotionModel,
    horizon: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let steps = horizon_steps(horizon, model.dt)?;
    if steps == 1 {
        return motion_update(src, dst, model, rng);
    }
    let mut scratch = src.clone();
    forecast_with_scratch(src, dst, &mut scratch, model, horizon, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: Vec2,
    pub cov: Matrix2<f64>,
}

/// Weighted mean and covariance of a particle set, with
/// [`GAUSSIAN_JITTER`] added to the covariance diagonal.
pub fn fit_gaussian(velocities: &[Vec2], weights: &[f64]) -> Result<Gaussian2> {
    if velocities.is_empty() || velocities.len() != weights.len() {
        return Err(Error::EmptyParticles);
    }
    let mean = velocities.iter().zip(weights).fold(Vec2::zeros(), |acc, (v, &p)| acc + v * p);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (v, &p) in velocities.iter().zip(weights) {
        let d = v - mean;
        sxx += p * d.x * d.x;
        sxy += p * d.x * d.y;
        syy += p * d.y * d.y;
    }
    let cov = Matrix2::new(sxx + GAUSSIAN_JITTER, sxy, sxy, syy + GAUSSIAN_JITTER);
    Ok(Gaussian2 { mean, cov })
}
