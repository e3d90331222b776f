//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Each check returns the worst deviation it saw.

#![allow(dead_code)]

use std::sync::Arc;

use curtain_core::bandit::BanditState;
use curtain_core::grid::OccupancyLimits;
use curtain_core::policies::{depth_prob_from_occupancy, info_gain_cell, occ_entropy};
use curtain_core::*;
use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Grid with the given occupancy, `m` random particles per cell and random
/// normalized weights.
pub fn random_grid(geom: Arc<GridGeometry>, m: usize, occupancy: Vec<f64>, rng: &mut ChaCha8Rng) -> DynamicOccupancyGrid {
    let n = geom.num_cells();
    let velocities = (0..n * m).map(|_| Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
    let mut weights = Vec::with_capacity(n * m);
    for _ in 0..n {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| w / total));
    }
    DynamicOccupancyGrid::from_parts(geom, m, occupancy, velocities, weights, 0.0).unwrap()
}

pub fn random_mask(n: usize, density: f64, rng: &mut ChaCha8Rng) -> CellMask {
    CellMask::from_vec((0..n).map(|_| rng.random::<f64>() < density).collect())
}

/// Worst error of the measurement update against the Bayes rule written
/// out per label; UNKNOWN cells must be bit-identical.
pub fn measurement_update_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let geom = Arc::new(GridGeometry::with_size(12, 12, 0.1));
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let fp = r.random_range(0.0..0.45);
        let fn_ = r.random_range(0.0..0.45);
        let noise = SensorNoiseModel { false_positive: fp, false_negative: fn_ };
        let occ: Vec<f64> = (0..geom.num_cells()).map(|_| r.random::<f64>()).collect();
        let mut grid = random_grid(geom.clone(), 2, occ.clone(), &mut r);
        let labels: Vec<Label> = (0..geom.num_cells()).map(|_| Label::from_byte(r.random_range(0..3)).unwrap()).collect();
        measurement_update(&mut grid, &ObservationGrid::from_labels(labels.clone()), &noise, OccupancyLimits::UNIT).unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let w = occ[i];
            let expect = match label {
                Label::Unknown => {
                    if grid.occupancy()[i].to_bits() != w.to_bits() {
                        return f64::INFINITY;
                    }
                    continue;
                }
                Label::Occupied => w * (1.0 - fn_) / (w * (1.0 - fn_) + (1.0 - w) * fp),
                Label::Free => w * fn_ / (w * fn_ + (1.0 - w) * (1.0 - fp)),
            };
            worst = worst.max((grid.occupancy()[i] - expect).abs());
        }
    }
    worst
}

/// Worst error of the linear raymarch against explicit products.
pub fn raymarch_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let len = r.random_range(1..=64);
        let w: Vec<f64> = (0..len).map(|_| r.random::<f64>()).collect();
        let prof = depth_prob_from_occupancy(w.iter().copied());
        for i in 0..len {
            let before: f64 = (0..i).map(|j| 1.0 - w[j]).product();
            let through: f64 = (0..=i).map(|j| 1.0 - w[j]).product();
            worst = worst.max((prof.depth[i] - w[i] * before).abs());
            worst = worst.max((prof.visibility[i] - through).abs());
        }
    }
    worst
}

/// Cells whose line-of-sight flag disagrees with a scan that checks, for
/// every listing of a cell on a ray, all cells before it.
pub fn los_mismatches(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let geom = GridGeometry { num_rays: 64, ..GridGeometry::with_size(32, 32, 0.1) };
    let rays = build_ray_table(&geom);
    let mut bad = 0;
    for _ in 0..trials {
        let occ = random_mask(geom.num_cells(), r.random_range(0.0..0.15), &mut r);
        let mask = los_mask(&occ, &rays);
        for c in 0..geom.num_cells() {
            let mut visible = false;
            for ray in &rays.rays {
                for (k, &cell) in ray.cells.iter().enumerate() {
                    if cell == c && ray.cells[..k].iter().all(|&p| !occ.get(p)) {
                        visible = true;
                    }
                }
            }
            bad += usize::from(visible != mask.get(c));
        }
    }
    bad
}

/// Metric mismatches against confusion counts taken cell by cell.
pub fn metrics_mismatches(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let n = r.random_range(1..=256);
        let pred = random_mask(n, r.random(), &mut r);
        let gt = random_mask(n, r.random(), &mut r);
        let los = random_mask(n, r.random(), &mut r);
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            if !los.get(i) {
                continue;
            }
            match (pred.get(i), gt.get(i)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let report = eval_forecast(&pred, &gt, &los, 0.5);
        if tp + fp + fn_ + tn == 0 {
            bad += usize::from(report.is_ok());
            continue;
        }
        let Ok(e) = report else {
            bad += 1;
            continue;
        };
        bad += usize::from((e.tp, e.fp, e.fn_, e.tn) != (tp, fp, fn_, tn));
        let total = (tp + fp + fn_ + tn) as f64;
        bad += usize::from(e.accuracy != (tp + tn) as f64 / total);
        if tp + fp + fn_ > 0 {
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            bad += usize::from(e.f1 != f1 || e.iou != iou);
            if tp + fp > 0 {
                bad += usize::from(e.precision != tp as f64 / (tp + fp) as f64);
            }
            if tp + fn_ > 0 {
                bad += usize::from(e.recall != tp as f64 / (tp + fn_) as f64);
            }
        }
    }
    bad
}

/// Worst error of the fitted Gaussian against direct weighted sums.
pub fn gaussian_fit_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let m = r.random_range(1..=32);
        let v: Vec<Vec2> = (0..m).map(|_| Vec2::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).collect();
        let raw: Vec<f64> = (0..m).map(|_| r.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut mu = Vec2::zeros();
        for k in 0..m {
            mu += v[k] * p[k];
        }
        let mut cov = Matrix2::identity() * grid::GAUSSIAN_JITTER;
        for k in 0..m {
            let d = v[k] - mu;
            cov += d * d.transpose() * p[k];
        }
        let g = fit_gaussian(&v, &p).unwrap();
        worst = worst.max((g.mean - mu).amax()).max((g.cov - cov).amax());
    }
    worst
}

/// Worst error of iterated Q updates against the closed form
/// `(1-a)^n Q0 + sum_i a (1-a)^(n-i) R_i`.
pub fn bandit_closed_form_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let params = BanditParams { epsilon: 0.1, step_size: r.random_range(0.01..=1.0), initial_q: r.random() };
        let mut state = BanditState::new(&params);
        let arm = StrategyId::ALL[r.random_range(0..4)];
        let n = r.random_range(1..=200);
        let rewards: Vec<f64> = (0..n).map(|_| r.random()).collect();
        for &x in &rewards {
            state.update_q(arm, x);
        }
        let a = params.step_size;
        let mut closed = (1.0 - a).powi(n as i32) * params.initial_q;
        for (i, &x) in rewards.iter().enumerate() {
            closed += a * (1.0 - a).powi((n - 1 - i) as i32) * x;
        }
        worst = worst.max((state.q_values[arm.index()] - closed).abs());
        for other in StrategyId::ALL.iter().filter(|&&o| o != arm) {
            worst = worst.max((state.q_values[other.index()] - params.initial_q).abs());
        }
    }
    worst
}

/// Worst gap between noise-free information gain and occupancy entropy on
/// `points` evenly spaced occupancies in [0, 1].
pub fn info_gain_entropy_error(points: usize) -> f64 {
    (0..points)
        .map(|k| {
            let w = k as f64 / (points - 1) as f64;
            (info_gain_cell(w, 0.0, 0.0) - occ_entropy(w)).abs()
        })
        .fold(0.0, f64::max)
}

/// Mutual information in bits of the occupancy / detection channel from the
/// enumerated joint distribution.
pub fn channel_mutual_information(w: f64, fp: f64, fn_: f64) -> f64 {
    let joint = [[(1.0 - w) * (1.0 - fp), (1.0 - w) * fp], [w * fn_, w * (1.0 - fn_)]];
    let po = [1.0 - w, w];
    let pz = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for o in 0..2 {
        for z in 0..2 {
            let p = joint[o][z];
            if p > 0.0 {
                mi += p * (p / (po[o] * pz[z])).log2();
            }
        }
    }
    mi
}

pub fn info_gain_mi_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..trials)
        .map(|_| {
            let w = r.random::<f64>();
            let fp = r.random_range(0.0..0.5);
            let fn_ = r.random_range(0.0..0.5);
            (info_gain_cell(w, fp, fn_) - channel_mutual_information(w, fp, fn_)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest per-step mass change of a noisy motion update on a torus with
/// birth and clamping disabled, plus the number of truncations seen.
pub fn torus_mass_drift(steps: usize, seed: u64) -> (f64, u64) {
    let mut r = rng(seed);
    let geom = Arc::new(GridGeometry { wrap: true, ..GridGeometry::with_size(24, 24, 0.1) });
    let model = MotionModel {
        velocity_noise: Matrix2::identity() * 0.25f64.powi(2),
        position_noise: Matrix2::identity() * 0.05f64.powi(2),
        birth_prob: 0.0,
        limits: OccupancyLimits::UNIT,
        ..MotionModel::for_geometry(&geom)
    };
    let occ = (0..geom.num_cells()).map(|_| r.random_range(0.0..0.1)).collect();
    let mut a = random_grid(geom.clone(), 8, occ, &mut r);
    let mut b = a.clone();
    let (mut worst, mut truncations) = (0.0f64, 0);
    for _ in 0..steps {
        let before = a.total_mass();
        let stats = motion_update(&a, &mut b, &model, &mut r).unwrap();
        truncations += stats.truncation_count;
        worst = worst.max((b.total_mass() - before).abs());
        std::mem::swap(&mut a, &mut b);
    }
    (worst, truncations)
}

/// Runs the full filter on sim-default for `steps` steps, checking weight
/// normalization, particle counts and occupancy bounds after every step.
pub fn invariant_run(steps: u64, seed: u64) -> Result<()> {
    let cfg = RunConfig {
        geometry: GridGeometry { num_rays: 64, ..GridGeometry::with_size(48, 48, 0.1) },
        steps,
        seed,
        eval_every: 0,
        check_invariants: true,
        ..RunConfig::default()
    };
    run_sync(&cfg, &mut Vec::new()).map(drop)
}
