mod common;

use std::sync::Arc;

use common::*;
use curtain_core::bandit::BanditState;
use curtain_core::grid::{bayes_occupancy, resample_particles, OccupancyLimits, WEIGHT_TOLERANCE};
use curtain_core::policies::{combined_score, depth_prob_from_occupancy, info_gain_cell, occ_entropy, vel_entropy};
use curtain_core::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn measurement_update_matches_bayes_rule() {
    assert!(measurement_update_error(200, 1) <= 1e-12);
}

#[test]
fn raymarch_matches_explicit_products() {
    assert!(raymarch_error(500, 2) <= 1e-12);
}

#[test]
fn gaussian_fit_matches_direct_sums() {
    assert!(gaussian_fit_error(1000, 3) <= 1e-12);
}

#[test]
fn bandit_recursion_matches_closed_form() {
    assert!(bandit_closed_form_error(1000, 4) <= 1e-12);
}

#[test]
fn info_gain_is_entropy_without_noise() {
    assert!(info_gain_entropy_error(1001) <= 1e-9);
}

#[test]
fn info_gain_is_channel_mutual_information() {
    assert!(info_gain_mi_error(1000, 5) <= 1e-9);
    assert!((info_gain_cell(0.5, 0.1, 0.1) - 0.53101).abs() < 1e-5);
}

#[test]
fn metrics_match_direct_counts() {
    assert_eq!(metrics_mismatches(2000, 6), 0);
}

#[test]
fn torus_motion_conserves_mass() {
    let (drift, truncations) = torus_mass_drift(100, 7);
    assert_eq!(truncations, 0);
    assert!(drift <= 1e-9, "drift {drift}");
}

#[test]
fn invariants_hold_over_long_run() {
    invariant_run(500, 8).unwrap();
}

#[test]
fn resampled_mean_is_unbiased() {
    let mut r = rng(9);
    let incoming: Vec<(Vec2, f64)> =
        (0..7).map(|_| (Vec2::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)), r.random_range(0.01..1.0))).collect();
    let total: f64 = incoming.iter().map(|p| p.1).sum();
    let expect = incoming.iter().fold(Vec2::zeros(), |acc, (v, m)| acc + v * (m / total));
    let trials = 10_000;
    let means: Vec<Vec2> = (0..trials)
        .map(|_| {
            let out = resample_particles(&incoming, 10, 1.0, &mut r);
            out.iter().fold(Vec2::zeros(), |acc, p| acc + p.velocity * p.weight)
        })
        .collect();
    for axis in 0..2 {
        let xs: Vec<f64> = means.iter().map(|m| m[axis]).collect();
        let avg = xs.iter().sum::<f64>() / trials as f64;
        let var = xs.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let sigma = (var / trials as f64).sqrt();
        assert!((avg - expect[axis]).abs() <= 3.0 * sigma + 1e-12, "axis {axis}: {avg} vs {}", expect[axis]);
    }
}

#[test]
fn resample_copy_counts_follow_masses() {
    let mut r = rng(10);
    for _ in 0..200 {
        let m = r.random_range(1..=16);
        let incoming: Vec<(Vec2, f64)> = (0..r.random_range(1..6)).map(|k| (Vec2::new(k as f64, 0.0), r.random::<f64>() + 0.01)).collect();
        let total: f64 = incoming.iter().map(|p| p.1).sum();
        let out = resample_particles(&incoming, m, 1.0, &mut r);
        assert_eq!(out.len(), m);
        for (k, (_, mass)) in incoming.iter().enumerate() {
            let copies = out.iter().filter(|p| p.velocity.x == k as f64).count() as f64;
            let expect = m as f64 * mass / total;
            assert!(copies >= expect.floor() && copies <= expect.ceil(), "{copies} copies, expected {expect}");
        }
    }
}

#[test]
fn epsilon_one_explores_uniformly() {
    let mut state = BanditState::new(&BanditParams { epsilon: 1.0, ..BanditParams::default() });
    state.q_values = [0.9, 0.1, 0.1, 0.1];
    let mut r = rng(11);
    let draws = 100_000;
    for _ in 0..draws {
        state.select_action(&mut r);
    }
    let sigma = (0.25f64 * 0.75 / draws as f64).sqrt();
    for c in state.counts {
        assert!((c as f64 / draws as f64 - 0.25).abs() <= 3.0 * sigma, "{:?}", state.counts);
    }
}

#[test]
fn greedy_bandit_picks_occupancy_arm() {
    let mut state = BanditState::new(&BanditParams { epsilon: 0.0, ..BanditParams::default() });
    state.q_values = [0.1, 0.3, 0.2, 0.25];
    let mut r = rng(12);
    for _ in 0..100 {
        assert_eq!(state.select_action(&mut r), StrategyId::OccEntropy);
    }
}

fn entropy_bits(w: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    (h(w) + h(1.0 - w)) / std::f64::consts::LN_2
}

fn velocity_entropy_bits(v: &[Vec2], p: &[f64]) -> f64 {
    let mu = v.iter().zip(p).fold(Vec2::zeros(), |acc, (x, w)| acc + x * *w);
    let mut cov = nalgebra::Matrix2::identity() * grid::GAUSSIAN_JITTER;
    for (x, w) in v.iter().zip(p) {
        let d = x - mu;
        cov += d * d.transpose() * *w;
    }
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    0.5 * (two_pi_e * two_pi_e * cov.determinant()).ln() / std::f64::consts::LN_2
}

#[test]
fn placement_matches_exhaustive_search() {
    let mut r = rng(13);
    let geom = Arc::new(GridGeometry { num_rays: 9, r_min: 0.2, r_max: 1.4, ..GridGeometry::with_size(16, 16, 0.1) });
    let rays = build_ray_table(&geom);
    assert!(rays.rays.iter().all(|ray| ray.len() <= 32));
    for _ in 0..50 {
        let occ = (0..geom.num_cells()).map(|_| r.random_range(0.02..0.99)).collect();
        let grid = random_grid(geom.clone(), 4, occ, &mut r);
        for strategy in StrategyId::ALL {
            let curtain = place_curtain(&grid, strategy, &rays);
            for (ray, chosen) in rays.rays.iter().zip(&curtain.control) {
                let w: Vec<f64> = ray.cells.iter().map(|&c| grid.occupancy()[c]).collect();
                let score = |k: usize| -> f64 {
                    let c = ray.cells[k];
                    let (v, p) = grid.cell_particles(c);
                    match strategy {
                        StrategyId::DepthProb => w[k] * (0..k).map(|j| 1.0 - w[j]).product::<f64>(),
                        StrategyId::OccEntropy => entropy_bits(w[k]),
                        StrategyId::VelEntropy => velocity_entropy_bits(v, p),
                        StrategyId::Combined => entropy_bits(w[k]) + w[k] * velocity_entropy_bits(v, p),
                    }
                };
                let mut best: Option<(usize, f64)> = None;
                for k in ray.in_range.clone() {
                    let s = score(k);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((k, s));
                    }
                }
                let (bk, bs) = best.unwrap();
                let k = chosen.unwrap();
                assert!(k == bk || (score(k) - bs).abs() <= 1e-12, "{strategy}: chose {k}, exhaustive {bk}");
            }
        }
    }
}

#[test]
fn random_curtain_is_uniform_per_ray() {
    let geom = GridGeometry { num_rays: 1, r_min: 0.5, r_max: 1.0, ..GridGeometry::with_size(3, 20, 0.1) };
    let rays = build_ray_table(&geom);
    let range = rays.rays[0].in_range.clone();
    let k = range.len();
    assert!(k > 1);
    let mut counts = vec![0u64; rays.rays[0].len()];
    let mut r = rng(14);
    let samples = 100_000;
    for _ in 0..samples {
        counts[random_curtain(&rays, &mut r).control[0].unwrap()] += 1;
    }
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / samples as f64).sqrt();
    for (pos, &c) in counts.iter().enumerate() {
        if range.contains(&pos) {
            assert!((c as f64 / samples as f64 - p).abs() <= 3.0 * sigma, "position {pos}");
        } else {
            assert_eq!(c, 0);
        }
    }
}

proptest! {
    #[test]
    fn measurement_keeps_occupancy_in_limits(
        w in prop::collection::vec(0.02f64..=0.99, 16),
        labels in prop::collection::vec(0u8..3, 16),
        fp in 0.0f64..0.3,
        fn_ in 0.0f64..0.3,
    ) {
        let geom = Arc::new(GridGeometry::with_size(4, 4, 0.1));
        let limits = OccupancyLimits::default();
        let mut grid = random_grid(geom, 3, w.clone(), &mut rng(0));
        let obs = ObservationGrid::from_labels(labels.iter().map(|&b| Label::from_byte(b).unwrap()).collect());
        let noise = SensorNoiseModel { false_positive: fp, false_negative: fn_ };
        measurement_update(&mut grid, &obs, &noise, limits).unwrap();
        for (i, &x) in grid.occupancy().iter().enumerate() {
            prop_assert!(x >= limits.floor && x <= limits.ceiling);
            match obs.get(i) {
                Label::Occupied => prop_assert!(x >= w[i] - 1e-12),
                Label::Free => prop_assert!(x <= w[i] + 1e-12),
                Label::Unknown => prop_assert_eq!(x, w[i]),
            }
        }
    }

    #[test]
    fn motion_update_keeps_invariants(seed in 0u64..1000, vx in -3.0f64..3.0, noise in 0.0f64..0.5) {
        let geom = Arc::new(GridGeometry::with_size(10, 10, 0.1));
        let mut r = rng(seed);
        let model = MotionModel {
            velocity_noise: nalgebra::Matrix2::identity() * noise * noise,
            ..MotionModel::for_geometry(&geom)
        };
        let occ = (0..geom.num_cells()).map(|_| r.random_range(0.02..0.99)).collect();
        let mut src = random_grid(geom.clone(), 5, occ, &mut r);
        for v in src.cell_particles_mut(0).0.iter_mut() {
            v.x = vx;
        }
        let mut dst = src.clone();
        let stats = motion_update(&src, &mut dst, &model, &mut r).unwrap();
        prop_assert!(dst.check_invariants(model.limits).is_ok());
        prop_assert!(stats.cells_updated <= geom.num_cells() as u64);
        for i in 0..geom.num_cells() {
            let (_, p) = dst.cell_particles(i);
            prop_assert_eq!(p.len(), 5);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_TOLERANCE);
        }
    }

    #[test]
    fn bayes_moves_toward_evidence(prior in 0.001f64..0.999, fp in 0.0f64..0.4, fn_ in 0.0f64..0.4) {
        let up = bayes_occupancy(prior, 1.0 - fn_, fp);
        let down = bayes_occupancy(prior, fn_, 1.0 - fp);
        prop_assert!(up >= prior - 1e-15 && down <= prior + 1e-15);
    }

    #[test]
    fn raymarch_probabilities_are_a_distribution(w in prop::collection::vec(0.0f64..=1.0, 1..64)) {
        let prof = depth_prob_from_occupancy(w.iter().copied());
        let total: f64 = prof.depth.iter().sum::<f64>() + prof.visibility.last().unwrap();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(prof.visibility.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn velocity_entropy_is_rotation_invariant(
        vs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..12),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let v: Vec<Vec2> = vs.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        let p = vec![1.0 / v.len() as f64; v.len()];
        let rot = nalgebra::Rotation2::new(angle);
        let rotated: Vec<Vec2> = v.iter().map(|x| rot * x).collect();
        prop_assert!((vel_entropy(&v, &p) - vel_entropy(&rotated, &p)).abs() <= 1e-9);
    }

    #[test]
    fn combined_score_ignores_velocity_of_empty_cells(h in -20.0f64..10.0) {
        prop_assert_eq!(combined_score(0.0, h), 0.0);
        prop_assert!((combined_score(1.0, h) - h).abs() <= 1e-12);
    }

    #[test]
    fn info_gain_never_exceeds_entropy(w in 0.0f64..=1.0, fp in 0.0f64..0.5, fn_ in 0.0f64..0.5) {
        let g = info_gain_cell(w, fp, fn_);
        prop_assert!(g >= -1e-12 && g <= occ_entropy(w) + 1e-12);
    }
}
