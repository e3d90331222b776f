mod common;

use std::collections::BTreeSet;

use common::*;
use curtain_core::sensing::lidar_scan;
use curtain_core::worldsim::sim_default;
use curtain_core::*;
use proptest::prelude::*;
use rand::Rng;

/// Length of the part of segment `a -> b` inside the closed box
/// `[lo, hi]`, or `None` when the segment misses it.
fn chord(a: Vec2, b: Vec2, lo: Vec2, hi: Vec2) -> Option<f64> {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        if d[axis].abs() < 1e-15 {
            if a[axis] < lo[axis] || a[axis] > hi[axis] {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((lo[axis] - a[axis]) / d[axis], (hi[axis] - a[axis]) / d[axis]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t0 <= t1 + 1e-12).then(|| (t1 - t0).max(0.0) * d.norm())
}

fn cell_box(geom: &GridGeometry, c: usize) -> (Vec2, Vec2) {
    let h = Vec2::new(0.5, 0.5) * geom.cell_size;
    let center = geom.cell_center(c);
    (center - h, center + h)
}

#[test]
fn traversal_matches_dense_sampling() {
    let geom = GridGeometry::with_size(32, 32, 0.1);
    let e = geom.extent();
    let mut r = rng(20);
    let step = geom.cell_size / 100.0;
    for _ in 0..1000 {
        let mut point = || Vec2::new(r.random_range(0.0..e.x), r.random_range(0.0..e.y));
        let (a, b) = (point(), point());
        let cells = traverse_ray(&geom, a, b).unwrap();
        let traversed: BTreeSet<usize> = cells.iter().copied().collect();
        assert_eq!(traversed.len(), cells.len(), "duplicate cells");

        let n = ((b - a).norm() / step).ceil().max(1.0) as usize;
        let sampled: BTreeSet<usize> = (0..=n).map(|k| geom.cell_of(a + (b - a) * (k as f64 / n as f64)).unwrap()).collect();
        assert!(sampled.is_subset(&traversed));
        for &c in traversed.difference(&sampled) {
            let (lo, hi) = cell_box(&geom, c);
            let len = chord(a, b, lo, hi).expect("traversed cell misses the segment");
            assert!(len < 2.0 * step, "cell {c} has chord {len} but was never sampled");
        }
        for w in cells.windows(2) {
            let ((c0, r0), (c1, r1)) = (geom.col_row(w[0]), geom.col_row(w[1]));
            assert_eq!(c0.abs_diff(c1) + r0.abs_diff(r1), 1, "consecutive cells are not edge neighbors");
        }
    }
}

#[test]
fn camera_ray_cells_lie_on_their_rays() {
    let mut r = rng(21);
    for _ in 0..50 {
        let (w, h) = (r.random_range(3..40), r.random_range(3..40));
        let cs = r.random_range(0.02..0.3);
        let mut geom = GridGeometry::with_size(w, h, cs);
        geom.num_rays = r.random_range(1..40);
        geom.fov = r.random_range(0.1..std::f64::consts::PI);
        geom.sensor_pos = Vec2::new(r.random_range(0.0..w as f64 * cs), r.random_range(0.0..h as f64 * cs));
        geom.heading = r.random_range(0.0..std::f64::consts::TAU);
        let rays = build_ray_table(&geom);
        for ray in &rays.rays {
            let end = geom.boundary_exit(ray.angle);
            for &c in &ray.cells {
                let (lo, hi) = cell_box(&geom, c);
                assert!(chord(geom.sensor_pos, end, lo, hi).is_some(), "cell {c} is off ray {}", ray.angle);
            }
            assert!(ray.ranges.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}

#[test]
fn los_matches_brute_force_occlusion() {
    assert_eq!(los_mismatches(20, 22), 0);
}

#[test]
fn curtain_detections_are_a_subset_of_lidar_returns() {
    let geom = GridGeometry { num_rays: 48, ..GridGeometry::with_size(40, 40, 0.1) };
    let rays = build_ray_table(&geom);
    let mut r = rng(23);
    for _ in 0..100 {
        let occ = random_mask(geom.num_cells(), r.random_range(0.0..0.05), &mut r);
        let lidar = lidar_scan(&occ, &rays, geom.r_max, &SensorNoiseModel::NOISELESS, &mut r);
        let curtain = random_curtain(&rays, &mut r);
        let det = image_curtain(&occ, &curtain, &SensorNoiseModel::NOISELESS, &rays, &mut r);
        let obs = extract_observation(&curtain, &det, &rays);
        for i in 0..geom.num_cells() {
            if obs.get(i) == Label::Occupied {
                assert_eq!(lidar.get(i), Label::Occupied, "cell {i}");
            }
        }
    }
}

#[test]
fn occluded_control_cell_is_not_detected() {
    let geom = GridGeometry { num_rays: 1, r_min: 0.0, ..GridGeometry::with_size(3, 10, 0.1) };
    let rays = build_ray_table(&geom);
    let ray = &rays.rays[0];
    let mut occ = CellMask::new(geom.num_cells());
    occ.set(ray.cells[3], true);
    occ.set(ray.cells[6], true);
    let mut r = rng(24);
    let probe = |k: usize, r: &mut _| image_curtain(&occ, &Curtain { control: vec![Some(k)] }, &SensorNoiseModel::NOISELESS, &rays, r);
    assert_eq!(probe(3, &mut r).detected, vec![Some(true)]);
    assert_eq!(probe(6, &mut r).detected, vec![Some(false)]);
    assert_eq!(probe(2, &mut r).detected, vec![Some(false)]);
    let empty = CellMask::new(geom.num_cells());
    let det = image_curtain(&empty, &random_curtain(&rays, &mut r), &SensorNoiseModel::NOISELESS, &rays, &mut r);
    assert_eq!(det.count(), 0);
}

#[test]
fn binarize_matches_elementwise_threshold() {
    let geom = std::sync::Arc::new(GridGeometry::with_size(16, 16, 0.1));
    let mut r = rng(25);
    let mut occ: Vec<f64> = (0..geom.num_cells()).map(|_| r.random()).collect();
    occ[0] = 0.5;
    let grid = random_grid(geom.clone(), 2, occ.clone(), &mut r);
    let mask = binarize(&grid, 0.5);
    assert!((0..geom.num_cells()).all(|i| mask.get(i) == (occ[i] >= 0.5)));
    assert!(mask.get(0));
}

fn deterministic_trajectories() -> Vec<Trajectory> {
    vec![
        Trajectory::Harmonic { center: Vec2::new(1.0, 2.0), amplitude: 0.7, frequency: 0.3, phase: 0.4, direction: Vec2::new(1.0, 1.0) },
        Trajectory::Sinusoid {
            start: Vec2::new(0.5, 0.5),
            direction: Vec2::new(0.0, 1.0),
            speed: 0.8,
            travel: 2.0,
            lateral_amplitude: 0.3,
            lateral_frequency: 0.5,
        },
        Trajectory::Static { position: Vec2::new(3.0, 1.0) },
    ]
}

#[test]
fn velocities_match_finite_differences() {
    let h = 1e-4;
    let mut r = rng(26);
    for traj in deterministic_trajectories() {
        for _ in 0..500 {
            let t = r.random_range(0.0..20.0);
            let (pa, va) = traj.state_at(t - h).unwrap();
            let (pb, vb) = traj.state_at(t + h).unwrap();
            let (_, v) = traj.state_at(t).unwrap();
            // Skip the instants where a bouncing trajectory reverses.
            if (va - vb).norm() > 1e-3 {
                continue;
            }
            let fd = (pb - pa) / (2.0 * h);
            assert!((fd - v).norm() < 1e-6, "{traj:?} at {t}: {fd} vs {v}");
        }
    }
}

#[test]
fn one_cell_of_motion_shifts_the_mask() {
    let geom = GridGeometry::with_size(30, 30, 0.1);
    let mut r = rng(27);
    for _ in 0..50 {
        let obj = SceneObject {
            shape: Shape::Rectangle { width: r.random_range(0.15..0.6), height: r.random_range(0.15..0.6) },
            trajectory: Trajectory::Sinusoid {
                start: Vec2::new(r.random_range(0.5..1.5), r.random_range(0.5..2.5)),
                direction: Vec2::new(1.0, 0.0),
                speed: 1.0,
                travel: 0.0,
                lateral_amplitude: 0.0,
                lateral_frequency: 0.0,
            },
        };
        let mut scene = Scene::new(vec![obj]).unwrap();
        let before = rasterize(&scene, &geom);
        scene.step(0.1, &mut r);
        let after = rasterize(&scene, &geom);
        assert!(before.occ.count() > 0);
        for c in 0..geom.num_cells() {
            let (col, row) = geom.col_row(c);
            if col + 1 < geom.width_cells {
                assert_eq!(before.occ.get(c), after.occ.get(geom.index(col + 1, row)));
            }
        }
        assert!(after.occ.iter_set().all(|c| (after.vel[c] - Vec2::new(1.0, 0.0)).norm() < 1e-9));
    }
}

#[test]
fn sim_default_fits_the_grid() {
    for geom in [GridGeometry::default(), GridGeometry::with_size(100, 100, 0.08), GridGeometry::with_size(40, 40, 0.1)] {
        let mut scene = Scene::new(sim_default(&geom)).unwrap();
        let mut r = rng(28);
        for _ in 0..300 {
            scene.step(1.0 / 30.0, &mut r);
            let gt = rasterize(&scene, &geom);
            assert!(gt.occ.count() > 0);
            assert!(gt.vel.iter().all(|v| v.x.is_finite() && v.y.is_finite()));
        }
    }
}

proptest! {
    #[test]
    fn traversal_starts_and_ends_in_endpoint_cells(ax in 0.0f64..3.2, ay in 0.0f64..3.2, bx in 0.0f64..3.2, by in 0.0f64..3.2) {
        let geom = GridGeometry::with_size(32, 32, 0.1);
        let (a, b) = (Vec2::new(ax, ay), Vec2::new(bx, by));
        let cells = traverse_ray(&geom, a, b).unwrap();
        prop_assert_eq!(cells[0], geom.cell_of(a).unwrap());
        prop_assert!(cells.contains(&geom.cell_of(b).unwrap()));
    }

    #[test]
    fn observation_labels_respect_rays(seed in 0u64..500, density in 0.0f64..0.2) {
        let geom = GridGeometry { num_rays: 16, ..GridGeometry::with_size(20, 20, 0.1) };
        let rays = build_ray_table(&geom);
        let mut r = rng(seed);
        let occ = random_mask(geom.num_cells(), density, &mut r);
        let curtain = random_curtain(&rays, &mut r);
        prop_assert!(curtain.is_valid_for(&rays));
        let det = image_curtain(&occ, &curtain, &SensorNoiseModel::NOISELESS, &rays, &mut r);
        let obs = extract_observation(&curtain, &det, &rays);
        // Noise-free: every OCCUPIED label is a true, visible occupied cell.
        let los = los_mask(&occ, &rays);
        for i in 0..geom.num_cells() {
            if obs.get(i) == Label::Occupied {
                prop_assert!(occ.get(i) && los.get(i));
            }
        }
        prop_assert!(obs.observed_count() >= curtain.control.iter().flatten().count().min(1));
    }
}
