//! Wall-clock throughput of the filter and placement kernels.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::build_ray_table;
use crate::grid::{init_grid, measurement_update, motion_update};
use crate::pipeline::Context;
use crate::policies::{place_curtain, StrategyId};
use crate::sensing::{extract_observation, image_curtain, random_curtain};
use crate::worldsim::{rasterize, Scene};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Throughput {
    pub motion_update_hz: f64,
    pub measurement_update_hz: f64,
    pub placement_hz: f64,
    /// One motion update followed by one measurement update.
    pub filter_cycle_hz: f64,
}

fn rate(mut f: impl FnMut() -> Result<()>, budget: Duration) -> Result<f64> {
    f()?;
    let start = Instant::now();
    let mut n = 0u64;
    while n < 3 || start.elapsed() < budget {
        f()?;
        n += 1;
    }
    Ok(n as f64 / start.elapsed().as_secs_f64())
}

/// Times each kernel for roughly `budget` on the configured geometry and
/// scene, using a belief that has already seen a few observations.
pub fn measure(cfg: &RunConfig, budget: Duration) -> Result<Throughput> {
    cfg.validate()?;
    let geom = Arc::new(cfg.geometry.clone());
    let rays = build_ray_table(&geom);
    let motion = cfg.motion_model();
    let mut rng = Context::Filtering.rng(cfg.seed);
    let scene = Scene::new(cfg.scene.objects(&geom))?;
    let gt = rasterize(&scene, &geom);

    let mut a = init_grid(geom.clone(), &motion, cfg.particles_per_cell, &mut rng)?;
    let mut b = a.clone();
    let observe = |rng: &mut _| {
        let c = random_curtain(&rays, rng);
        let det = image_curtain(&gt.occ, &c, &cfg.sensor_noise, &rays, rng);
        extract_observation(&c, &det, &rays)
    };
    for _ in 0..5 {
        motion_update(&a, &mut b, &motion, &mut rng)?;
        measurement_update(&mut b, &observe(&mut rng), &cfg.sensor_noise, motion.limits)?;
        std::mem::swap(&mut a, &mut b);
    }
    let obs = observe(&mut rng);

    let motion_update_hz = rate(|| motion_update(&a, &mut b, &motion, &mut rng).map(drop), budget)?;
    let measurement_update_hz = rate(|| measurement_update(&mut b, &obs, &cfg.sensor_noise, motion.limits).map(drop), budget)?;
    let mut k = 0;
    let placement_hz = rate(
        || {
            let _ = place_curtain(&a, StrategyId::ALL[k % 4], &rays);
            k += 1;
            Ok(())
        },
        budget,
    )?;
    let filter_cycle_hz = rate(
        || {
            motion_update(&a, &mut b, &motion, &mut rng)?;
            measurement_update(&mut b, &obs, &cfg.sensor_noise, motion.limits)?;
            std::mem::swap(&mut a, &mut b);
            Ok(())
        },
        budget,
    )?;
    Ok(Throughput { motion_update_hz, measurement_update_hz, placement_hz, filter_cycle_hz })
}
