//! Ground-truth 2D world of moving blocks: harmonic, sinusoidal and
//! Brownian trajectories rasterized onto the grid by cell-center
//! containment.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CellMask, GridGeometry, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Axis-aligned rectangle, meters.
    Rectangle {
        width: f64,
        height: f64,
    },
    Circle {
        radius: f64,
    },
}

impl Shape {
    #[inline]
    fn contains(&self, offset: Vec2) -> bool {
        match *self {
            Shape::Rectangle { width, height } => offset.x.abs() <= 0.5 * width && offset.y.abs() <= 0.5 * height,
            Shape::Circle { radius } => offset.norm_squared() <= radius * radius,
        }
    }

    fn half_extent(&self) -> Vec2 {
        match *self {
            Shape::Rectangle { width, height } => Vec2::new(0.5 * width, 0.5 * height),
            Shape::Circle { radius } => Vec2::new(radius, radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Static {
        position: Vec2,
    },
    /// Oscillation `center + A sin(2 pi f t + phase) d` along unit `direction`.
    Harmonic {
        center: Vec2,
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
        direction: Vec2,
    },
    /// Forward drift along `direction` at `speed`, bouncing back and forth
    /// over `travel` meters, plus a lateral sinusoid.
    Sinusoid {
        start: Vec2,
        direction: Vec2,
        speed: f64,
        travel: f64,
        lateral_amplitude: f64,
        lateral_frequency: f64,
    },
    /// Random walk with diffusion `sigma` (m / sqrt(s)) reflected into the
    /// box `[bounds_min, bounds_max]`.
    Brownian {
        start: Vec2,
        sigma: f64,
        bounds_min: Vec2,
        bounds_max: Vec2,
    },
}

impl Trajectory {
    /// Position and velocity at time `t`, or `None` for the stateful
    /// Brownian trajectory.
    pub fn state_at(&self, t: f64) -> Option<(Vec2, Vec2)> {
        match *self {
            Trajectory::Static { position } => Some((position, Vec2::zeros())),
            Trajectory::Harmonic { center, amplitude, frequency, phase, direction } => {
                let d = direction.normalize();
                let arg = TAU * frequency * t + phase;
                Some((center + d * (amplitude * arg.sin()), d * (TAU * frequency * amplitude * arg.cos())))
            }
            Trajectory::Sinusoid { start, direction, speed, travel, lateral_amplitude, lateral_frequency } => {
                let d = direction.normalize();
                let n = Vec2::new(-d.y, d.x);
                let (forward, sign) = ping_pong(speed * t, travel);
                let arg = TAU * lateral_frequency * t;
                let pos = start + d * forward + n * (lateral_amplitude * arg.sin());
                let vel = d * (sign * speed) + n * (TAU * lateral_frequency * lateral_amplitude * arg.cos());
                Some((pos, vel))
            }
            Trajectory::Brownian { .. } => None,
        }
    }

    /// Upper bound on speed for deterministic trajectories.
    pub fn max_speed(&self) -> Option<f64> {
        match *self {
            Trajectory::Static { .. } => Some(0.0),
            Trajectory::Harmonic { amplitude, frequency, .. } => Some(TAU * frequency * amplitude.abs()),
            Trajectory::Sinusoid { speed, lateral_amplitude, lateral_frequency, .. } => {
                Some(speed.abs() + TAU * lateral_frequency * lateral_amplitude.abs())
            }
            Trajectory::Brownian { .. } => None,
        }
    }
}

/// Distance along a back-and-forth path of length `travel` after covering
/// `s` meters, with the current direction sign.
fn ping_pong(s: f64, travel: f64) -> (f64, f64) {
    if !(travel > 0.0) || !travel.is_finite() {
        return (s, 1.0);
    }
    let tau = s.rem_euclid(2.0 * travel);
    if tau <= travel {
        (tau, 1.0)
    } else {
        (2.0 * travel - tau, -1.0)
    }
}

/// Reflects `x` into `[lo, hi]`.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let r = (x - lo).rem_euclid(2.0 * span);
    lo + if r <= span { r } else { 2.0 * span - r }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    pub trajectory: Trajectory,
}

impl SceneObject {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match self.shape {
            Shape::Rectangle { width, height } if !(width > 0.0 && height > 0.0) => return bad("rectangle dimensions must be positive"),
            Shape::Circle { radius } if !(radius > 0.0) => return bad("circle radius must be positive"),
            _ => {}
        }
        match self.trajectory {
            Trajectory::Harmonic { frequency, direction, .. } => {
                if !(frequency >= 0.0) || direction.norm() == 0.0 {
                    return bad("harmonic trajectory needs frequency >= 0 and a nonzero direction");
                }
            }
            Trajectory::Sinusoid { direction, lateral_frequency, travel, .. } => {
                if !(lateral_frequency >= 0.0) || direction.norm() == 0.0 || !(travel >= 0.0) {
                    return bad("sinusoid trajectory needs frequency >= 0, travel >= 0 and a nonzero direction");
                }
            }
            Trajectory::Brownian { sigma, bounds_min, bounds_max, .. } => {
                if !(sigma >= 0.0) || bounds_min.x > bounds_max.x || bounds_min.y > bounds_max.y {
                    return bad("brownian trajectory needs sigma >= 0 and ordered bounds");
                }
            }
            Trajectory::Static { .. } => {}
        }
        Ok(())
    }
}

/// Scene state advanced by explicit stepping; Brownian objects carry their
/// own position and last-step velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    objects: Vec<SceneObject>,
    time: f64,
    brownian: Vec<Option<(Vec2, Vec2)>>,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>) -> Result<Self> {
        for o in &objects {
            o.validate()?;
        }
        let brownian = objects
            .iter()
            .map(|o| match o.trajectory {
                Trajectory::Brownian { start, bounds_min, bounds_max, .. } => Some((
                    Vec2::new(reflect(start.x, bounds_min.x, bounds_max.x), reflect(start.y, bounds_min.y, bounds_max.y)),
                    Vec2::zeros(),
                )),
                _ => None,
            })
            .collect();
        Ok(Self { objects, time: 0.0, brownian })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Advances the clock by `dt`, stepping every Brownian object.
    pub fn step<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) {
        for (obj, state) in self.objects.iter().zip(self.brownian.iter_mut()) {
            let (Trajectory::Brownian { sigma, bounds_min, bounds_max, .. }, Some((pos, vel))) = (&obj.trajectory, state) else {
                continue;
            };
            let scale = sigma * dt.sqrt();
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            let next =
                Vec2::new(reflect(pos.x + scale * zx, bounds_min.x, bounds_max.x), reflect(pos.y + scale * zy, bounds_min.y, bounds_max.y));
            *vel = (next - *pos) / dt;
            *pos = next;
        }
        self.time += dt;
    }

    /// Current position and velocity of object `k`.
    pub fn object_state(&self, k: usize) -> (Vec2, Vec2) {
        self.objects[k].trajectory.state_at(self.time).or(self.brownian[k]).expect("brownian objects always carry state")
    }
}

/// Ground-truth occupancy and velocity rasters at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub occ: CellMask,
    pub vel: Vec<Vec2>,
    pub timestamp: f64,
}

/// A cell is occupied iff its center lies inside an object footprint; the
/// lowest-index object wins overlaps.
pub fn rasterize(scene: &Scene, geom: &GridGeometry) -> GroundTruth {
    let n = geom.num_cells();
    let mut occ = CellMask::new(n);
    let mut vel = vec![Vec2::zeros(); n];
    let cs = geom.cell_size;
    for (k, obj) in scene.objects.iter().enumerate() {
        let (pos, v) = scene.object_state(k);
        let half = obj.shape.half_extent();
        let lo = (pos - half - geom.origin) / cs;
        let hi = (pos + half - geom.origin) / cs;
        // Cell centers at (i + 0.5): candidate columns are ceil(lo - 0.5)..=floor(hi - 0.5).
        let c0 = (lo.x - 0.5).ceil().max(0.0) as usize;
        let r0 = (lo.y - 0.5).ceil().max(0.0) as usize;
        let c1 = (hi.x - 0.5).floor();
        let r1 = (hi.y - 0.5).floor();
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let c1 = (c1 as usize).min(geom.width_cells - 1);
        let r1 = (r1 as usize).min(geom.height_cells - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let i = geom.index(col, row);
                if occ.get(i) {
                    continue;
                }
                if obj.shape.contains(geom.cell_center(i) - pos) {
                    occ.set(i, true);
                    vel[i] = v;
                }
            }
        }
    }
    GroundTruth { occ, vel, timestamp: scene.time }
}

/// The default evaluation scene for a grid: two static walls along the left
/// and far edges, a harmonic rectangle, a sinusoid circle and a Brownian
/// circle. Object placement scales with the grid extent; sizes and speeds
/// are in meters.
pub fn sim_default(geom: &GridGeometry) -> Vec<SceneObject> {
    let e = geom.extent();
    let o = geom.origin;
    let at = |fx: f64, fy: f64| o + Vec2::new(fx * e.x, fy * e.y);
    let wall = 0.2;
    vec![
        SceneObject {
            shape: Shape::Rectangle { width: wall, height: 0.7 * e.y },
            trajectory: Trajectory::Static { position: o + Vec2::new(0.5 * wall, 0.65 * e.y) },
        },
        SceneObject {
            shape: Shape::Rectangle { width: e.x, height: wall },
            trajectory: Trajectory::Static { position: o + Vec2::new(0.5 * e.x, e.y - 0.5 * wall) },
        },
        SceneObject {
            shape: Shape::Rectangle { width: 0.6, height: 0.4 },
            trajectory: Trajectory::Harmonic {
                center: at(0.5, 0.45),
                amplitude: 1.0,
                frequency: 0.25,
                phase: 0.0,
                direction: Vec2::new(1.0, 0.0),
            },
        },
        SceneObject {
            shape: Shape::Circle { radius: 0.3 },
            trajectory: Trajectory::Sinusoid {
                start: at(0.25, 0.7),
                direction: Vec2::new(1.0, 0.0),
                speed: 0.5,
                travel: 0.5 * e.x,
                lateral_amplitude: 0.4,
                lateral_frequency: 0.2,
            },
        },
        SceneObject {
            shape: Shape::Circle { radius: 0.25 },
            trajectory: Trajectory::Brownian { start: at(0.7, 0.3), sigma: 0.5, bounds_min: at(0.15, 0.15), bounds_max: at(0.85, 0.8) },
        },
    ]
}

/// A single static wall spanning the middle 40% of the grid width at 60%
/// depth.
pub fn static_wall(geom: &GridGeometry) -> Vec<SceneObject> {
    let e = geom.extent();
    vec![SceneObject {
        shape: Shape::Rectangle { width: 0.4 * e.x, height: 0.2 },
        trajectory: Trajectory::Static { position: geom.origin + Vec2::new(0.5 * e.x, 0.6 * e.y) },
    }]
}
