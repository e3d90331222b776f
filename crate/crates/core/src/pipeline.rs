//! The sense / filter / place loop against the simulated world.
//!
//! [`run_sync`] runs everything on the calling thread and is bit-for-bit
//! reproducible. [`run_async`] runs imaging, filtering and placement as
//! three threads that hand grid buffers to each other through a
//! [`GridBufferPool`], plus a read-only evaluator working on copies.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{self_supervised_reward, BanditState};
use crate::config::{Mode, PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{build_ray_table, los_mask, CameraRayTable, GridGeometry};
use crate::grid::{
    forecast_with_scratch, horizon_steps, init_grid, measurement_update, motion_update, DynamicOccupancyGrid, MotionModel, UpdateStats,
};
use crate::metrics::{binarize, eval_forecast, EvalReport, DEFAULT_THRESHOLD};
use crate::policies::{place_curtain, StrategyId};
use crate::sensing::{extract_observation, image_curtain, lidar_scan, random_curtain, Curtain, ObservationGrid};
use crate::worldsim::{rasterize, GroundTruth, Scene};

const ARMS: usize = StrategyId::ALL.len();

/// Execution contexts; each owns an RNG stream seeded `seed ^ id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    World,
    Imaging,
    Filtering,
    Placement,
}

impl Context {
    pub fn id(self) -> u64 {
        match self {
            Context::World => 0x5752_4c44_0000_0001,
            Context::Imaging => 0x494d_4147_0000_0002,
            Context::Filtering => 0x4649_4c54_0000_0003,
            Context::Placement => 0x504c_4143_0000_0004,
        }
    }

    pub fn rng(self, seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ self.id())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    pub mode: Mode,
    /// Strategy chosen at this step (sync) or that produced this frame's
    /// curtain (async).
    pub arm: Option<StrategyId>,
    /// Self-supervised reward received at this step (sync: for the arm of
    /// the previous step; async: for `arm`).
    pub reward: Option<f64>,
    pub q: [f64; ARMS],
    pub counts: [u64; ARMS],
    pub eval: Option<EvalReport>,
    pub truncation_rate: f64,
    pub mass: f64,
}

/// Receives the metrics stream and grid snapshots of a run.
pub trait RunSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;

    fn snapshot(&mut self, _step: u64, _grid: &DynamicOccupancyGrid) -> Result<()> {
        Ok(())
    }
}

impl RunSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Mean scores over the evaluation ticks of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeans {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub count: u64,
}

impl EvalMeans {
    fn add(&mut self, r: &EvalReport) {
        self.accuracy += r.accuracy;
        self.precision += r.precision;
        self.recall += r.recall;
        self.f1 += r.f1;
        self.iou += r.iou;
        self.count += 1;
    }

    fn finish(mut self) -> Option<Self> {
        if self.count == 0 {
            return None;
        }
        let k = self.count as f64;
        for x in [&mut self.accuracy, &mut self.precision, &mut self.recall, &mut self.f1, &mut self.iou] {
            *x /= k;
        }
        Some(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorStats {
    /// A buffer was handed to a second writer.
    pub double_writer_violations: u64,
    /// A writer started on a buffer another context was reading.
    pub read_write_conflicts: u64,
    /// Role assignment stopped being a bijection.
    pub role_errors: u64,
    /// The filter had to wait for the placement context to release a grid.
    pub filter_blocked: u64,
    pub swaps: u64,
    /// Swaps where the outgoing current grid was still pinned.
    pub pinned_swaps: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub eval: Option<EvalMeans>,
    pub truncations: u64,
    pub cell_writes: u64,
    pub bandit: BanditState,
    pub final_grid: DynamicOccupancyGrid,
    /// Present for asynchronous runs.
    pub monitor: Option<MonitorStats>,
    pub elapsed: Duration,
    /// Filter cycles per second of wall time.
    pub filter_rate: f64,
    pub placement_cycles: u64,
}

impl RunSummary {
    /// Fraction of motion-update cell writes whose incoming mass exceeded 1.
    pub fn truncation_rate(&self) -> f64 {
        ratio(self.truncations, self.cell_writes)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Deterministic copy of the world that runs ahead of the main loop to
/// supply ground truth at forecast horizons.
struct WorldReplica {
    scene: Scene,
    rng: ChaCha8Rng,
    frame: u64,
    dt: f64,
}

impl WorldReplica {
    fn ground_truth_at(&mut self, frame: u64, geom: &GridGeometry) -> GroundTruth {
        debug_assert!(frame >= self.frame);
        while self.frame < frame {
            self.scene.step(self.dt, &mut self.rng);
            self.frame += 1;
        }
        rasterize(&self.scene, geom)
    }
}

struct Evaluator {
    replica: WorldReplica,
    horizon: f64,
    horizon_frames: u64,
    dst: DynamicOccupancyGrid,
    scratch: DynamicOccupancyGrid,
    rng: ChaCha8Rng,
}

impl Evaluator {
    fn new(world: WorldReplica, template: &DynamicOccupancyGrid, horizon: f64, dt: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            replica: world,
            horizon,
            horizon_frames: horizon_steps(horizon, dt)? as u64,
            dst: template.clone(),
            scratch: template.clone(),
            // Evaluation draws never feed back into the run.
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4556_414c_0000_0005),
        })
    }

    /// Forecasts `belief` (taken at `frame`) by the horizon and scores it
    /// against ground truth over its line-of-sight cells.
    fn evaluate(
        &mut self,
        frame: u64,
        belief: &DynamicOccupancyGrid,
        model: &MotionModel,
        rays: &CameraRayTable,
    ) -> Result<Option<EvalReport>> {
        forecast_with_scratch(belief, &mut self.dst, &mut self.scratch, model, self.horizon, &mut self.rng)?;
        let gt = self.replica.ground_truth_at(frame + self.horizon_frames, belief.geometry());
        let los = los_mask(&gt.occ, rays);
        match eval_forecast(&binarize(&self.dst, DEFAULT_THRESHOLD), &gt.occ, &los, self.horizon) {
            Ok(r) => Ok(Some(r)),
            Err(Error::NoLosCells) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

struct Setup {
    geom: Arc<GridGeometry>,
    rays: CameraRayTable,
    motion: MotionModel,
    scene: Scene,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let geom = Arc::new(cfg.geometry.clone());
    let rays = build_ray_table(&geom);
    let scene = Scene::new(cfg.scene.objects(&geom))?;
    Ok(Setup { geom, rays, motion: cfg.motion_model(), scene })
}

fn invariant_check(cfg: &RunConfig, grid: &DynamicOccupancyGrid, motion: &MotionModel, step: u64) -> Result<()> {
    if cfg.check_invariants {
        grid.check_invariants(motion.limits).map_err(|e| Error::InvalidParameter(format!("grid invariant broken at step {step}: {e}")))?;
    }
    Ok(())
}

fn observe(
    policy: PolicyKind,
    curtain: Option<&Curtain>,
    frame: u64,
    cfg: &RunConfig,
    gt: &GroundTruth,
    rays: &CameraRayTable,
    rng: &mut ChaCha8Rng,
) -> ObservationGrid {
    match (policy, curtain) {
        (PolicyKind::Lidar, _) => {
            if frame % cfg.lidar_every == 0 {
                lidar_scan(&gt.occ, rays, cfg.geometry.r_max, &cfg.sensor_noise, rng)
            } else {
                ObservationGrid::unknown(rays.num_cells())
            }
        }
        (_, Some(c)) => extract_observation(c, &image_curtain(&gt.occ, c, &cfg.sensor_noise, rays, rng), rays),
        (_, None) => ObservationGrid::unknown(rays.num_cells()),
    }
}

/// Single-threaded run. Per step `s`, starting from the belief `bel(x_s)`:
/// score it at eval ticks, motion-update it into the prior for `s + 1`
/// (which is also the forecast the curtain is placed on), choose a
/// strategy and place the curtain, advance the world and image, reward the
/// chosen strategy with the F1 of that prior against the new observation,
/// then apply the measurement update.
pub fn run_sync(cfg: &RunConfig, sink: &mut dyn RunSink) -> Result<RunSummary> {
    let started = Instant::now();
    let Setup { geom, rays, motion, mut scene } = setup(cfg)?;
    let mut world_rng = Context::World.rng(cfg.seed);
    let mut sense_rng = Context::Imaging.rng(cfg.seed);
    let mut filter_rng = Context::Filtering.rng(cfg.seed);
    let mut policy_rng = Context::Placement.rng(cfg.seed);

    let mut bel = init_grid(geom.clone(), &motion, cfg.particles_per_cell, &mut filter_rng)?;
    let mut prior = bel.clone();
    let mut evaluator = if cfg.eval_every > 0 {
        let replica = WorldReplica { scene: scene.clone(), rng: world_rng.clone(), frame: 0, dt: motion.dt };
        Some(Evaluator::new(replica, &bel, cfg.eval_horizon, motion.dt, cfg.seed)?)
    } else {
        None
    };
    let mut bandit = BanditState::new(&cfg.bandit);
    let mut means = EvalMeans::default();
    let (mut truncations, mut cell_writes) = (0u64, 0u64);
    let mut pending_reward = None;

    for s in 0..cfg.steps {
        let eval = match evaluator.as_mut() {
            Some(ev) if s % cfg.eval_every == 0 => ev.evaluate(s, &bel, &motion, &rays)?,
            _ => None,
        };
        if let Some(r) = &eval {
            means.add(r);
        }

        let stats = motion_update(&bel, &mut prior, &motion, &mut filter_rng)?;
        truncations += stats.truncation_count;
        cell_writes += stats.cells_updated;

        let arm = match cfg.policy {
            PolicyKind::Mab => Some(bandit.select_action(&mut policy_rng)),
            p => p.strategy(),
        };
        let curtain = match (cfg.policy, arm) {
            (_, Some(a)) => Some(place_curtain(&prior, a, &rays)),
            (PolicyKind::Random, None) => Some(random_curtain(&rays, &mut sense_rng)),
            _ => None,
        };
        let (q, counts) = (bandit.q_values, bandit.counts);

        scene.step(motion.dt, &mut world_rng);
        let gt = rasterize(&scene, &geom);
        let mut obs = observe(cfg.policy, curtain.as_ref(), s + 1, cfg, &gt, &rays, &mut sense_rng);

        let reward = match arm {
            Some(a) => match self_supervised_reward(&prior, &obs) {
                Ok(r) => {
                    if cfg.policy == PolicyKind::Mab {
                        bandit.update_q(a, r);
                    }
                    Some(r)
                }
                Err(Error::NoObservedCells) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };

        if cfg.random_fill && cfg.policy != PolicyKind::Lidar {
            let filler = random_curtain(&rays, &mut sense_rng);
            let det = image_curtain(&gt.occ, &filler, &cfg.sensor_noise, &rays, &mut sense_rng);
            obs.merge_from(&extract_observation(&filler, &det, &rays));
        }
        measurement_update(&mut prior, &obs, &cfg.sensor_noise, motion.limits)?;
        std::mem::swap(&mut bel, &mut prior);
        invariant_check(cfg, &bel, &motion, s + 1)?;

        sink.record(&StepRecord {
            step: s,
            t: s as f64 * motion.dt,
            mode: Mode::Sync,
            arm,
            reward: pending_reward,
            q,
            counts,
            eval,
            truncation_rate: ratio(stats.truncation_count, stats.cells_updated),
            mass: bel.total_mass(),
        })?;
        pending_reward = reward;
        if cfg.snapshot_every > 0 && (s + 1) % cfg.snapshot_every == 0 {
            sink.snapshot(s + 1, &bel)?;
        }
    }

    let elapsed = started.elapsed();
    Ok(RunSummary {
        steps: cfg.steps,
        eval: means.finish(),
        truncations,
        cell_writes,
        bandit,
        final_grid: bel,
        monitor: None,
        filter_rate: cfg.steps as f64 / elapsed.as_secs_f64().max(1e-9),
        elapsed,
        placement_cycles: cfg.steps,
    })
}

/// A grid plus the stable identity the protocol monitor tracks it by.
#[derive(Debug)]
pub struct GridBuffer {
    id: usize,
    pub grid: DynamicOccupancyGrid,
}

impl GridBuffer {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Buffer ids by role; a valid assignment is a permutation of 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roles {
    pub current: usize,
    pub next: usize,
    pub forecasting: usize,
    pub extra: usize,
}

impl Roles {
    pub fn is_bijection(&self) -> bool {
        let mut seen = [false; 4];
        for id in [self.current, self.next, self.forecasting, self.extra] {
            if id >= 4 || std::mem::replace(&mut seen[id], true) {
                return false;
            }
        }
        true
    }
}

struct PoolState {
    current: Arc<GridBuffer>,
    version: u64,
    roles: Roles,
    writers: [Option<Context>; 4],
    readers: [u32; 4],
    stats: MonitorStats,
}

/// Four grids: `current` is published read-only to every context, `next`
/// is written by the filter, `forecasting` by placement, and `extra`
/// stands in for `next` whenever the outgoing current grid is still being
/// read by placement, so the filter never waits.
pub struct GridBufferPool {
    state: Mutex<PoolState>,
}

/// The buffers a pool hands out at creation: the filter owns `next` and
/// `extra`, placement owns `forecasting`.
pub struct PoolBuffers {
    pub next: GridBuffer,
    pub forecasting: GridBuffer,
    pub extra: Arc<GridBuffer>,
}

/// Read access to the current grid, counted by the monitor until dropped.
pub struct Pinned<'a> {
    pool: &'a GridBufferPool,
    buffer: Option<Arc<GridBuffer>>,
    pub version: u64,
}

impl std::ops::Deref for Pinned<'_> {
    type Target = GridBuffer;

    fn deref(&self) -> &GridBuffer {
        self.buffer.as_ref().expect("present until drop")
    }
}

impl Drop for Pinned<'_> {
    fn drop(&mut self) {
        let mut st = self.pool.lock();
        let buf = self.buffer.take().expect("present until drop");
        st.readers[buf.id] -= 1;
        drop(buf);
    }
}

/// Write access to an owned buffer, registered with the monitor.
pub struct WriteGuard<'a> {
    pool: &'a GridBufferPool,
    id: usize,
}

impl Drop for WriteGuard<'_> {
    fn drop(&mut self) {
        self.pool.lock().writers[self.id] = None;
    }
}

impl GridBufferPool {
    pub fn new(initial: &DynamicOccupancyGrid) -> (Self, PoolBuffers) {
        let make = |id| GridBuffer { id, grid: initial.clone() };
        let roles = Roles { current: 0, next: 1, forecasting: 2, extra: 3 };
        let pool = GridBufferPool {
            state: Mutex::new(PoolState {
                current: Arc::new(make(0)),
                version: 0,
                roles,
                writers: [None; 4],
                readers: [0; 4],
                stats: MonitorStats::default(),
            }),
        };
        (pool, PoolBuffers { next: make(1), forecasting: make(2), extra: Arc::new(make(3)) })
    }

    fn lock(&self) -> MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn pin(&self) -> Pinned<'_> {
        let mut st = self.lock();
        let buf = st.current.clone();
        st.readers[buf.id] += 1;
        Pinned { pool: self, buffer: Some(buf), version: st.version }
    }

    pub fn version(&self) -> u64 {
        self.lock().version
    }

    pub fn begin_write(&self, ctx: Context, buffer: &GridBuffer) -> WriteGuard<'_> {
        let mut st = self.lock();
        let id = buffer.id;
        if st.writers[id].is_some() {
            st.stats.double_writer_violations += 1;
        }
        if st.readers[id] > 0 {
            st.stats.read_write_conflicts += 1;
        }
        st.writers[id] = Some(ctx);
        WriteGuard { pool: self, id }
    }

    /// Makes `next` the current grid and returns the outgoing one.
    pub fn publish(&self, next: GridBuffer) -> Arc<GridBuffer> {
        let mut st = self.lock();
        st.roles.current = next.id;
        st.version += 1;
        st.stats.swaps += 1;
        std::mem::replace(&mut st.current, Arc::new(next))
    }

    /// Records the filter's new `next` and `extra` buffers.
    pub fn assign(&self, next: usize, extra: usize) {
        let mut st = self.lock();
        st.roles.next = next;
        st.roles.extra = extra;
        if !st.roles.is_bijection() {
            st.stats.role_errors += 1;
        }
    }

    pub fn roles(&self) -> Roles {
        self.lock().roles
    }

    pub fn stats(&self) -> MonitorStats {
        self.lock().stats
    }

    /// Filter side of a swap: publishes `next`, then reclaims a writable
    /// buffer. The outgoing current grid is reused unless placement still
    /// reads it, in which case it parks as `extra` and the old extra, which
    /// placement cannot be reading, becomes the new `next`.
    pub fn swap(&self, next: GridBuffer, extra: &mut Arc<GridBuffer>) -> GridBuffer {
        let old = self.publish(next);
        let fresh = match Arc::try_unwrap(old) {
            Ok(b) => b,
            Err(pinned) => {
                self.lock().stats.pinned_swaps += 1;
                let mut spare = std::mem::replace(extra, pinned);
                loop {
                    match Arc::try_unwrap(spare) {
                        Ok(b) => break b,
                        Err(still) => {
                            // Unreachable while placement pins at most one grid.
                            self.lock().stats.filter_blocked += 1;
                            spare = still;
                            thread::yield_now();
                        }
                    }
                }
            }
        };
        self.assign(fresh.id, extra.id);
        fresh
    }
}

struct Pacer {
    period: Option<Duration>,
    next: Instant,
}

impl Pacer {
    fn new(hz: f64) -> Self {
        Self { period: (hz > 0.0).then(|| Duration::from_secs_f64(1.0 / hz)), next: Instant::now() }
    }

    fn wait(&mut self) {
        let Some(p) = self.period else { return };
        let now = Instant::now();
        if self.next > now {
            thread::sleep(self.next - now);
            self.next += p;
        } else {
            self.next = now + p;
        }
    }
}

struct Frame {
    frame: u64,
    obs: ObservationGrid,
    /// Random filler observation, merged after the reward is computed.
    fill: Option<ObservationGrid>,
    arm: Option<StrategyId>,
}

struct BanditView {
    q: [f64; ARMS],
    counts: [u64; ARMS],
}

/// Threaded run. Imaging advances the world one frame per cycle and images
/// the newest computed curtain, or a random one when none is pending, plus
/// a random filler curtain when `random_fill` is set. Filtering turns each frame into a motion and measurement update and
/// publishes the result. Placement forecasts the freshest published grid,
/// picks a strategy and posts a curtain. Random curtains update the belief
/// but never the bandit.
pub fn run_async(cfg: &RunConfig, sink: &mut dyn RunSink) -> Result<RunSummary> {
    let started = Instant::now();
    let Setup { geom, rays, motion, scene } = setup(cfg)?;
    let mut filter_rng = Context::Filtering.rng(cfg.seed);
    let initial = init_grid(geom.clone(), &motion, cfg.particles_per_cell, &mut filter_rng)?;
    let (pool, buffers) = GridBufferPool::new(&initial);
    let PoolBuffers { next, mut forecasting, extra } = buffers;

    let pending: Mutex<Option<(Curtain, StrategyId)>> = Mutex::new(None);
    let view = Mutex::new(BanditView { q: [cfg.bandit.initial_q; ARMS], counts: [0; ARMS] });
    let done = AtomicBool::new(false);
    let placement_cycles = AtomicU64::new(0);
    let (frame_tx, frame_rx) = mpsc::sync_channel::<Frame>(cfg.async_opts.queue_depth);
    let (reward_tx, reward_rx) = mpsc::channel::<(StrategyId, f64)>();
    let (eval_tx, eval_rx) = mpsc::channel::<(u64, DynamicOccupancyGrid)>();

    let world = WorldReplica { scene, rng: Context::World.rng(cfg.seed), frame: 0, dt: motion.dt };
    let eval_world = WorldReplica { scene: world.scene.clone(), rng: world.rng.clone(), frame: 0, dt: motion.dt };

    let outcome = thread::scope(|s| -> Result<_> {
        let rays = &rays;
        let motion = &motion;
        let geom = &geom;
        let (pending, view, done, pool) = (&pending, &view, &done, &pool);
        let placement_cycles = &placement_cycles;

        let imaging = s.spawn(move || {
            let mut world = world;
            let mut rng = Context::Imaging.rng(cfg.seed);
            let mut pacer = Pacer::new(cfg.async_opts.imaging_hz);
            for frame in 1..=cfg.steps {
                pacer.wait();
                let gt = world.ground_truth_at(frame, geom);
                let computed = pending.lock().unwrap_or_else(|e| e.into_inner()).take();
                let (obs, arm) = match (cfg.policy, computed) {
                    (PolicyKind::Lidar, _) => (observe(PolicyKind::Lidar, None, frame, cfg, &gt, rays, &mut rng), None),
                    (_, Some((c, a))) => (observe(cfg.policy, Some(&c), frame, cfg, &gt, rays, &mut rng), Some(a)),
                    (_, None) => {
                        let c = random_curtain(rays, &mut rng);
                        (observe(cfg.policy, Some(&c), frame, cfg, &gt, rays, &mut rng), None)
                    }
                };
                let fill = (cfg.random_fill && cfg.policy != PolicyKind::Lidar).then(|| {
                    let c = random_curtain(rays, &mut rng);
                    observe(cfg.policy, Some(&c), frame, cfg, &gt, rays, &mut rng)
                });
                if frame_tx.send(Frame { frame, obs, fill, arm }).is_err() {
                    break;
                }
            }
        });

        let placement = s.spawn(move || -> Result<BanditState> {
            let mut bandit = BanditState::new(&cfg.bandit);
            let mut rng = Context::Placement.rng(cfg.seed);
            let mut pacer = Pacer::new(cfg.async_opts.placement_hz);
            let mut seen = u64::MAX;
            let stall = Duration::from_millis(cfg.async_opts.placement_stall_ms);
            let fixed = cfg.policy.strategy();
            let active = fixed.is_some() || cfg.policy == PolicyKind::Mab;
            while !done.load(Ordering::Acquire) {
                while let Ok((arm, r)) = reward_rx.try_recv() {
                    if cfg.policy == PolicyKind::Mab {
                        bandit.update_q(arm, r);
                    }
                }
                if !active || pool.version() == seen {
                    thread::sleep(Duration::from_micros(200));
                    continue;
                }
                pacer.wait();
                {
                    let pinned = pool.pin();
                    seen = pinned.version;
                    let _w = pool.begin_write(Context::Placement, &forecasting);
                    motion_update(&pinned.grid, &mut forecasting.grid, motion, &mut rng)?;
                    if !stall.is_zero() {
                        thread::sleep(stall);
                    }
                }
                let arm = fixed.unwrap_or_else(|| bandit.select_action(&mut rng));
                let curtain = place_curtain(&forecasting.grid, arm, rays);
                *pending.lock().unwrap_or_else(|e| e.into_inner()) = Some((curtain, arm));
                {
                    let mut v = view.lock().unwrap_or_else(|e| e.into_inner());
                    v.q = bandit.q_values;
                    v.counts = bandit.counts;
                }
                placement_cycles.fetch_add(1, Ordering::Relaxed);
            }
            Ok(bandit)
        });

        let evaluator = s.spawn(move || -> Result<BTreeMap<u64, EvalReport>> {
            let mut out = BTreeMap::new();
            let Ok((frame, first)) = eval_rx.recv() else { return Ok(out) };
            let mut ev = Evaluator::new(eval_world, &first, cfg.eval_horizon, motion.dt, cfg.seed)?;
            let mut job = Some((frame, first));
            while let Some((frame, grid)) = job {
                if let Some(r) = ev.evaluate(frame, &grid, motion, rays)? {
                    out.insert(frame, r);
                }
                job = eval_rx.recv().ok();
            }
            Ok(out)
        });

        // Filtering runs on this thread.
        let filter_started = Instant::now();
        let filtered = (|| -> Result<_> {
            let mut next = next;
            let mut extra = extra;
            let mut pacer = Pacer::new(cfg.async_opts.filtering_hz);
            let mut records = Vec::with_capacity(cfg.steps as usize);
            let mut snapshots = Vec::new();
            let mut totals = UpdateStats::default();
            let mut frames = 0u64;
            while let Ok(Frame { frame, mut obs, fill, arm }) = frame_rx.recv() {
                pacer.wait();
                let stats;
                let reward;
                {
                    let _w = pool.begin_write(Context::Filtering, &next);
                    {
                        let cur = pool.pin();
                        stats = motion_update(&cur.grid, &mut next.grid, motion, &mut filter_rng)?;
                    }
                    reward = match arm {
                        Some(a) => self_supervised_reward(&next.grid, &obs).ok().inspect(|&r| {
                            let _ = reward_tx.send((a, r));
                        }),
                        None => None,
                    };
                    if let Some(f) = &fill {
                        obs.merge_from(f);
                    }
                    measurement_update(&mut next.grid, &obs, &cfg.sensor_noise, motion.limits)?;
                    invariant_check(cfg, &next.grid, motion, frame)?;
                }
                totals.accumulate(&stats);
                let mass = next.grid.total_mass();
                if cfg.eval_every > 0 && frame % cfg.eval_every == 0 {
                    let _ = eval_tx.send((frame, next.grid.clone()));
                }
                if cfg.snapshot_every > 0 && frame % cfg.snapshot_every == 0 {
                    snapshots.push((frame, next.grid.clone()));
                }
                next = pool.swap(next, &mut extra);
                let (q, counts) = {
                    let v = view.lock().unwrap_or_else(|e| e.into_inner());
                    (v.q, v.counts)
                };
                records.push(StepRecord {
                    step: frame,
                    t: frame as f64 * motion.dt,
                    mode: Mode::Async,
                    arm,
                    reward,
                    q,
                    counts,
                    eval: None,
                    truncation_rate: ratio(stats.truncation_count, stats.cells_updated),
                    mass,
                });
                frames += 1;
            }
            Ok((records, snapshots, totals, frames))
        })();
        let filter_elapsed = filter_started.elapsed();
        done.store(true, Ordering::Release);
        drop(frame_rx);
        drop(eval_tx);
        drop(reward_tx);

        imaging.join().expect("imaging thread panicked");
        let bandit = placement.join().expect("placement thread panicked")?;
        let evals = evaluator.join().expect("evaluator thread panicked")?;
        let (records, snapshots, totals, frames) = filtered?;
        Ok((records, snapshots, totals, frames, filter_elapsed, bandit, evals))
    })?;

    let (mut records, snapshots, totals, frames, filter_elapsed, bandit, evals) = outcome;
    let mut means = EvalMeans::default();
    for rec in &mut records {
        rec.eval = evals.get(&rec.step).copied();
        if let Some(r) = &rec.eval {
            means.add(r);
        }
        sink.record(rec)?;
    }
    for (frame, grid) in &snapshots {
        sink.snapshot(*frame, grid)?;
    }
    let final_grid = pool.pin().grid.clone();
    Ok(RunSummary {
        steps: frames,
        eval: means.finish(),
        truncations: totals.truncation_count,
        cell_writes: totals.cells_updated,
        bandit,
        final_grid,
        monitor: Some(pool.stats()),
        elapsed: started.elapsed(),
        filter_rate: frames as f64 / filter_elapsed.as_secs_f64().max(1e-9),
        placement_cycles: placement_cycles.load(Ordering::Relaxed),
    })
}

/// Dispatches on the configured mode.
pub fn run(cfg: &RunConfig, sink: &mut dyn RunSink) -> Result<RunSummary> {
    match cfg.mode {
        Mode::Sync => run_sync(cfg, sink),
        Mode::Async => run_async(cfg, sink),
    }
}
