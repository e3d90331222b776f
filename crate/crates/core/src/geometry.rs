//! Grid and ray geometry: cell indexing, voxel traversal, camera-ray tables
//! and line-of-sight masks.
//!
//! Cells are indexed row-major, `index = row * width_cells + col`, with row 0
//! at the grid origin (the edge nearest the sensor in the default layout).

use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Extent and resolution of the grid, plus the pose and field of view of the
/// static sensor that images it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridGeometry {
    pub width_cells: usize,
    pub height_cells: usize,
    /// Edge length of a square cell, meters.
    pub cell_size: f64,
    /// Position of the grid corner with the smallest coordinates, meters.
    pub origin: Vec2,
    pub sensor_pos: Vec2,
    /// Direction of the sensor's forward axis, radians from +x.
    pub heading: f64,
    pub fov: f64,
    pub num_rays: usize,
    /// Curtain placement range limits, meters from the sensor.
    pub r_min: f64,
    pub r_max: f64,
    /// Wrap motion across the grid edges (torus). Only the motion update
    /// consults this; rays never wrap.
    pub wrap: bool,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self::with_size(160, 160, 0.05)
    }
}

impl GridGeometry {
    /// A `width x height` grid at the origin with the sensor at the center of
    /// the bottom-center cell looking along +y, 90 degree fov and 128 rays.
    pub fn with_size(width_cells: usize, height_cells: usize, cell_size: f64) -> Self {
        let col = (width_cells / 2) as f64;
        Self {
            width_cells,
            height_cells,
            cell_size,
            origin: Vec2::zeros(),
            sensor_pos: Vec2::new((col + 0.5) * cell_size, 0.5 * cell_size),
            heading: FRAC_PI_2,
            fov: FRAC_PI_2,
            num_rays: 128,
            r_min: 0.1 * height_cells as f64 * cell_size,
            r_max: 0.95 * height_cells as f64 * cell_size,
            wrap: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGeometry(msg));
        if self.width_cells == 0 || self.height_cells == 0 {
            return bad("grid must have at least one cell per axis".into());
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad(format!("cell_size must be positive, got {}", self.cell_size));
        }
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::PI) {
            return bad(format!("fov must lie in (0, pi], got {}", self.fov));
        }
        if self.num_rays == 0 {
            return bad("num_rays must be at least 1".into());
        }
        if !(self.r_min >= 0.0 && self.r_min < self.r_max) {
            return bad(format!("range limits must satisfy 0 <= r_min < r_max, got [{}, {}]", self.r_min, self.r_max));
        }
        if !self.contains(self.sensor_pos) {
            return bad("sensor position lies outside the grid".into());
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width_cells * self.height_cells
    }

    pub fn extent(&self) -> Vec2 {
        Vec2::new(self.width_cells as f64 * self.cell_size, self.height_cells as f64 * self.cell_size)
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width_cells + col
    }

    #[inline]
    pub fn col_row(&self, index: usize) -> (usize, usize) {
        (index % self.width_cells, index / self.width_cells)
    }

    #[inline]
    pub fn cell_center(&self, index: usize) -> Vec2 {
        let (col, row) = self.col_row(index);
        self.origin + Vec2::new((col as f64 + 0.5) * self.cell_size, (row as f64 + 0.5) * self.cell_size)
    }

    /// Closed containment: points on the far edges count as inside.
    pub fn contains(&self, p: Vec2) -> bool {
        let q = p - self.origin;
        let e = self.extent();
        q.x >= 0.0 && q.y >= 0.0 && q.x <= e.x && q.y <= e.y
    }

    /// Cell containing `p`; points on the far edges map to the last cell.
    pub fn cell_of(&self, p: Vec2) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let (col, row) = self.grid_coords_clamped(p);
        Some(self.index(col, row))
    }

    /// Cell containing `p` with both axes wrapped onto the grid.
    pub fn cell_of_wrapped(&self, p: Vec2) -> usize {
        let q = (p - self.origin) / self.cell_size;
        let col = (q.x.floor() as i64).rem_euclid(self.width_cells as i64) as usize;
        let row = (q.y.floor() as i64).rem_euclid(self.height_cells as i64) as usize;
        self.index(col, row)
    }

    /// Cell containing `p` if it lies strictly inside the half-open grid
    /// `[0, w) x [0, h)`, otherwise `None`. Used for mass transport, where a
    /// point exactly on the far edge has left the grid.
    #[inline]
    pub fn cell_of_open(&self, p: Vec2) -> Option<usize> {
        let q = (p - self.origin) / self.cell_size;
        if q.x < 0.0 || q.y < 0.0 {
            return None;
        }
        let (col, row) = (q.x as usize, q.y as usize);
        (col < self.width_cells && row < self.height_cells).then(|| self.index(col, row))
    }

    fn grid_coords_clamped(&self, p: Vec2) -> (usize, usize) {
        let q = (p - self.origin) / self.cell_size;
        let col = (q.x.floor().max(0.0) as usize).min(self.width_cells - 1);
        let row = (q.y.floor().max(0.0) as usize).min(self.height_cells - 1);
        (col, row)
    }

    /// Angle of ray `k`: rays sit at the centers of `num_rays` equal angular
    /// bins spanning the fov.
    pub fn ray_angle(&self, k: usize) -> f64 {
        let bin = self.fov / self.num_rays as f64;
        self.heading - 0.5 * self.fov + (k as f64 + 0.5) * bin
    }

    /// Point where the ray from the sensor along `angle` leaves the grid.
    pub fn boundary_exit(&self, angle: f64) -> Vec2 {
        let dir = Vec2::new(angle.cos(), angle.sin());
        let lo = self.origin;
        let hi = self.origin + self.extent();
        let s = self.sensor_pos;
        let axis_exit = |d: f64, p: f64, lo: f64, hi: f64| {
            if d > 0.0 {
                (hi - p) / d
            } else if d < 0.0 {
                (lo - p) / d
            } else {
                f64::INFINITY
            }
        };
        let t = axis_exit(dir.x, s.x, lo.x, hi.x).min(axis_exit(dir.y, s.y, lo.y, hi.y));
        let end = s + dir * t;
        Vec2::new(end.x.clamp(lo.x, hi.x), end.y.clamp(lo.y, hi.y))
    }
}

/// One cell crossed by a segment, with the distance along the segment at
/// which the segment enters it (0 for the start cell).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub cell: usize,
    pub entry: f64,
}

/// Cells crossed by the segment `from -> to`, ordered by entry distance.
///
/// Amanatides-Woo stepping over the grid. When the segment passes exactly
/// through a cell corner both edge neighbors are emitted (x-step first)
/// before the diagonal cell, so consecutive cells always share an edge.
pub fn traverse_ray(geom: &GridGeometry, from: Vec2, to: Vec2) -> Result<Vec<usize>> {
    Ok(traverse_ray_with_entry(geom, from, to)?.into_iter().map(|c| c.cell).collect())
}

pub fn traverse_ray_with_entry(geom: &GridGeometry, from: Vec2, to: Vec2) -> Result<Vec<Crossing>> {
    for p in [from, to] {
        if !geom.contains(p) {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }
    }
    let (mut col, mut row) = geom.grid_coords_clamped(from);
    let (end_col, end_row) = geom.grid_coords_clamped(to);
    let mut out = vec![Crossing { cell: geom.index(col, row), entry: 0.0 }];

    let length = (to - from).norm();
    if length == 0.0 {
        return Ok(out);
    }

    let g0 = (from - geom.origin) / geom.cell_size;
    let g1 = (to - geom.origin) / geom.cell_size;
    let d = g1 - g0;

    // Parametric t in [0, 1] along the segment of the next x / y boundary.
    let axis_setup = |d: f64, g: f64, cell: usize| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, (cell as f64 + 1.0 - g) / d, 1.0 / d)
        } else if d < 0.0 {
            (-1, (cell as f64 - g) / d, -1.0 / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut t_max_x, t_delta_x) = axis_setup(d.x, g0.x, col);
    let (step_y, mut t_max_y, t_delta_y) = axis_setup(d.y, g0.y, row);

    let (w, h) = (geom.width_cells as i64, geom.height_cells as i64);
    let in_grid = |c: i64, r: i64| c >= 0 && r >= 0 && c < w && r < h;

    // A segment inside the grid crosses at most w + h boundaries.
    for _ in 0..(geom.width_cells + geom.height_cells + 2) {
        if col == end_col && row == end_row {
            break;
        }
        let t = t_max_x.min(t_max_y);
        if t > 1.0 {
            break;
        }
        let (c, r) = (col as i64, row as i64);
        if t_max_x < t_max_y {
            if !in_grid(c + step_x, r) {
                break;
            }
            col = (c + step_x) as usize;
            t_max_x += t_delta_x;
        } else if t_max_y < t_max_x {
            if !in_grid(c, r + step_y) {
                break;
            }
            row = (r + step_y) as usize;
            t_max_y += t_delta_y;
        } else {
            // Exact corner: supercover both edge neighbors, then the diagonal.
            let mut stop = false;
            for (nc, nr) in [(c + step_x, r), (c, r + step_y)] {
                if in_grid(nc, nr) {
                    out.push(Crossing { cell: geom.index(nc as usize, nr as usize), entry: t * length });
                    if nc as usize == end_col && nr as usize == end_row {
                        stop = true;
                        break;
                    }
                }
            }
            if stop || !in_grid(c + step_x, r + step_y) {
                break;
            }
            col = (c + step_x) as usize;
            row = (r + step_y) as usize;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        }
        out.push(Crossing { cell: geom.index(col, row), entry: t * length });
    }

    // Rounding can leave the walk one boundary short of an endpoint lying
    // exactly on a cell edge.
    let end = geom.index(end_col, end_row);
    let last = out.last().expect("non-empty").cell;
    if last != end {
        let (lc, lr) = geom.col_row(last);
        if lc.abs_diff(end_col) + lr.abs_diff(end_row) == 1 {
            out.push(Crossing { cell: end, entry: length });
        }
    }
    Ok(out)
}

/// Cells of one camera ray from the sensor outward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRay {
    pub angle: f64,
    pub cells: Vec<usize>,
    /// Entry distance of each cell from the sensor, meters.
    pub ranges: Vec<f64>,
    /// Positions along `cells` whose range lies in `[r_min, r_max]`.
    pub in_range: Range<usize>,
}

impl CameraRay {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRayTable {
    pub rays: Vec<CameraRay>,
    num_cells: usize,
}

impl CameraRayTable {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    /// Every cell listed by at least one ray.
    pub fn coverage(&self) -> CellMask {
        let mut mask = CellMask::new(self.num_cells);
        for ray in &self.rays {
            for &c in &ray.cells {
                mask.set(c, true);
            }
        }
        mask
    }

    /// Cells listed by at least one ray at an in-range position.
    pub fn in_range_coverage(&self) -> CellMask {
        let mut mask = CellMask::new(self.num_cells);
        for ray in &self.rays {
            for &c in &ray.cells[ray.in_range.clone()] {
                mask.set(c, true);
            }
        }
        mask
    }
}

pub fn build_ray_table(geom: &GridGeometry) -> CameraRayTable {
    let rays = (0..geom.num_rays)
        .map(|k| {
            let angle = geom.ray_angle(k);
            let end = geom.boundary_exit(angle);
            let crossings = traverse_ray_with_entry(geom, geom.sensor_pos, end).expect("sensor and boundary exit lie inside the grid");
            let cells: Vec<usize> = crossings.iter().map(|c| c.cell).collect();
            let ranges: Vec<f64> = crossings.iter().map(|c| c.entry).collect();
            let start = ranges.partition_point(|&r| r < geom.r_min);
            let stop = ranges.partition_point(|&r| r <= geom.r_max);
            CameraRay { angle, cells, ranges, in_range: start..stop.max(start) }
        })
        .collect();
    CameraRayTable { rays, num_cells: geom.num_cells() }
}

/// One boolean per cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellMask(Vec<bool>);

impl CellMask {
    pub fn new(num_cells: usize) -> Self {
        Self(vec![false; num_cells])
    }

    pub fn from_vec(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn is_subset_of(&self, other: &CellMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// Cells visible from the sensor given ground-truth occupancy: a cell is in
/// line of sight if some ray reaches it before (or at) its first occupied
/// cell.
pub fn los_mask(gt_occ: &CellMask, rays: &CameraRayTable) -> CellMask {
    let mut mask = CellMask::new(gt_occ.len());
    for ray in &rays.rays {
        for &c in &ray.cells {
            mask.set(c, true);
            if gt_occ.get(c) {
                break;
            }
        }
    }
    mask
}
