//! Little-endian binary snapshots of grids and observation rasters.
//!
//! Grid layout: magic `DOGS`, u32 version, u32 width, u32 height, u32
//! particles per cell, f64 cell size, f64 timestamp, then per cell (row
//! major) f64 occupancy followed by `M` triples of f64 (vx, vy, weight).
//! The remaining geometry fields are taken from the caller.
//!
//! Observation layout: magic `OBSG`, u32 version, u32 width, u32 height,
//! then one byte per cell (0 unknown, 1 free, 2 occupied).

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{GridGeometry, Vec2};
use crate::grid::DynamicOccupancyGrid;
use crate::sensing::{Label, ObservationGrid};

const GRID_MAGIC: &[u8; 4] = b"DOGS";
const OBS_MAGIC: &[u8; 4] = b"OBSG";
const VERSION: u32 = 1;

pub fn write_grid<W: Write>(grid: &DynamicOccupancyGrid, mut out: W) -> Result<()> {
    let g = grid.geometry();
    let m = grid.particles_per_cell();
    let mut buf = Vec::with_capacity(40 + grid.num_cells() * (8 + 24 * m));
    buf.extend_from_slice(GRID_MAGIC);
    for v in [VERSION, g.width_cells as u32, g.height_cells as u32, m as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&g.cell_size.to_le_bytes());
    buf.extend_from_slice(&grid.timestamp.to_le_bytes());
    for i in 0..grid.num_cells() {
        buf.extend_from_slice(&grid.occupancy()[i].to_le_bytes());
        let (vel, wts) = grid.cell_particles(i);
        for (v, w) in vel.iter().zip(wts) {
            for x in [v.x, v.y, *w] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::Snapshot("truncated data".into()));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn check_header(c: &mut Cursor, magic: &[u8; 4], geom: &GridGeometry) -> Result<()> {
    if &c.take::<4>()? != magic {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let (w, h) = (c.u32()? as usize, c.u32()? as usize);
    if (w, h) != (geom.width_cells, geom.height_cells) {
        return Err(Error::GeometryMismatch);
    }
    Ok(())
}

/// Decodes a grid snapshot against `geom`, which must match its dimensions.
pub fn read_grid<R: Read>(mut input: R, geom: Arc<GridGeometry>) -> Result<DynamicOccupancyGrid> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    check_header(&mut c, GRID_MAGIC, &geom)?;
    let m = c.u32()? as usize;
    let cell_size = c.f64()?;
    if cell_size != geom.cell_size {
        return Err(Error::GeometryMismatch);
    }
    let timestamp = c.f64()?;
    let n = geom.num_cells();
    if m == 0 || c.0.len() != n * (8 + 24 * m) {
        return Err(Error::Snapshot("payload size does not match header".into()));
    }
    let mut occupancy = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n * m);
    let mut weights = Vec::with_capacity(n * m);
    for _ in 0..n {
        occupancy.push(c.f64()?);
        for _ in 0..m {
            velocities.push(Vec2::new(c.f64()?, c.f64()?));
            weights.push(c.f64()?);
        }
    }
    DynamicOccupancyGrid::from_parts(geom, m, occupancy, velocities, weights, timestamp)
}

pub fn write_observation<W: Write>(obs: &ObservationGrid, geom: &GridGeometry, mut out: W) -> Result<()> {
    if obs.len() != geom.num_cells() {
        return Err(Error::GeometryMismatch);
    }
    let mut buf = Vec::with_capacity(16 + obs.len());
    buf.extend_from_slice(OBS_MAGIC);
    for v in [VERSION, geom.width_cells as u32, geom.height_cells as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(obs.labels().iter().map(|&l| l as u8));
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_observation<R: Read>(mut input: R, geom: &GridGeometry) -> Result<ObservationGrid> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    check_header(&mut c, OBS_MAGIC, geom)?;
    if c.0.len() != geom.num_cells() {
        return Err(Error::Snapshot("payload size does not match header".into()));
    }
    let labels =
        c.0.iter()
            .map(|&b| Label::from_byte(b).ok_or_else(|| Error::Snapshot(format!("invalid label byte {b}"))))
            .collect::<Result<Vec<_>>>()?;
    Ok(ObservationGrid::from_labels(labels))
}
