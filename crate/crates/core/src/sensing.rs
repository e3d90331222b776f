//! Light-curtain imaging against ground truth and conversion of detections
//! into OCCUPIED / FREE / UNKNOWN observation grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraRay, CameraRayTable, CellMask};
use crate::grid::SensorNoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Unknown = 0,
    Free = 1,
    Occupied = 2,
}

impl Label {
    pub fn from_byte(b: u8) -> Option<Label> {
        match b {
            0 => Some(Label::Unknown),
            1 => Some(Label::Free),
            2 => Some(Label::Occupied),
            _ => None,
        }
    }

    /// Merge rule for cells labeled by several rays: OCCUPIED beats FREE
    /// beats UNKNOWN.
    #[inline]
    fn merge(self, other: Label) -> Label {
        if (other as u8) > (self as u8) {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationGrid {
    labels: Vec<Label>,
}

impl ObservationGrid {
    pub fn unknown(num_cells: usize) -> Self {
        Self { labels: vec![Label::Unknown; num_cells] }
    }

    pub fn from_labels(labels: Vec<Label>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize) -> Label {
        self.labels[i]
    }

    #[inline]
    pub fn mark(&mut self, i: usize, label: Label) {
        self.labels[i] = self.labels[i].merge(label);
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn observed_count(&self) -> usize {
        self.labels.len() - self.count(Label::Unknown)
    }

    /// Cellwise merge of another observation of the same grid.
    pub fn merge_from(&mut self, other: &ObservationGrid) {
        for (a, &b) in self.labels.iter_mut().zip(&other.labels) {
            *a = a.merge(b);
        }
    }
}

/// One control point per camera ray, stored as a position along that ray's
/// cell list, or `None` when the ray carries no control point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curtain {
    pub control: Vec<Option<usize>>,
}

impl Curtain {
    pub fn empty(num_rays: usize) -> Self {
        Self { control: vec![None; num_rays] }
    }

    /// Checks every control point lies on its ray inside the range limits.
    pub fn is_valid_for(&self, rays: &CameraRayTable) -> bool {
        self.control.len() == rays.len() && self.control.iter().zip(&rays.rays).all(|(c, ray)| c.is_none_or(|k| ray.in_range.contains(&k)))
    }

    /// Grid cell index of each control point.
    pub fn cells<'a>(&'a self, rays: &'a CameraRayTable) -> impl Iterator<Item = Option<usize>> + 'a {
        self.control.iter().zip(&rays.rays).map(|(c, ray)| c.map(|k| ray.cells[k]))
    }
}

/// Per-ray detection flags; `None` for rays without a control point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionSet {
    pub detected: Vec<Option<bool>>,
}

impl DetectionSet {
    pub fn count(&self) -> usize {
        self.detected.iter().filter(|d| **d == Some(true)).count()
    }
}

/// True iff no occupied cell precedes position `k` on the ray.
fn visible(gt_occ: &CellMask, ray: &CameraRay, k: usize) -> bool {
    ray.cells[..k].iter().all(|&c| !gt_occ.get(c))
}

#[inline]
fn apply_noise<R: Rng + ?Sized>(truth: bool, noise: &SensorNoiseModel, rng: &mut R) -> bool {
    if truth {
        !(noise.false_negative > 0.0 && rng.random::<f64>() < noise.false_negative)
    } else {
        noise.false_positive > 0.0 && rng.random::<f64>() < noise.false_positive
    }
}

/// Images the curtain: a ray detects iff its control cell is occupied and
/// visible from the sensor, then flipped by the sensor noise rates.
pub fn image_curtain<R: Rng + ?Sized>(
    gt_occ: &CellMask,
    curtain: &Curtain,
    noise: &SensorNoiseModel,
    rays: &CameraRayTable,
    rng: &mut R,
) -> DetectionSet {
    let detected = curtain
        .control
        .iter()
        .zip(&rays.rays)
        .map(|(control, ray)| {
            control.map(|k| {
                let truth = gt_occ.get(ray.cells[k]) && visible(gt_occ, ray, k);
                apply_noise(truth, noise, rng)
            })
        })
        .collect();
    DetectionSet { detected }
}

/// Detected control cells become OCCUPIED and everything before them on the
/// ray FREE; undetected control cells become FREE; all else is UNKNOWN.
pub fn extract_observation(curtain: &Curtain, detections: &DetectionSet, rays: &CameraRayTable) -> ObservationGrid {
    let mut obs = ObservationGrid::unknown(rays.num_cells());
    for ((control, hit), ray) in curtain.control.iter().zip(&detections.detected).zip(&rays.rays) {
        let Some(k) = *control else { continue };
        if hit.unwrap_or(false) {
            for &c in &ray.cells[..k] {
                obs.mark(c, Label::Free);
            }
            obs.mark(ray.cells[k], Label::Occupied);
        } else {
            obs.mark(ray.cells[k], Label::Free);
        }
    }
    obs
}

/// Uniformly random in-range control point on every ray.
pub fn random_curtain<R: Rng + ?Sized>(rays: &CameraRayTable, rng: &mut R) -> Curtain {
    let control = rays.rays.iter().map(|ray| (!ray.in_range.is_empty()).then(|| rng.random_range(ray.in_range.clone()))).collect();
    Curtain { control }
}

/// Simulated LiDAR: per ray, the first occupied cell within `r_max` is
/// OCCUPIED, cells before it FREE and cells after it UNKNOWN; a ray without
/// a return is FREE up to `r_max`.
///
/// Noise is applied per ray: a true return is dropped with probability
/// `false_negative` (the ray then reads as a miss), and a miss produces a
/// spurious return at a uniformly random in-range cell with probability
/// `false_positive`.
pub fn lidar_scan<R: Rng + ?Sized>(
    gt_occ: &CellMask,
    rays: &CameraRayTable,
    r_max: f64,
    noise: &SensorNoiseModel,
    rng: &mut R,
) -> ObservationGrid {
    let mut obs = ObservationGrid::unknown(rays.num_cells());
    for ray in &rays.rays {
        let reach = ray.ranges.partition_point(|&r| r <= r_max);
        let first_hit = ray.cells[..reach].iter().position(|&c| gt_occ.get(c));
        let ret = match first_hit {
            Some(k) => apply_noise(true, noise, rng).then_some(k),
            None => {
                if apply_noise(false, noise, rng) && !ray.in_range.is_empty() {
                    Some(rng.random_range(ray.in_range.clone()))
                } else {
                    None
                }
            }
        };
        match ret {
            Some(k) => {
                for &c in &ray.cells[..k] {
                    obs.mark(c, Label::Free);
                }
                obs.mark(ray.cells[k], Label::Occupied);
            }
            None => {
                for &c in &ray.cells[..reach] {
                    obs.mark(c, Label::Free);
                }
            }
        }
    }
    obs
}
