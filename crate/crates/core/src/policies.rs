//! Curtain placement strategies over a forecasted grid.
//!
//! Every strategy scores cells independently and the curtain takes, per
//! ray, the in-range cell with the highest score. Without constraints
//! coupling neighboring rays this maximizes the summed score exactly.
//! Entropies are in bits throughout, including the differential entropy of
//! the velocity distribution.

use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraRay, CameraRayTable};
use crate::grid::{fit_gaussian, DynamicOccupancyGrid};
use crate::sensing::Curtain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyId {
    #[serde(rename = "depth")]
    DepthProb,
    #[serde(rename = "occ")]
    OccEntropy,
    #[serde(rename = "vel")]
    VelEntropy,
    #[serde(rename = "cmb")]
    Combined,
}

impl StrategyId {
    pub const ALL: [StrategyId; 4] = [StrategyId::DepthProb, StrategyId::OccEntropy, StrategyId::VelEntropy, StrategyId::Combined];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StrategyId> {
        Self::ALL.get(i).copied()
    }

    /// Short name used on the command line and in metrics streams.
    pub fn short_name(self) -> &'static str {
        match self {
            StrategyId::DepthProb => "depth",
            StrategyId::OccEntropy => "occ",
            StrategyId::VelEntropy => "vel",
            StrategyId::Combined => "cmb",
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.short_name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected depth, occ, vel or cmb)"))
    }
}

/// Raymarched depth and visibility probabilities along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProbProfile {
    /// Probability the depth return lands in each cell.
    pub depth: Vec<f64>,
    /// Probability that every cell up to and including this one is free.
    pub visibility: Vec<f64>,
}

/// Linear-time raymarch: `visibility[i] = visibility[i-1] (1 - w_i)` and
/// `depth[i] = visibility[i-1] w_i`.
pub fn depth_prob_profile(grid: &DynamicOccupancyGrid, ray: &CameraRay) -> DepthProbProfile {
    depth_prob_from_occupancy(ray.cells.iter().map(|&c| grid.occupancy()[c]))
}

pub fn depth_prob_from_occupancy(occupancy: impl IntoIterator<Item = f64>) -> DepthProbProfile {
    let mut depth = Vec::new();
    let mut visibility = Vec::new();
    let mut vis = 1.0;
    for w in occupancy {
        depth.push(vis * w);
        vis *= 1.0 - w;
        visibility.push(vis);
    }
    DepthProbProfile { depth, visibility }
}

/// Binary entropy in bits, with `0 log 0 = 0`.
#[inline]
pub fn occ_entropy(w: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
    h(w) + h(1.0 - w)
}

/// Differential entropy in bits of the Gaussian fitted to a particle set:
/// `1/2 log2 det(2 pi e Sigma)`.
pub fn vel_entropy(velocities: &[crate::geometry::Vec2], weights: &[f64]) -> f64 {
    let g = fit_gaussian(velocities, weights).expect("particle sets are never empty");
    0.5 * ((2.0 * PI * E).powi(2) * g.cov.determinant()).log2()
}

pub fn combined_score(w: f64, vel_entropy_bits: f64) -> f64 {
    occ_entropy(w) + w * vel_entropy_bits
}

/// Expected information gain in bits of observing one cell of occupancy `w`
/// through a binary channel with the given false positive / negative rates:
/// `H(z) - w H(fn) - (1 - w) H(fp)`.
pub fn info_gain_cell(w: f64, false_positive: f64, false_negative: f64) -> f64 {
    let p_detect = w * (1.0 - false_negative) + (1.0 - w) * false_positive;
    occ_entropy(p_detect) - w * occ_entropy(false_negative) - (1.0 - w) * occ_entropy(false_positive)
}

/// Per-cell score of a cell-local strategy. Depth probability depends on
/// the whole ray and is handled separately.
fn cell_scores(grid: &DynamicOccupancyGrid, strategy: StrategyId, rays: &CameraRayTable) -> Vec<f64> {
    let occupancy = grid.occupancy();
    let mut scores = vec![f64::NAN; grid.num_cells()];
    for ray in &rays.rays {
        for &c in &ray.cells[ray.in_range.clone()] {
            if !scores[c].is_nan() {
                continue;
            }
            scores[c] = match strategy {
                StrategyId::OccEntropy => occ_entropy(occupancy[c]),
                StrategyId::VelEntropy => {
                    let (v, p) = grid.cell_particles(c);
                    vel_entropy(v, p)
                }
                StrategyId::Combined => {
                    let (v, p) = grid.cell_particles(c);
                    combined_score(occupancy[c], vel_entropy(v, p))
                }
                StrategyId::DepthProb => unreachable!("depth probability is not cell-local"),
            };
        }
    }
    scores
}

/// First position of the maximum; ties go to the nearer cell.
fn argmax_first(scores: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, _)| k)
}

/// Per-ray score profile over the ray's in-range positions.
pub fn ray_scores(grid: &DynamicOccupancyGrid, strategy: StrategyId, ray: &CameraRay) -> Vec<f64> {
    match strategy {
        StrategyId::DepthProb => depth_prob_profile(grid, ray).depth[ray.in_range.clone()].to_vec(),
        _ => {
            let occupancy = grid.occupancy();
            ray.cells[ray.in_range.clone()]
                .iter()
                .map(|&c| {
                    let (v, p) = grid.cell_particles(c);
                    match strategy {
                        StrategyId::OccEntropy => occ_entropy(occupancy[c]),
                        StrategyId::VelEntropy => vel_entropy(v, p),
                        _ => combined_score(occupancy[c], vel_entropy(v, p)),
                    }
                })
                .collect()
        }
    }
}

pub fn place_curtain(grid: &DynamicOccupancyGrid, strategy: StrategyId, rays: &CameraRayTable) -> Curtain {
    let control = match strategy {
        StrategyId::DepthProb => rays
            .rays
            .iter()
            .map(|ray| {
                let profile = depth_prob_profile(grid, ray);
                argmax_first(ray.in_range.clone().map(|k| (k, profile.depth[k])))
            })
            .collect(),
        _ => {
            let scores = cell_scores(grid, strategy, rays);
            rays.rays.iter().map(|ray| argmax_first(ray.in_range.clone().map(|k| (k, scores[ray.cells[k]])))).collect()
        }
    };
    Curtain { control }
}
