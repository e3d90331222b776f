//! ε-greedy bandit over the four placement strategies with a constant
//! step size, rewarded by the self-supervised forecast F1 score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DynamicOccupancyGrid;
use crate::policies::StrategyId;
use crate::sensing::{Label, ObservationGrid};

const ARMS: usize = StrategyId::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditParams {
    pub epsilon: f64,
    pub step_size: f64,
    pub initial_q: f64,
}

impl Default for BanditParams {
    fn default() -> Self {
        Self { epsilon: 0.1, step_size: 0.1, initial_q: 0.5 }
    }
}

impl BanditParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::InvalidParameter(format!("step size must lie in (0, 1], got {}", self.step_size)));
        }
        if !self.initial_q.is_finite() {
            return Err(Error::InvalidParameter("initial Q-value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub q_values: [f64; ARMS],
    pub epsilon: f64,
    pub step_size: f64,
    pub counts: [u64; ARMS],
}

impl BanditState {
    pub fn new(params: &BanditParams) -> Self {
        Self { q_values: [params.initial_q; ARMS], epsilon: params.epsilon, step_size: params.step_size, counts: [0; ARMS] }
    }

    /// Arm with the highest Q-value; exact ties go to the lowest index.
    pub fn greedy(&self) -> StrategyId {
        let mut best = 0;
        for (i, &q) in self.q_values.iter().enumerate().skip(1) {
            if q > self.q_values[best] {
                best = i;
            }
        }
        StrategyId::ALL[best]
    }

    /// Explores uniformly with probability ε, otherwise exploits.
    pub fn select_action<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StrategyId {
        let explore = self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon;
        let arm = if explore { StrategyId::ALL[rng.random_range(0..ARMS)] } else { self.greedy() };
        self.counts[arm.index()] += 1;
        arm
    }

    /// `Q(a) += α (R - Q(a))`.
    pub fn update_q(&mut self, arm: StrategyId, reward: f64) {
        let q = &mut self.q_values[arm.index()];
        *q += self.step_size * (reward - *q);
    }
}

/// F1 agreement between a forecast grid (occupied iff `w >= 0.5`) and the
/// known cells of an observation.
///
/// When neither the forecast nor the observation has a positive cell the
/// score is 1; otherwise `2TP / (2TP + FP + FN)`. Errors when the
/// observation has no known cells, in which case no reward exists.
pub fn self_supervised_reward(forecast: &DynamicOccupancyGrid, obs: &ObservationGrid) -> Result<f64> {
    if obs.len() != forecast.num_cells() {
        return Err(Error::GeometryMismatch);
    }
    let (mut tp, mut fp, mut fn_, mut observed) = (0u64, 0u64, 0u64, 0u64);
    for (&w, &label) in forecast.occupancy().iter().zip(obs.labels()) {
        let truth = match label {
            Label::Unknown => continue,
            Label::Occupied => true,
            Label::Free => false,
        };
        observed += 1;
        match (w >= 0.5, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if observed == 0 {
        return Err(Error::NoObservedCells);
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub(crate) fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}
