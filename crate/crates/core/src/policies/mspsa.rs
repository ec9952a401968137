//! Markovian simultaneous perturbation stochastic approximation.
//!
//! One SPSA learner per chain state. Right after state `i` is observed the
//! learner for `i` plays `x_hat + c * delta`; the next time `i` is observed it
//! plays `x_hat - c * delta` with the same `delta`, and once both costs are in
//! it takes a projected step
//!
//! ```text
//! x_hat <- proj( x_hat - a * (d_plus - d_minus) / c * inv(delta) )
//! ```
//!
//! with `a = gamma / (N + t_i)` and `c = gamma' / (N' + t_i)^(1/4)`, where
//! `t_i` counts the perturbation pairs started for state `i`. Learners for
//! different states never share observations, so consecutive observations
//! from different chain states are never differenced.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Decision, EstimateView, Observation, Policy, PolicyError};
use crate::model::{DimensionMismatch, FeasibleBox, Objective};
use crate::simulate::RngStream;

/// Step-size and perturbation-size sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    /// `gamma`, numerator of the step size.
    pub step_gain: f64,
    /// `N`, offset of the step size denominator.
    pub step_offset: f64,
    /// `gamma'`, numerator of the perturbation size.
    pub perturbation_gain: f64,
    /// `N'`, offset of the perturbation size denominator.
    pub perturbation_offset: f64,
}

impl GainSchedule {
    pub fn new(step_gain: f64, step_offset: f64, perturbation_gain: f64, perturbation_offset: f64) -> Self {
        Self {
            step_gain,
            step_offset,
            perturbation_gain,
            perturbation_offset,
        }
    }

    /// Step gain `1 / (8 * sigma_lower)` from a known lower bound on the
    /// smallest curvature eigenvalue.
    pub fn step_gain_for_curvature_bound(sigma_lower: f64) -> f64 {
        1.0 / (8.0 * sigma_lower)
    }

    /// `a_t = gamma / (N + t)`.
    pub fn step_size(&self, t: u64) -> f64 {
        self.step_gain / (self.step_offset + t as f64)
    }

    /// `c_t = gamma' / (N' + t)^(1/4)`.
    pub fn perturbation_size(&self, t: u64) -> f64 {
        self.perturbation_gain / (self.perturbation_offset + t as f64).powf(0.25)
    }

    /// Both gains positive and both offsets non-negative.
    pub fn is_valid(&self) -> bool {
        self.step_gain > 0.0
            && self.perturbation_gain > 0.0
            && self.step_offset >= 0.0
            && self.perturbation_offset >= 0.0
            && self.step_gain.is_finite()
            && self.perturbation_gain.is_finite()
            && self.step_offset.is_finite()
            && self.perturbation_offset.is_finite()
    }
}

/// Distribution of each perturbation coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationLaw {
    /// `+1` or `-1` with equal probability.
    #[default]
    Rademacher,
    /// Uniform on `{-1, -0.5, 0.5, 1}`.
    HalfOrOne,
}

impl PerturbationLaw {
    pub fn draw(self, rng: &mut RngStream) -> f64 {
        match self {
            PerturbationLaw::Rademacher => rng.rademacher(),
            PerturbationLaw::HalfOrOne => {
                let sign = rng.rademacher();
                let mag = if rng.rademacher() > 0.0 { 1.0 } else { 0.5 };
                sign * mag
            }
        }
    }

    /// Almost-sure bound on `|delta_j|`.
    pub fn magnitude_bound(self) -> f64 {
        1.0
    }

    /// `E[1 / delta_j^2]`.
    pub fn inverse_second_moment(self) -> f64 {
        match self {
            PerturbationLaw::Rademacher => 1.0,
            PerturbationLaw::HalfOrOne => 2.5,
        }
    }
}

/// Learner record for a single chain state.
#[derive(Debug, Clone, PartialEq)]
pub struct MspsaState {
    estimate: DVector<f64>,
    /// Perturbation pairs started (`t_i`).
    pairs: u64,
    /// Completed updates.
    updates: u64,
    /// `d_plus` is stashed and the mirrored input is due.
    awaiting_minus: bool,
    delta: DVector<f64>,
    d_plus: f64,
    gains: GainSchedule,
}

impl MspsaState {
    /// Fresh learner starting from `start` (expected inside the feasible box).
    pub fn new(start: DVector<f64>, gains: GainSchedule) -> Self {
        let n = start.len();
        Self {
            estimate: start,
            pairs: 0,
            updates: 0,
            awaiting_minus: false,
            delta: DVector::zeros(n),
            d_plus: 0.0,
            gains,
        }
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    /// `t_i`: perturbation pairs started so far.
    pub fn pairs_started(&self) -> u64 {
        self.pairs
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Phase flag `e_i`.
    pub fn awaiting_minus(&self) -> bool {
        self.awaiting_minus
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn gains(&self) -> &GainSchedule {
        &self.gains
    }

    /// Current perturbation size `c_{t_i}`.
    pub fn perturbation_size(&self) -> f64 {
        self.gains.perturbation_size(self.pairs)
    }

    /// Input for the next visit. When no pair is open, starts one:
    /// increments `t_i` and lets `fill` write the new perturbation.
    pub fn next_input(&mut self, fill: impl FnOnce(&mut DVector<f64>)) -> DVector<f64> {
        if !self.awaiting_minus {
            self.pairs += 1;
            fill(&mut self.delta);
        }
        let c = self.perturbation_size();
        let sign = if self.awaiting_minus { -1.0 } else { 1.0 };
        let mut x = self.delta.clone();
        x *= sign * c;
        x += &self.estimate;
        x
    }

    /// Feed the realized cost of the input returned by the last
    /// [`MspsaState::next_input`]. The second cost of a pair triggers the
    /// projected update.
    pub fn record_cost(&mut self, cost: f64, feasible: &FeasibleBox) -> Result<(), DimensionMismatch> {
        if !self.awaiting_minus {
            self.d_plus = cost;
            self.awaiting_minus = true;
            return Ok(());
        }
        let t = self.pairs;
        let a = self.gains.step_size(t);
        let c = self.gains.perturbation_size(t);
        let scale = a * (self.d_plus - cost) / c;
        for (x, d) in self.estimate.iter_mut().zip(self.delta.iter()) {
            *x -= scale / d;
        }
        feasible.project_in_place(&mut self.estimate)?;
        self.awaiting_minus = false;
        self.updates += 1;
        Ok(())
    }
}

/// MSPSA for either objective. The only objective-specific piece is the
/// realized cost fed back to the learner: `||y - y*||^2` or `-x . y`.
#[derive(Debug, Clone)]
pub struct Mspsa {
    name: String,
    objective: Objective,
    feasible: FeasibleBox,
    start: DVector<f64>,
    gains: GainSchedule,
    law: PerturbationLaw,
    learners: Vec<Option<MspsaState>>,
    state_gains: Vec<Option<GainSchedule>>,
    pending: Option<usize>,
}

impl Mspsa {
    /// `start` is projected onto `feasible` before use.
    pub fn new(
        objective: Objective,
        feasible: FeasibleBox,
        start: DVector<f64>,
        gains: GainSchedule,
        law: PerturbationLaw,
    ) -> Result<Self, DimensionMismatch> {
        let start = feasible.project(&start)?;
        Ok(Self {
            name: "mspsa".into(),
            objective,
            feasible,
            start,
            gains,
            law,
            learners: Vec::new(),
            state_gains: Vec::new(),
            pending: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Override the schedule for one state (applies from its first visit).
    pub fn set_state_gains(&mut self, state: usize, gains: GainSchedule) {
        if self.state_gains.len() <= state {
            self.state_gains.resize(state + 1, None);
        }
        self.state_gains[state] = Some(gains);
    }

    pub fn learner(&self, state: usize) -> Option<&MspsaState> {
        self.learners.get(state).and_then(Option::as_ref)
    }

    fn learner_mut(&mut self, state: usize) -> &mut MspsaState {
        if self.learners.len() <= state {
            self.learners.resize(state + 1, None);
        }
        let gains = self
            .state_gains
            .get(state)
            .copied()
            .flatten()
            .unwrap_or(self.gains);
        let start = &self.start;
        self.learners[state].get_or_insert_with(|| MspsaState::new(start.clone(), gains))
    }
}

impl Policy for Mspsa {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, prev_state: usize, rng: &mut RngStream) -> Result<Decision, PolicyError> {
        if self.pending.is_some() {
            return Err(PolicyError::ActWithoutUpdate);
        }
        self.pending = Some(prev_state);
        let law = self.law;
        let learner = self.learner_mut(prev_state);
        let input = learner.next_input(|delta| {
            for d in delta.iter_mut() {
                *d = law.draw(rng);
            }
        });
        Ok(Decision::new(input))
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<(), PolicyError> {
        let state = self.pending.take().ok_or(PolicyError::UpdateWithoutAct)?;
        let cost = self.objective.realized_cost(obs.input, obs.output);
        let feasible = &self.feasible;
        let learner = self.learners[state]
            .as_mut()
            .expect("learner created by act");
        learner.record_cost(cost, feasible)?;
        Ok(())
    }

    fn snapshot(&self, state: usize) -> Option<EstimateView<'_>> {
        self.learner(state).map(|l| EstimateView {
            estimate: &l.estimate,
            updates: l.updates,
        })
    }
}
