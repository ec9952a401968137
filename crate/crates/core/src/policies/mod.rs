//! Decision rules mapping the observed history to the next input.
//!
//! A [`Policy`] is driven by [`crate::simulate::Episode`] in strict
//! `act` / `update` alternation: `act` sees only the previous chain state,
//! `update` then reveals the realized state, the input that was played and
//! the output it produced.

mod lse;
mod mspsa;

use nalgebra::DVector;

use crate::model::DimensionMismatch;
use crate::oracle::{OptimalInputs, OracleError};
use crate::simulate::RngStream;

pub use lse::{GreedyLse, INIT_PERTURBATION};
pub use mspsa::{GainSchedule, Mspsa, MspsaState, PerturbationLaw};

/// Input chosen for the coming period.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub input: DVector<f64>,
    /// The policy could not form its intended input and repeated the last one.
    pub fallback: bool,
}

impl Decision {
    pub fn new(input: DVector<f64>) -> Self {
        Self {
            input,
            fallback: false,
        }
    }
}

/// What the decision maker learns at the end of a period.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub prev_state: usize,
    pub state: usize,
    pub input: &'a DVector<f64>,
    pub output: &'a DVector<f64>,
}

/// A policy's current estimate of the optimal input for one state.
#[derive(Debug, Clone, Copy)]
pub struct EstimateView<'a> {
    pub estimate: &'a DVector<f64>,
    /// Completed revisions of this estimate.
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("act called twice without an intervening update")]
    ActWithoutUpdate,
    #[error("update called without a preceding act")]
    UpdateWithoutAct,
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub trait Policy: Send {
    /// Short identifier used in file names and summaries.
    fn name(&self) -> &str;

    /// Choose `x_t` after observing `s_{t-1} = prev_state`.
    fn act(&mut self, prev_state: usize, rng: &mut RngStream) -> Result<Decision, PolicyError>;

    /// Absorb the outcome of the most recent `act`.
    fn update(&mut self, obs: &Observation<'_>) -> Result<(), PolicyError>;

    /// Current optimal-input estimate for `state`, if the policy keeps one.
    fn snapshot(&self, state: usize) -> Option<EstimateView<'_>>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn act(&mut self, prev_state: usize, rng: &mut RngStream) -> Result<Decision, PolicyError> {
        (**self).act(prev_state, rng)
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<(), PolicyError> {
        (**self).update(obs)
    }

    fn snapshot(&self, state: usize) -> Option<EstimateView<'_>> {
        (**self).snapshot(state)
    }
}

/// Plays the known-model optimum `x*_{s_{t-1}}`. Only meaningful inside a
/// simulation, where the true model is available.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    optimal: OptimalInputs,
    acted: bool,
}

impl OraclePolicy {
    pub fn new(optimal: OptimalInputs) -> Self {
        Self {
            optimal,
            acted: false,
        }
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn act(&mut self, prev_state: usize, _rng: &mut RngStream) -> Result<Decision, PolicyError> {
        if std::mem::replace(&mut self.acted, true) {
            return Err(PolicyError::ActWithoutUpdate);
        }
        Ok(Decision::new(self.optimal.get(prev_state).clone()))
    }

    fn update(&mut self, _obs: &Observation<'_>) -> Result<(), PolicyError> {
        if !std::mem::replace(&mut self.acted, false) {
            return Err(PolicyError::UpdateWithoutAct);
        }
        Ok(())
    }

    fn snapshot(&self, state: usize) -> Option<EstimateView<'_>> {
        self.optimal.as_slice().get(state).map(|estimate| EstimateView {
            estimate,
            updates: 0,
        })
    }
}

/// Plays the same input forever.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    input: DVector<f64>,
}

impl ConstantPolicy {
    pub fn new(input: DVector<f64>) -> Self {
        Self { input }
    }
}

impl Policy for ConstantPolicy {
    fn name(&self) -> &str {
        "constant"
    }

    fn act(&mut self, _prev_state: usize, _rng: &mut RngStream) -> Result<Decision, PolicyError> {
        Ok(Decision::new(self.input.clone()))
    }

    fn update(&mut self, _obs: &Observation<'_>) -> Result<(), PolicyError> {
        Ok(())
    }

    fn snapshot(&self, _state: usize) -> Option<EstimateView<'_>> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineState, JumpAffineModel, MarkovChain, Objective};
    use crate::oracle::optimal_input;
    use crate::simulate::run_episode;
    use nalgebra::DMatrix;

    #[test]
    fn oracle_policy_delegates_to_closed_form() {
        let model = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_row_slice(2, 2, &[0.2, 0.8, 0.6, 0.4]), 1),
            vec![
                AffineState::noiseless(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, 1.0)),
                AffineState::noiseless(DMatrix::from_element(1, 1, -2.0), DVector::from_element(1, 3.0)),
            ],
            Objective::RevenueMaximization,
        );
        let optimal = OptimalInputs::compute(&model).unwrap();
        let mut policy = OraclePolicy::new(optimal.clone());
        let mut rng = RngStream::new(0, 0);
        for prev in 0..2 {
            let d = policy.act(prev, &mut rng).unwrap();
            assert_eq!(d.input, optimal_input(&model, prev).unwrap());
            let y = DVector::zeros(1);
            policy
                .update(&Observation {
                    prev_state: prev,
                    state: 0,
                    input: &d.input,
                    output: &y,
                })
                .unwrap();
        }
    }

    #[test]
    fn oracle_policy_scalar_revenue_peak() {
        let model = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
            vec![AffineState::new(
                DMatrix::from_element(1, 1, -1.0),
                DVector::from_element(1, 1.0),
                DVector::from_element(1, 0.3),
            )],
            Objective::RevenueMaximization,
        );
        let optimal = OptimalInputs::compute(&model).unwrap();
        let mut policy = OraclePolicy::new(optimal.clone());
        let mut rng = RngStream::new(4, 0);
        let traj = run_episode(&model, Some(&optimal), &mut policy, 50, &mut rng).unwrap();
        assert!(traj.records.iter().all(|r| r.input[0] == 0.5 && r.stage_regret == Some(0.0)));
    }

    #[test]
    fn oracle_policy_noiseless_regulation_costs_nothing() {
        let model = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
            vec![AffineState::noiseless(
                DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 1.0]),
                DVector::from_row_slice(&[1.0, -1.0]),
            )],
            Objective::QuadraticRegulation {
                target: DVector::from_row_slice(&[3.0, 2.0]),
            },
        );
        let optimal = OptimalInputs::compute(&model).unwrap();
        let mut policy = OraclePolicy::new(optimal.clone());
        let mut rng = RngStream::new(4, 0);
        let traj = run_episode(&model, Some(&optimal), &mut policy, 20, &mut rng).unwrap();
        assert!(traj.records.iter().all(|r| r.stage_cost < 1e-20));
        assert!(traj.records.iter().all(|r| r.stage_regret.unwrap() < 1e-20));
    }

    #[test]
    fn oracle_policy_enforces_alternation() {
        let model = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
            vec![AffineState::noiseless(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1))],
            Objective::RevenueMaximization,
        );
        let mut policy = OraclePolicy::new(OptimalInputs::compute(&model).unwrap());
        let mut rng = RngStream::new(0, 0);
        let x = DVector::zeros(1);
        let obs = Observation {
            prev_state: 0,
            state: 0,
            input: &x,
            output: &x,
        };
        assert_eq!(policy.update(&obs), Err(PolicyError::UpdateWithoutAct));
        policy.act(0, &mut rng).unwrap();
        assert_eq!(policy.act(0, &mut rng), Err(PolicyError::ActWithoutUpdate));
    }
}
