//! Online learning and control of Markov jump affine systems.
//!
//! A hidden finite-state Markov chain selects, each period, which affine map
//! `y = A_k x + b_k + noise` turns the decision maker's input into an
//! observed output. The decision maker sees the previous state before acting
//! and wants to minimize either a quadratic tracking cost or negative
//! revenue without knowing the parameters.
//!
//! * [`model`]: systems, feasible boxes and validation.
//! * [`simulate`]: seeded random streams and the closed decision loop.
//! * [`oracle`]: known-model optima and exact expected costs.
//! * [`policies`]: MSPSA, greedy least squares and reference policies.
//! * [`metrics`]: regret, estimation error and their Monte Carlo means.
//! * [`harness`]: TOML experiments and their output files.
//!
//! ```
//! use mjspsa::model::{AffineState, FeasibleBox, JumpAffineModel, MarkovChain, Objective};
//! use mjspsa::oracle::OptimalInputs;
//! use mjspsa::policies::{GainSchedule, Mspsa, PerturbationLaw};
//! use mjspsa::simulate::{run_episode, RngStream};
//! use nalgebra::{DMatrix, DVector};
//!
//! let model = JumpAffineModel::new(
//!     MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
//!     vec![AffineState::new(
//!         DMatrix::from_element(1, 1, -1.0),
//!         DVector::from_element(1, 1.0),
//!         DVector::from_element(1, 0.3),
//!     )],
//!     Objective::RevenueMaximization,
//! );
//! let feasible = FeasibleBox::cube(1, 0.0, 2.0).unwrap();
//! let optimal = OptimalInputs::compute(&model).unwrap();
//! assert_eq!(optimal.get(0)[0], 0.5);
//!
//! let mut policy = Mspsa::new(
//!     model.objective.clone(),
//!     feasible,
//!     DVector::from_element(1, 1.5),
//!     GainSchedule::new(0.5, 10.0, 0.5, 0.0),
//!     PerturbationLaw::Rademacher,
//! )
//! .unwrap();
//! let mut rng = RngStream::new(7, 0);
//! let run = run_episode(&model, Some(&optimal), &mut policy, 20_000, &mut rng).unwrap();
//! let last = &run.final_estimates[0];
//! assert!((last.estimate[0] - 0.5).abs() < 0.1);
//! ```

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub use nalgebra;

pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod policies;
pub mod simulate;

// The guide's chapters, compiled as doc tests so their snippets stay in sync
// with the code.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/optimum.md")]
    pub mod optimum {}
    #[doc = include_str!("../../../book/src/mspsa.md")]
    pub mod mspsa {}
    #[doc = include_str!("../../../book/src/greedy_lse.md")]
    pub mod greedy_lse {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
    #[doc = include_str!("../../../book/src/config.md")]
    pub mod config {}
}
