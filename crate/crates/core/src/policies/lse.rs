//! Greedy least-squares (certainty-equivalence) baseline.
//!
//! Per realized state `k` it regresses `y` on `(1, x)` to estimate
//! `(A_k, b_k)`, estimates the transition row of the previous state from
//! add-one-smoothed empirical counts, and plays the projected known-model
//! optimum for those estimates as if they were exact.
//!
//! Until every state seen so far has a full-rank design it cycles through
//! the configured initial input and its `+-5%` coordinate perturbations:
//! `x0, x0 (1 + 0.05 e_1), x0 (1 - 0.05 e_1), x0 (1 + 0.05 e_2), ...`.
//! A zero coordinate is moved by `+-0.05` instead of being scaled.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{Decision, EstimateView, Observation, Policy, PolicyError};
use crate::model::{FeasibleBox, Objective};
use crate::oracle::{mixture_optimum_qr, mixture_optimum_rm};
use crate::simulate::RngStream;

/// Relative size of the initialization perturbations.
pub const INIT_PERTURBATION: f64 = 0.05;

/// Fitted gains with smallest singular value below this (scaled by
/// `1 + max |b_hat|`) are treated as zero.
const GAIN_FLOOR: f64 = 1e-8;

/// Smallest-to-largest eigenvalue ratio below which a design is treated as
/// rank deficient.
const DESIGN_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Regression {
    /// `sum z z^T` with `z = (1, x)`.
    gram: DMatrix<f64>,
    /// `sum z y^T`.
    cross: DMatrix<f64>,
    full_rank: bool,
    stale: bool,
    gain: DMatrix<f64>,
    offset: DVector<f64>,
}

impl Regression {
    fn new(n: usize, m: usize) -> Self {
        Self {
            gram: DMatrix::zeros(n + 1, n + 1),
            cross: DMatrix::zeros(n + 1, m),
            full_rank: false,
            stale: true,
            gain: DMatrix::zeros(m, n),
            offset: DVector::zeros(m),
        }
    }

    fn add(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        let n = x.len();
        let z = |i: usize| if i == 0 { 1.0 } else { x[i - 1] };
        for r in 0..=n {
            let zr = z(r);
            for c in 0..=n {
                self.gram[(r, c)] += zr * z(c);
            }
            for (c, yc) in y.iter().enumerate() {
                self.cross[(r, c)] += zr * yc;
            }
        }
        self.stale = true;
        if !self.full_rank {
            let eig = SymmetricEigen::new(self.gram.clone()).eigenvalues;
            let max = eig.max();
            self.full_rank = max > 0.0 && eig.min() > DESIGN_RANK_TOL * max;
        }
    }

    /// Refresh `(A_hat, b_hat)` from the normal equations.
    fn refit(&mut self) -> bool {
        if !self.stale {
            return true;
        }
        let theta = match self.gram.clone().cholesky() {
            Some(ch) => ch.solve(&self.cross),
            None => match self.gram.clone().svd(true, true).solve(&self.cross, 0.0) {
                Ok(t) => t,
                Err(_) => return false,
            },
        };
        let n = self.gram.nrows() - 1;
        for (c, mut col) in self.gain.column_iter_mut().enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = theta[(c + 1, r)];
            }
            debug_assert!(c < n);
        }
        for (r, v) in self.offset.iter_mut().enumerate() {
            *v = theta[(0, r)];
        }
        self.stale = false;
        true
    }
}

/// Certainty-equivalence policy with per-state regressions.
#[derive(Debug, Clone)]
pub struct GreedyLse {
    name: String,
    objective: Objective,
    feasible: FeasibleBox,
    initial_input: DVector<f64>,
    regressions: Vec<Option<Regression>>,
    transitions: Vec<Vec<u64>>,
    init_cursor: usize,
    last_input: DVector<f64>,
    estimates: Vec<Option<(DVector<f64>, u64)>>,
    pending: Option<usize>,
    output_dim: Option<usize>,
}

impl GreedyLse {
    pub fn new(objective: Objective, feasible: FeasibleBox, initial_input: DVector<f64>) -> Self {
        Self {
            name: "greedy_lse".into(),
            objective,
            feasible,
            last_input: initial_input.clone(),
            initial_input,
            regressions: Vec::new(),
            transitions: Vec::new(),
            init_cursor: 0,
            estimates: Vec::new(),
            pending: None,
            output_dim: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Still collecting the perturbed initialization samples.
    pub fn initializing(&self) -> bool {
        let mut any = false;
        for reg in self.regressions.iter().flatten() {
            any = true;
            if !reg.full_rank {
                return true;
            }
        }
        !any
    }

    /// Current `(A_hat, b_hat)` for `state`, if its design has full rank.
    pub fn parameter_estimate(&mut self, state: usize) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        let reg = self.regressions.get_mut(state)?.as_mut()?;
        if !reg.full_rank || !reg.refit() {
            return None;
        }
        Some((&reg.gain, &reg.offset))
    }

    /// Smoothed transition estimate from `from` over the states with a
    /// regression, as `(state, probability)` pairs.
    pub fn transition_estimate(&self, from: usize) -> Vec<(usize, f64)> {
        let known: Vec<usize> = self
            .regressions
            .iter()
            .enumerate()
            .filter_map(|(k, r)| r.as_ref().map(|_| k))
            .collect();
        let row = self.transitions.get(from);
        let count = |j: usize| row.and_then(|r| r.get(j)).copied().unwrap_or(0) as f64 + 1.0;
        let total: f64 = known.iter().map(|&j| count(j)).sum();
        known.into_iter().map(|j| (j, count(j) / total)).collect()
    }

    fn init_input(&self, cursor: usize) -> DVector<f64> {
        let n = self.initial_input.len();
        let mut x = self.initial_input.clone();
        let slot = cursor % (2 * n + 1);
        if slot > 0 {
            let k = slot - 1;
            let coord = k / 2;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let v = x[coord];
            x[coord] = if v == 0.0 {
                sign * INIT_PERTURBATION
            } else {
                v * (1.0 + sign * INIT_PERTURBATION)
            };
        }
        x
    }

    fn certainty_equivalent(&mut self, prev: usize) -> Option<DVector<f64>> {
        for reg in self.regressions.iter_mut().flatten() {
            if !reg.refit() {
                return None;
            }
        }
        // A fitted gain that is numerically zero makes the plug-in problem
        // flat, which the relative condition guard alone cannot see.
        for reg in self.regressions.iter().flatten() {
            let floor = GAIN_FLOOR * (1.0 + reg.offset.amax());
            if reg.gain.singular_values().min() <= floor {
                return None;
            }
        }
        let probs = self.transition_estimate(prev);
        let terms = probs.iter().map(|&(j, p)| {
            let reg = self.regressions[j].as_ref().expect("known state");
            (p, &reg.gain, &reg.offset)
        });
        let raw = match &self.objective {
            Objective::QuadraticRegulation { target } => mixture_optimum_qr(terms, target, prev),
            Objective::RevenueMaximization => mixture_optimum_rm(terms, prev),
        };
        let mut x = raw.ok()?;
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        self.feasible.project_in_place(&mut x).ok()?;
        Some(x)
    }
}

impl Policy for GreedyLse {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, prev_state: usize, _rng: &mut RngStream) -> Result<Decision, PolicyError> {
        if self.pending.is_some() {
            return Err(PolicyError::ActWithoutUpdate);
        }
        self.pending = Some(prev_state);
        let decision = if self.initializing() {
            let x = self.init_input(self.init_cursor);
            self.init_cursor += 1;
            Decision::new(x)
        } else {
            match self.certainty_equivalent(prev_state) {
                Some(x) => {
                    if self.estimates.len() <= prev_state {
                        self.estimates.resize(prev_state + 1, None);
                    }
                    let revisions = self.estimates[prev_state].as_ref().map_or(0, |e| e.1) + 1;
                    self.estimates[prev_state] = Some((x.clone(), revisions));
                    Decision::new(x)
                }
                None => Decision {
                    input: self.last_input.clone(),
                    fallback: true,
                },
            }
        };
        self.last_input.copy_from(&decision.input);
        Ok(decision)
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<(), PolicyError> {
        let prev = self.pending.take().ok_or(PolicyError::UpdateWithoutAct)?;
        let n = obs.input.len();
        let m = *self.output_dim.get_or_insert(obs.output.len());
        if self.regressions.len() <= obs.state {
            self.regressions.resize(obs.state + 1, None);
        }
        self.regressions[obs.state]
            .get_or_insert_with(|| Regression::new(n, m))
            .add(obs.input, obs.output);
        if self.transitions.len() <= prev {
            self.transitions.resize(prev + 1, Vec::new());
        }
        let row = &mut self.transitions[prev];
        if row.len() <= obs.state {
            row.resize(obs.state + 1, 0);
        }
        row[obs.state] += 1;
        Ok(())
    }

    fn snapshot(&self, state: usize) -> Option<EstimateView<'_>> {
        self.estimates
            .get(state)
            .and_then(Option::as_ref)
            .map(|(estimate, updates)| EstimateView {
                estimate,
                updates: *updates,
            })
    }
}
