//! Known-model optima, exact stage costs and the exact conditional mean of
//! the simultaneous-perturbation gradient term.
//!
//! With `(theta, P)` known, the per-period problem decouples: given the
//! previous state `i`, the optimal input minimizes a convex quadratic whose
//! coefficients are `p_{i,.}`-mixtures of the per-state parameters.
//!
//! * quadratic regulation: `x*_i = H_i^{-1} sum_j p_ij A_j^T (y* - b_j)`
//!   with `H_i = sum_j p_ij A_j^T A_j`;
//! * revenue maximization: `x*_i = -S_i^{-1} sum_j p_ij b_j`
//!   with `S_i = sum_j p_ij (A_j + A_j^T)`.
//!
//! Everything here is evaluated in closed form; nothing samples.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::model::{FeasibleBox, JumpAffineModel, Objective};

/// Linear solves refuse matrices with a larger 2-norm condition number.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("SingularGram: mixture Gram matrix for state {} has condition number {condition:e}", .state + 1)]
    SingularGram { state: usize, condition: f64 },
    #[error("SingularSymPart: mixture symmetric part for state {} has condition number {condition:e}", .state + 1)]
    SingularSymPart { state: usize, condition: f64 },
    #[error("ZeroPerturbationEntry: perturbation coordinate {} is zero", .coord + 1)]
    ZeroPerturbationEntry { coord: usize },
    #[error("NonPositiveGain: perturbation size must be positive, got {0}")]
    NonPositiveGain(f64),
    #[error("DimensionTooLarge: grid search supports n <= 3, got n = {0}")]
    DimensionTooLarge(usize),
    #[error("quadratic regulation needs a target output")]
    NoTarget,
    #[error("state {} is not a chain state", .0 + 1)]
    UnknownState(usize),
    #[error("DimensionMismatch: expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Solve `lhs x = rhs` through an SVD, refusing ill-conditioned systems.
/// Returns the condition number on failure.
pub fn solve_guarded(lhs: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, f64> {
    let svd = lhs.svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(condition);
    }
    svd.solve(rhs, 0.0).map_err(|_| condition)
}

/// Quadratic-regulation optimum for an arbitrary mixture
/// `(p_j, A_j, b_j)`; `state` only labels errors.
pub fn mixture_optimum_qr<'a, I>(
    terms: I,
    target: &DVector<f64>,
    state: usize,
) -> Result<DVector<f64>, OracleError>
where
    I: IntoIterator<Item = (f64, &'a DMatrix<f64>, &'a DVector<f64>)>,
{
    let mut gram: Option<DMatrix<f64>> = None;
    let mut rhs: Option<DVector<f64>> = None;
    for (p, a, b) in terms {
        if p == 0.0 {
            continue;
        }
        let at = a.transpose();
        let g = (&at * a) * p;
        let r = (&at * (target - b)) * p;
        gram = Some(match gram {
            Some(acc) => acc + g,
            None => g,
        });
        rhs = Some(match rhs {
            Some(acc) => acc + r,
            None => r,
        });
    }
    let (Some(gram), Some(rhs)) = (gram, rhs) else {
        return Err(OracleError::SingularGram {
            state,
            condition: f64::INFINITY,
        });
    };
    solve_guarded(gram, &rhs).map_err(|condition| OracleError::SingularGram { state, condition })
}

/// Revenue-maximization stationary point for a mixture `(p_j, A_j, b_j)`.
pub fn mixture_optimum_rm<'a, I>(terms: I, state: usize) -> Result<DVector<f64>, OracleError>
where
    I: IntoIterator<Item = (f64, &'a DMatrix<f64>, &'a DVector<f64>)>,
{
    let mut sym: Option<DMatrix<f64>> = None;
    let mut rhs: Option<DVector<f64>> = None;
    for (p, a, b) in terms {
        if p == 0.0 {
            continue;
        }
        let s = (a + a.transpose()) * p;
        let r = b * (-p);
        sym = Some(match sym {
            Some(acc) => acc + s,
            None => s,
        });
        rhs = Some(match rhs {
            Some(acc) => acc + r,
            None => r,
        });
    }
    let (Some(sym), Some(rhs)) = (sym, rhs) else {
        return Err(OracleError::SingularSymPart {
            state,
            condition: f64::INFINITY,
        });
    };
    solve_guarded(sym, &rhs).map_err(|condition| OracleError::SingularSymPart { state, condition })
}

fn check_state(model: &JumpAffineModel, i: usize) -> Result<(), OracleError> {
    if i < model.state_count() {
        Ok(())
    } else {
        Err(OracleError::UnknownState(i))
    }
}

fn check_input(model: &JumpAffineModel, x: &DVector<f64>) -> Result<(), OracleError> {
    if x.len() == model.input_dim() {
        Ok(())
    } else {
        Err(OracleError::DimensionMismatch {
            expected: model.input_dim(),
            actual: x.len(),
        })
    }
}

fn mixture<'a>(
    model: &'a JumpAffineModel,
    i: usize,
) -> impl Iterator<Item = (f64, &'a DMatrix<f64>, &'a DVector<f64>)> + 'a {
    model
        .transitions_from(i)
        .map(move |(j, p)| (p, &model.states[j].gain, &model.states[j].offset))
}

fn target_of(model: &JumpAffineModel) -> Result<&DVector<f64>, OracleError> {
    match &model.objective {
        Objective::QuadraticRegulation { target } => Ok(target),
        Objective::RevenueMaximization => Err(OracleError::NoTarget),
    }
}

/// `x*_i` for quadratic regulation using the model's target.
pub fn optimal_input_qr(model: &JumpAffineModel, i: usize) -> Result<DVector<f64>, OracleError> {
    optimal_input_qr_for_target(model, i, target_of(model)?)
}

/// `x*_i` for quadratic regulation against an explicit target.
pub fn optimal_input_qr_for_target(
    model: &JumpAffineModel,
    i: usize,
    target: &DVector<f64>,
) -> Result<DVector<f64>, OracleError> {
    check_state(model, i)?;
    if target.len() != model.output_dim() {
        return Err(OracleError::DimensionMismatch {
            expected: model.output_dim(),
            actual: target.len(),
        });
    }
    mixture_optimum_qr(mixture(model, i), target, i)
}

/// `x*_i` for revenue maximization.
pub fn optimal_input_rm(model: &JumpAffineModel, i: usize) -> Result<DVector<f64>, OracleError> {
    check_state(model, i)?;
    mixture_optimum_rm(mixture(model, i), i)
}

/// `x*_i` for whichever objective the model carries.
pub fn optimal_input(model: &JumpAffineModel, i: usize) -> Result<DVector<f64>, OracleError> {
    match model.objective {
        Objective::QuadraticRegulation { .. } => optimal_input_qr(model, i),
        Objective::RevenueMaximization => optimal_input_rm(model, i),
    }
}

/// Exact expected stage cost `sum_j p_ij (||y* - A_j x - b_j||^2 + Tr Sigma_j)`.
pub fn stage_cost_qr(model: &JumpAffineModel, i: usize, x: &DVector<f64>) -> Result<f64, OracleError> {
    let target = target_of(model)?;
    check_state(model, i)?;
    check_input(model, x)?;
    Ok(model
        .transitions_from(i)
        .map(|(j, p)| {
            let st = &model.states[j];
            p * ((target - st.mean_response(x)).norm_squared() + st.noise_trace())
        })
        .sum())
}

/// Exact expected stage cost `-sum_j p_ij x^T (A_j x + b_j)`.
pub fn stage_cost_rm(model: &JumpAffineModel, i: usize, x: &DVector<f64>) -> Result<f64, OracleError> {
    check_state(model, i)?;
    check_input(model, x)?;
    Ok(-model
        .transitions_from(i)
        .map(|(j, p)| p * x.dot(&model.states[j].mean_response(x)))
        .sum::<f64>())
}

/// Exact expected stage cost for the model's objective.
pub fn stage_cost(model: &JumpAffineModel, i: usize, x: &DVector<f64>) -> Result<f64, OracleError> {
    match model.objective {
        Objective::QuadraticRegulation { .. } => stage_cost_qr(model, i, x),
        Objective::RevenueMaximization => stage_cost_rm(model, i, x),
    }
}

/// `E[((d+ - d-) / c) * inv(delta) | i, x_hat, delta]` under the true model.
///
/// The noise and the next-state draw average out exactly, leaving
/// `4 inv(delta) delta^T H_i (x_hat - x*_i)` for quadratic regulation and
/// `-2 inv(delta) delta^T S_i (x_hat - x*_i)` for revenue maximization.
/// The value does not depend on `c`, which is only checked for sign.
pub fn expected_gradient_term(
    model: &JumpAffineModel,
    i: usize,
    x_hat: &DVector<f64>,
    delta: &DVector<f64>,
    c: f64,
) -> Result<DVector<f64>, OracleError> {
    check_state(model, i)?;
    check_input(model, x_hat)?;
    check_input(model, delta)?;
    if !(c > 0.0) {
        return Err(OracleError::NonPositiveGain(c));
    }
    if let Some(coord) = delta.iter().position(|d| *d == 0.0) {
        return Err(OracleError::ZeroPerturbationEntry { coord });
    }
    let n = model.input_dim();
    let x_star = optimal_input(model, i)?;
    let err = x_hat - &x_star;
    let mut curvature = DMatrix::<f64>::zeros(n, n);
    let scale = match model.objective {
        Objective::QuadraticRegulation { .. } => {
            for (j, p) in model.transitions_from(i) {
                let a = &model.states[j].gain;
                curvature += (a.transpose() * a) * p;
            }
            4.0
        }
        Objective::RevenueMaximization => {
            for (j, p) in model.transitions_from(i) {
                let a = &model.states[j].gain;
                curvature += (a + a.transpose()) * p;
            }
            -2.0
        }
    };
    let projected = delta.dot(&(curvature * err));
    Ok(delta.map(|d| scale * projected / d))
}

/// Known-model optimal inputs for every chain state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalInputs {
    inputs: Vec<DVector<f64>>,
}

impl OptimalInputs {
    pub fn compute(model: &JumpAffineModel) -> Result<Self, OracleError> {
        let inputs = (0..model.state_count())
            .map(|i| optimal_input(model, i))
            .collect::<Result<_, _>>()?;
        Ok(Self { inputs })
    }

    pub fn get(&self, state: usize) -> &DVector<f64> {
        &self.inputs[state]
    }

    pub fn as_slice(&self) -> &[DVector<f64>] {
        &self.inputs
    }
}

/// Zooming grid search for [`brute_force_optimum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Grid points per axis at every level (at least 3).
    pub points_per_axis: usize,
    /// Stop once every axis step is at most this.
    pub target_step: f64,
    /// Half-width of the next level's window, in current steps.
    pub window_steps: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_axis: 21,
            target_step: 1e-4,
            window_steps: 2.0,
        }
    }
}

/// Minimize the exact stage cost over a grid on `feasible`, zooming in on
/// the incumbent until the step is below `grid.target_step`.
///
/// Independent of the closed forms: it only evaluates [`stage_cost_qr`] or
/// [`stage_cost_rm`].
pub fn brute_force_optimum(
    model: &JumpAffineModel,
    i: usize,
    objective: &Objective,
    feasible: &FeasibleBox,
    grid: GridSpec,
) -> Result<DVector<f64>, OracleError> {
    let n = model.input_dim();
    if n > 3 {
        return Err(OracleError::DimensionTooLarge(n));
    }
    if feasible.dim() != n {
        return Err(OracleError::DimensionMismatch {
            expected: n,
            actual: feasible.dim(),
        });
    }
    check_state(model, i)?;
    let cost = |x: &DVector<f64>| -> Result<f64, OracleError> {
        match objective {
            Objective::QuadraticRegulation { target } => {
                let base = model
                    .transitions_from(i)
                    .map(|(j, p)| p * (target - model.states[j].mean_response(x)).norm_squared())
                    .sum::<f64>();
                Ok(base)
            }
            Objective::RevenueMaximization => stage_cost_rm(model, i, x),
        }
    };
    let points = grid.points_per_axis.max(3);
    let mut lo = feasible.lower().clone();
    let mut hi = feasible.upper().clone();
    let mut best = lo.clone();
    loop {
        let step: DVector<f64> = (&hi - &lo) / (points - 1) as f64;
        let mut best_cost = f64::INFINITY;
        let total = points.pow(n as u32);
        let mut x = lo.clone();
        for flat in 0..total {
            let mut rem = flat;
            for axis in 0..n {
                x[axis] = lo[axis] + step[axis] * (rem % points) as f64;
                rem /= points;
            }
            let v = cost(&x)?;
            if v < best_cost {
                best_cost = v;
                best.copy_from(&x);
            }
        }
        if step.amax() <= grid.target_step {
            return Ok(best);
        }
        for axis in 0..n {
            let w = grid.window_steps * step[axis];
            lo[axis] = (best[axis] - w).max(feasible.lower()[axis]);
            hi[axis] = (best[axis] + w).min(feasible.upper()[axis]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineState, MarkovChain};

    fn scalar_states(params: &[(f64, f64)]) -> Vec<AffineState> {
        params
            .iter()
            .map(|&(a, b)| {
                AffineState::noiseless(DMatrix::from_element(1, 1, a), DVector::from_element(1, b))
            })
            .collect()
    }

    fn uniform_chain(k: usize) -> MarkovChain {
        MarkovChain::new(DMatrix::from_element(k, k, 1.0 / k as f64), 0)
    }

    fn qr(target: f64) -> Objective {
        Objective::QuadraticRegulation {
            target: DVector::from_element(1, target),
        }
    }

    /// Golden-section minimization of a scalar function, used as an
    /// independent check of the closed forms.
    fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        while hi - lo > 1e-12 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn scalar_qr_single_state() {
        let model = JumpAffineModel::new(uniform_chain(1), scalar_states(&[(2.0, 1.0)]), qr(5.0));
        let x = optimal_input_qr(&model, 0).unwrap()[0];
        let oracle = golden_section(
            |v| stage_cost_qr(&model, 0, &DVector::from_element(1, v)).unwrap(),
            -10.0,
            10.0,
        );
        assert!((oracle - 2.0).abs() < 1e-6);
        assert!((x - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_qr_two_state_mixture() {
        let model = JumpAffineModel::new(
            uniform_chain(2),
            scalar_states(&[(1.0, 0.0), (3.0, 0.0)]),
            qr(3.0),
        );
        let oracle = golden_section(
            |v| stage_cost_qr(&model, 0, &DVector::from_element(1, v)).unwrap(),
            -10.0,
            10.0,
        );
        assert!((oracle - 1.2).abs() < 1e-6);
        assert!((optimal_input_qr(&model, 0).unwrap()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn qr_zero_error_fixed_point() {
        let model = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.9, 0.1]), 0),
            scalar_states(&[(1.5, 2.0), (-0.5, 2.0)]),
            qr(2.0),
        );
        for i in 0..2 {
            assert!(optimal_input_qr(&model, i).unwrap()[0].abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_revenue_optima() {
        let one = JumpAffineModel::new(
            uniform_chain(1),
            scalar_states(&[(-1.0, 1.0)]),
            Objective::RevenueMaximization,
        );
        assert!((optimal_input_rm(&one, 0).unwrap()[0] - 0.5).abs() < 1e-12);
        let x = DVector::from_element(1, 0.5);
        assert!((stage_cost_rm(&one, 0, &x).unwrap() + 0.25).abs() < 1e-15);
        assert_eq!(stage_cost_rm(&one, 0, &DVector::zeros(1)).unwrap(), 0.0);

        let two = JumpAffineModel::new(
            uniform_chain(2),
            scalar_states(&[(-1.0, 1.0), (-2.0, 2.0)]),
            Objective::RevenueMaximization,
        );
        let oracle = golden_section(
            |v| stage_cost_rm(&two, 0, &DVector::from_element(1, v)).unwrap(),
            -10.0,
            10.0,
        );
        assert!((oracle - 0.5).abs() < 1e-6);
        assert!((optimal_input_rm(&two, 0).unwrap()[0] - 0.5).abs() < 1e-12);

        let zero = JumpAffineModel::new(
            uniform_chain(2),
            scalar_states(&[(-1.0, 0.0), (-3.0, 0.0)]),
            Objective::RevenueMaximization,
        );
        assert_eq!(optimal_input_rm(&zero, 1).unwrap()[0], 0.0);
    }

    #[test]
    fn qr_cost_floor_is_noise_trace() {
        let mut st = AffineState::noiseless(DMatrix::identity(2, 2), DVector::zeros(2));
        let model = JumpAffineModel::new(
            uniform_chain(1),
            vec![st.clone()],
            Objective::QuadraticRegulation {
                target: DVector::from_row_slice(&[1.0, -1.0]),
            },
        );
        let x = optimal_input_qr(&model, 0).unwrap();
        assert!(stage_cost_qr(&model, 0, &x).unwrap().abs() < 1e-24);

        st.noise_sigma = DVector::from_element(2, 0.5);
        let noisy = JumpAffineModel::new(uniform_chain(1), vec![st], model.objective.clone());
        assert!((stage_cost_qr(&noisy, 0, &x).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn singular_gram_rejected() {
        let model = JumpAffineModel::new(
            uniform_chain(1),
            vec![AffineState::noiseless(DMatrix::zeros(2, 2), DVector::zeros(2))],
            Objective::QuadraticRegulation {
                target: DVector::zeros(2),
            },
        );
        assert!(matches!(
            optimal_input_qr(&model, 0),
            Err(OracleError::SingularGram { state: 0, .. })
        ));
        let rm = JumpAffineModel::new(model.chain.clone(), model.states.clone(), Objective::RevenueMaximization);
        assert!(matches!(
            optimal_input_rm(&rm, 0),
            Err(OracleError::SingularSymPart { state: 0, .. })
        ));
    }

    #[test]
    fn gradient_term_examples() {
        let model = JumpAffineModel::new(uniform_chain(1), scalar_states(&[(1.0, 0.0)]), qr(0.0));
        for &(x, d) in &[(0.7, 1.0), (-2.0, -1.0), (3.5, 1.0)] {
            let g = expected_gradient_term(
                &model,
                0,
                &DVector::from_element(1, x),
                &DVector::from_element(1, d),
                0.37,
            )
            .unwrap();
            assert_eq!(g[0], 4.0 * x);
        }
        let x_star = optimal_input_qr(&model, 0).unwrap();
        let g = expected_gradient_term(&model, 0, &x_star, &DVector::from_element(1, 1.0), 1.0).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(
            expected_gradient_term(&model, 0, &x_star, &DVector::zeros(1), 1.0),
            Err(OracleError::ZeroPerturbationEntry { coord: 0 })
        );
    }

    #[test]
    fn brute_force_matches_known_scalars() {
        let model = JumpAffineModel::new(
            uniform_chain(2),
            scalar_states(&[(1.0, 0.0), (3.0, 0.0)]),
            qr(3.0),
        );
        let feasible = FeasibleBox::cube(1, -5.0, 5.0).unwrap();
        let coarse = brute_force_optimum(&model, 0, &model.objective, &feasible, GridSpec::default()).unwrap();
        assert!((coarse[0] - 1.2).abs() < 1e-3);
        let fine = brute_force_optimum(
            &model,
            0,
            &model.objective,
            &feasible,
            GridSpec {
                target_step: 5e-5,
                ..GridSpec::default()
            },
        )
        .unwrap();
        assert!((coarse[0] - fine[0]).abs() < 1e-4);

        let rm = JumpAffineModel::new(
            uniform_chain(1),
            scalar_states(&[(-1.0, 1.0)]),
            Objective::RevenueMaximization,
        );
        let feasible = FeasibleBox::cube(1, 0.0, 2.0).unwrap();
        let best = brute_force_optimum(&rm, 0, &rm.objective, &feasible, GridSpec::default()).unwrap();
        assert!((best[0] - 0.5).abs() < 1e-3);
        let f = |v: f64| stage_cost_rm(&rm, 0, &DVector::from_element(1, v)).unwrap();
        assert!(f(best[0]) <= f(best[0] - 1e-4) && f(best[0]) <= f(best[0] + 1e-4));
    }

    #[test]
    fn brute_force_refuses_large_dimension() {
        let model = JumpAffineModel::new(
            uniform_chain(1),
            vec![AffineState::noiseless(DMatrix::identity(4, 4), DVector::zeros(4))],
            Objective::QuadraticRegulation {
                target: DVector::zeros(4),
            },
        );
        let feasible = FeasibleBox::cube(4, 0.0, 1.0).unwrap();
        assert_eq!(
            brute_force_optimum(&model, 0, &model.objective, &feasible, GridSpec::default()),
            Err(OracleError::DimensionTooLarge(4))
        );
    }
}
