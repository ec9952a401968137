#![allow(dead_code)]

use mjspsa::model::{AffineState, FeasibleBox, JumpAffineModel, MarkovChain, Objective};
use mjspsa::oracle::OptimalInputs;
use mjspsa::simulate::RngStream;
use nalgebra::{DMatrix, DVector};

pub const BOX_HALF_WIDTH: f64 = 5.0;

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

pub fn stochastic_matrix(k: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(k, k, |_, _| 0.05 + rng.uniform());
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

fn condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    sv.max() / sv.min()
}

/// Well-conditioned gain, tall or square.
fn regulation_gain(m: usize, n: usize, rng: &mut RngStream) -> DMatrix<f64> {
    loop {
        let a = gaussian_matrix(m, n, rng);
        if condition(&a) < 10.0 {
            return a;
        }
    }
}

/// Square gain whose symmetric part is negative definite, with a skew part.
fn revenue_gain(n: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let b = gaussian_matrix(n, n, rng) / (n as f64).sqrt();
    let c = gaussian_matrix(n, n, rng) * 0.3;
    -(&b * b.transpose() + DMatrix::identity(n, n) * 0.3) + (&c - c.transpose())
}

/// A validated random instance with `n <= 3` whose unconstrained optima lie
/// inside `[-4, 4]^n`, together with the box `[-5, 5]^n`.
pub fn random_instance(rng: &mut RngStream, revenue: bool) -> (JumpAffineModel, FeasibleBox) {
    loop {
        let k = 1 + (rng.uniform() * 3.0) as usize;
        let n = 1 + (rng.uniform() * 3.0) as usize;
        let m = if revenue { n } else { n + (rng.uniform() * 2.0) as usize };
        let chain = MarkovChain::new(stochastic_matrix(k, rng), 0);
        let states = (0..k)
            .map(|_| {
                let a = if revenue {
                    revenue_gain(n, rng)
                } else {
                    regulation_gain(m, n, rng)
                };
                let b = DVector::from_fn(m, |_, _| rng.standard_normal());
                let sigma = DVector::from_fn(m, |_, _| 0.5 * rng.uniform());
                AffineState::new(a, b, sigma)
            })
            .collect();
        let objective = if revenue {
            Objective::RevenueMaximization
        } else {
            Objective::QuadraticRegulation {
                target: DVector::from_fn(m, |_, _| 2.0 * rng.standard_normal()),
            }
        };
        let feasible = FeasibleBox::cube(n, -BOX_HALF_WIDTH, BOX_HALF_WIDTH).unwrap();
        let Ok(model) = JumpAffineModel::new(chain, states, objective).validate(&feasible, 1e-9) else {
            continue;
        };
        let Ok(opt) = OptimalInputs::compute(&model) else {
            continue;
        };
        if opt.as_slice().iter().all(|x| x.amax() <= BOX_HALF_WIDTH - 1.0) {
            return (model, feasible);
        }
    }
}

/// Relative first-order residual of `x` as a minimizer of the expected
/// stage cost for `prev`.
pub fn foc_residual(model: &JumpAffineModel, prev: usize, x: &DVector<f64>) -> f64 {
    let n = model.input_dim();
    let mut curvature = DMatrix::<f64>::zeros(n, n);
    let mut linear = DVector::<f64>::zeros(n);
    for (j, p) in model.transitions_from(prev) {
        let st = &model.states[j];
        match &model.objective {
            Objective::QuadraticRegulation { target } => {
                curvature += st.gain.transpose() * &st.gain * p;
                linear += st.gain.transpose() * (target - &st.offset) * p;
            }
            Objective::RevenueMaximization => {
                curvature += (&st.gain + st.gain.transpose()) * p;
                linear -= &st.offset * p;
            }
        }
    }
    let residual = &curvature * x - &linear;
    residual.norm() / (curvature.norm() * x.norm() + linear.norm()).max(f64::MIN_POSITIVE)
}
