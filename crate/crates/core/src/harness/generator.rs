//! Random instances with prescribed curvature and an interior optimum.
//!
//! Each `A_k = Q diag(lambda) Q^T` with `lambda` drawn uniformly from the
//! eigenvalue interval and `Q` a random orthogonal matrix. Offsets are set
//! so that state `k` alone would be optimized at an anchor `a_k` near a
//! common centre; the mixture optimum of every state is then a weighted
//! blend of anchors. Draws are repeated until every mixture optimum clears
//! the box walls by `margin` (a fraction of each side length).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::ObjectiveKind;
use crate::model::{AffineState, FeasibleBox, JumpAffineModel, MarkovChain, Objective};
use crate::oracle::OptimalInputs;
use crate::simulate::RngStream;

const MAX_ATTEMPTS: usize = 1000;

fn default_spread() -> f64 {
    0.1
}

fn default_margin() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Input and output dimension.
    pub dim: usize,
    /// `[lo, hi]` with `lo <= hi < 0`.
    pub eigenvalues: [f64; 2],
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the anchor cloud, as a fraction of each side length.
    #[serde(default = "default_spread")]
    pub anchor_spread: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeneratorError {
    #[error("dim must be at least 1")]
    ZeroDim,
    #[error("eigenvalue interval must satisfy lo <= hi < 0")]
    BadInterval,
    #[error("noise_sigma, anchor_spread and margin must be finite and non-negative")]
    BadScale,
    #[error("box has {found} coordinates, generator dim is {expected}")]
    BoxDim { expected: usize, found: usize },
    #[error("no draw with an interior optimum after {0} attempts")]
    Exhausted(usize),
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Symmetric matrix with spectrum drawn uniformly from `[lo, hi]`.
pub fn random_symmetric(n: usize, lo: f64, hi: f64, rng: &mut RngStream) -> DMatrix<f64> {
    let q = random_orthogonal(n, rng);
    let lambda = DVector::from_fn(n, |_, _| lo + (hi - lo) * rng.uniform());
    let a = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    (&a + a.transpose()) * 0.5
}

/// Draw the states of a model on `chain`.
pub fn generate_states(
    spec: &GeneratorSpec,
    chain: &MarkovChain,
    objective: ObjectiveKind,
    target: Option<&DVector<f64>>,
    feasible: &FeasibleBox,
) -> Result<Vec<AffineState>, GeneratorError> {
    let n = spec.dim;
    let [lo, hi] = spec.eigenvalues;
    if n == 0 {
        return Err(GeneratorError::ZeroDim);
    }
    if !(lo <= hi && hi < 0.0 && lo.is_finite()) {
        return Err(GeneratorError::BadInterval);
    }
    let scales = [spec.noise_sigma, spec.anchor_spread, spec.margin];
    if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(GeneratorError::BadScale);
    }
    if feasible.dim() != n {
        return Err(GeneratorError::BoxDim {
            expected: n,
            found: feasible.dim(),
        });
    }
    let width = feasible.upper() - feasible.lower();
    let target = target.cloned().unwrap_or_else(|| DVector::zeros(n));
    let k = chain.len();
    let mut rng = RngStream::new(spec.seed, 0);

    for _ in 0..MAX_ATTEMPTS {
        let centre = DVector::from_fn(n, |j, _| {
            feasible.lower()[j] + width[j] * (0.25 + 0.5 * rng.uniform())
        });
        let states: Vec<AffineState> = (0..k)
            .map(|_| {
                let a = random_symmetric(n, lo, hi, &mut rng);
                let anchor = DVector::from_fn(n, |j, _| {
                    centre[j] + spec.anchor_spread * width[j] * (2.0 * rng.uniform() - 1.0)
                });
                let b = match objective {
                    ObjectiveKind::Quadratic => &target - &a * &anchor,
                    ObjectiveKind::Revenue => -((&a + a.transpose()) * &anchor),
                };
                AffineState::new(a, b, DVector::from_element(n, spec.noise_sigma))
            })
            .collect();
        let obj = match objective {
            ObjectiveKind::Quadratic => Objective::QuadraticRegulation {
                target: target.clone(),
            },
            ObjectiveKind::Revenue => Objective::RevenueMaximization,
        };
        let model = JumpAffineModel::new(chain.clone(), states, obj);
        let Ok(optimal) = OptimalInputs::compute(&model) else {
            continue;
        };
        let clear = optimal.as_slice().iter().all(|x| {
            (0..n).all(|j| {
                let m = spec.margin * width[j];
                x[j] >= feasible.lower()[j] + m && x[j] <= feasible.upper()[j] - m
            })
        });
        if clear {
            return Ok(model.states);
        }
    }
    Err(GeneratorError::Exhausted(MAX_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::max_symmetric_eigenvalue;

    fn spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            dim: 3,
            eigenvalues: [-1.5, -0.5],
            noise_sigma: 0.5,
            seed,
            anchor_spread: 0.1,
            margin: 0.05,
        }
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = RngStream::new(3, 0);
        let q = random_orthogonal(5, &mut rng);
        let err = (q.transpose() * &q - DMatrix::identity(5, 5)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn spectrum_and_optimum_as_requested() {
        let chain = MarkovChain::new(DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]), 0);
        let feasible = FeasibleBox::cube(3, 1.0, 4.0).unwrap();
        for seed in 0..5 {
            let states =
                generate_states(&spec(seed), &chain, ObjectiveKind::Revenue, None, &feasible).unwrap();
            for s in &states {
                let eig = s.gain.clone().symmetric_eigen().eigenvalues;
                assert!(eig.iter().all(|&l| (-1.5 - 1e-12..=-0.5 + 1e-12).contains(&l)));
                assert!(max_symmetric_eigenvalue(&s.gain) < 0.0);
            }
            let model = JumpAffineModel::new(chain.clone(), states, Objective::RevenueMaximization);
            let opt = OptimalInputs::compute(&model).unwrap();
            assert!(opt.as_slice().iter().all(|x| feasible.interior_margin(x) >= 0.15 - 1e-12));
        }
    }

    #[test]
    fn same_seed_same_states() {
        let chain = MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0);
        let feasible = FeasibleBox::cube(3, 1.0, 4.0).unwrap();
        let target = DVector::from_element(3, 5.0);
        let a = generate_states(&spec(9), &chain, ObjectiveKind::Quadratic, Some(&target), &feasible);
        let b = generate_states(&spec(9), &chain, ObjectiveKind::Quadratic, Some(&target), &feasible);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_interval() {
        let chain = MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0);
        let feasible = FeasibleBox::cube(3, 1.0, 4.0).unwrap();
        let mut s = spec(0);
        s.eigenvalues = [-0.5, 0.1];
        assert_eq!(
            generate_states(&s, &chain, ObjectiveKind::Revenue, None, &feasible),
            Err(GeneratorError::BadInterval)
        );
    }
}
