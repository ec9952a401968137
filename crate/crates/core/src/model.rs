//! Ground-truth Markov jump affine systems and the box-shaped feasible set.
//!
//! A [`JumpAffineModel`] couples a finite Markov chain with one affine
//! input-output map per chain state:
//!
//! ```text
//! y_t = A_{s_t} x_t + b_{s_t} + w_t,     w_t ~ N(0, diag(sigma_{s_t}^2))
//! ```
//!
//! State labels are zero-based inside the library. Anything that reaches a
//! user (error reports, config field paths, CSV traces) is one-based.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Tolerance on `|row sum - 1|` for transition matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Default relative singular-value threshold for the full-column-rank check.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Exogenous finite-state, time-homogeneous Markov chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    /// Row-stochastic `K x K` transition matrix, `transition[(i, j)] = p_{i,j}`.
    pub transition: DMatrix<f64>,
    /// State occupied before the first decision (zero-based).
    pub initial_state: usize,
}

impl MarkovChain {
    pub fn new(transition: DMatrix<f64>, initial_state: usize) -> Self {
        Self {
            transition,
            initial_state,
        }
    }

    /// Number of chain states.
    pub fn len(&self) -> usize {
        self.transition.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Transition probability `p_{from,to}`.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transition[(from, to)]
    }
}

/// Parameters of the affine map attached to one chain state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineState {
    /// `m x n` gain matrix `A_k`.
    pub gain: DMatrix<f64>,
    /// Offset `b_k` (length `m`).
    pub offset: DVector<f64>,
    /// Per-output noise standard deviation (length `m`).
    pub noise_sigma: DVector<f64>,
}

impl AffineState {
    pub fn new(gain: DMatrix<f64>, offset: DVector<f64>, noise_sigma: DVector<f64>) -> Self {
        Self {
            gain,
            offset,
            noise_sigma,
        }
    }

    /// Noiseless state with the given gain and offset.
    pub fn noiseless(gain: DMatrix<f64>, offset: DVector<f64>) -> Self {
        let m = offset.len();
        Self::new(gain, offset, DVector::zeros(m))
    }

    /// `Tr(Sigma_w)` for the diagonal Gaussian noise of this state.
    pub fn noise_trace(&self) -> f64 {
        self.noise_sigma.iter().map(|s| s * s).sum()
    }

    /// Noiseless response `A x + b`.
    pub fn mean_response(&self, input: &DVector<f64>) -> DVector<f64> {
        &self.gain * input + &self.offset
    }
}

/// Which stage cost the decision maker minimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// `E ||y* - y||^2`, steering the output towards a fixed target.
    QuadraticRegulation { target: DVector<f64> },
    /// `E[-x . y]`, i.e. negated revenue with prices `x` and demands `y`.
    RevenueMaximization,
}

impl Objective {
    pub fn is_revenue(&self) -> bool {
        matches!(self, Objective::RevenueMaximization)
    }

    /// Short machine name used in file outputs.
    pub fn label(&self) -> &'static str {
        match self {
            Objective::QuadraticRegulation { .. } => "quadratic",
            Objective::RevenueMaximization => "revenue",
        }
    }

    /// Realized one-period cost of playing `input` and observing `output`.
    pub fn realized_cost(&self, input: &DVector<f64>, output: &DVector<f64>) -> f64 {
        match self {
            Objective::QuadraticRegulation { target } => (output - target).norm_squared(),
            Objective::RevenueMaximization => -input.dot(output),
        }
    }
}

/// The full ground-truth system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpAffineModel {
    pub chain: MarkovChain,
    pub states: Vec<AffineState>,
    pub objective: Objective,
}

impl JumpAffineModel {
    pub fn new(chain: MarkovChain, states: Vec<AffineState>, objective: Objective) -> Self {
        Self {
            chain,
            states,
            objective,
        }
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    /// Output dimension `m`.
    pub fn output_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.gain.nrows())
    }

    /// Input dimension `n`.
    pub fn input_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.gain.ncols())
    }

    /// Row `i` of the transition matrix as an iterator of `(j, p_{i,j})`.
    pub fn transitions_from(&self, from: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.chain.len()).map(move |j| (j, self.chain.prob(from, j)))
    }

    /// Check every invariant, returning the model unchanged on success.
    pub fn validate(
        self,
        feasible: &FeasibleBox,
        rank_tol: f64,
    ) -> Result<Self, ValidationReport> {
        let report = check_model(&self, feasible, rank_tol);
        if report.is_empty() {
            Ok(self)
        } else {
            Err(report)
        }
    }
}

/// Validate `model` against `feasible` and the full-rank threshold `rank_tol`.
pub fn validate_model(
    model: JumpAffineModel,
    feasible: &FeasibleBox,
    rank_tol: f64,
) -> Result<JumpAffineModel, ValidationReport> {
    model.validate(feasible, rank_tol)
}

/// One violated model invariant. State and row indices are zero-based;
/// `Display` renders them one-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoStates,
    StateCountMismatch { chain: usize, states: usize },
    InitialStateOutOfRange { state: usize },
    EntryOutOfRange { row: usize, col: usize },
    RowNotStochastic { row: usize, sum: f64 },
    DimensionMismatch { detail: String },
    RankDeficient { state: usize },
    NotNegativeDefinite { state: usize, max_eigenvalue: f64 },
    NegativeNoise { state: usize },
    NonFinite { detail: String },
    EmptyBox { coord: usize },
    UnboundedBox { coord: usize },
}

impl Violation {
    /// Dotted config path of the offending field.
    pub fn field_path(&self) -> String {
        match self {
            Violation::NoStates => "model.states".into(),
            Violation::StateCountMismatch { .. } => "model.chain.P".into(),
            Violation::InitialStateOutOfRange { .. } => "model.chain.initial_state".into(),
            Violation::EntryOutOfRange { row, .. } | Violation::RowNotStochastic { row, .. } => {
                format!("chain.P.row{}", row + 1)
            }
            Violation::DimensionMismatch { .. } => "model.states".into(),
            Violation::RankDeficient { state } => format!("model.states[{}].A", state + 1),
            Violation::NotNegativeDefinite { state, .. } => {
                format!("model.states[{}].A", state + 1)
            }
            Violation::NegativeNoise { state } => {
                format!("model.states[{}].noise_sigma", state + 1)
            }
            Violation::NonFinite { .. } => "model".into(),
            Violation::EmptyBox { .. } | Violation::UnboundedBox { .. } => "feasible".into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStates => write!(f, "model has no states"),
            Violation::StateCountMismatch { chain, states } => write!(
                f,
                "transition matrix is {chain}x{chain} but {states} affine states are given"
            ),
            Violation::InitialStateOutOfRange { state } => {
                write!(f, "initial state {} is not a chain state", state + 1)
            }
            Violation::EntryOutOfRange { row, col } => write!(
                f,
                "transition probability p[{},{}] is outside [0, 1]",
                row + 1,
                col + 1
            ),
            Violation::RowNotStochastic { row, sum } => {
                write!(f, "RowNotStochastic({}): row sums to {sum}", row + 1)
            }
            Violation::DimensionMismatch { detail } => write!(f, "DimensionMismatch: {detail}"),
            Violation::RankDeficient { state } => {
                write!(f, "RankDeficient({}): gain lacks full column rank", state + 1)
            }
            Violation::NotNegativeDefinite {
                state,
                max_eigenvalue,
            } => write!(
                f,
                "NotNegativeDefinite({}): symmetric part has eigenvalue {max_eigenvalue}",
                state + 1
            ),
            Violation::NegativeNoise { state } => {
                write!(f, "state {} has a negative noise deviation", state + 1)
            }
            Violation::NonFinite { detail } => write!(f, "non-finite value in {detail}"),
            Violation::EmptyBox { coord } => {
                write!(f, "EmptyBox: lower > upper at coordinate {}", coord + 1)
            }
            Violation::UnboundedBox { coord } => {
                write!(f, "feasible box is unbounded at coordinate {}", coord + 1)
            }
        }
    }
}

/// Every invariant a model failed, in discovery order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {v}", v.field_path())?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

fn check_model(model: &JumpAffineModel, feasible: &FeasibleBox, rank_tol: f64) -> ValidationReport {
    let mut out = Vec::new();
    let chain = &model.chain;
    let k = chain.len();

    if model.states.is_empty() || k == 0 {
        out.push(Violation::NoStates);
        return ValidationReport { violations: out };
    }
    if chain.transition.ncols() != k || model.states.len() != k {
        out.push(Violation::StateCountMismatch {
            chain: k,
            states: model.states.len(),
        });
    }
    if chain.initial_state >= k {
        out.push(Violation::InitialStateOutOfRange {
            state: chain.initial_state,
        });
    }
    if chain.transition.ncols() == k {
        for row in 0..k {
            let mut sum = 0.0;
            for col in 0..k {
                let p = chain.transition[(row, col)];
                if !(0.0..=1.0).contains(&p) {
                    out.push(Violation::EntryOutOfRange { row, col });
                }
                sum += p;
            }
            if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
                out.push(Violation::RowNotStochastic { row, sum });
            }
        }
    }

    let m = model.output_dim();
    let n = model.input_dim();
    for (idx, st) in model.states.iter().enumerate() {
        if st.gain.nrows() != m || st.gain.ncols() != n {
            out.push(Violation::DimensionMismatch {
                detail: format!(
                    "state {} gain is {}x{}, expected {m}x{n}",
                    idx + 1,
                    st.gain.nrows(),
                    st.gain.ncols()
                ),
            });
            continue;
        }
        if st.offset.len() != m || st.noise_sigma.len() != m {
            out.push(Violation::DimensionMismatch {
                detail: format!("state {} offset/noise length differs from m={m}", idx + 1),
            });
            continue;
        }
        if st.gain.iter().chain(st.offset.iter()).any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite {
                detail: format!("state {}", idx + 1),
            });
            continue;
        }
        if st.noise_sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            out.push(Violation::NegativeNoise { state: idx });
        }
        if !has_full_column_rank(&st.gain, rank_tol) {
            out.push(Violation::RankDeficient { state: idx });
        }
        if model.objective.is_revenue() && m == n {
            let top = max_symmetric_eigenvalue(&st.gain);
            if !(top < -rank_tol) {
                out.push(Violation::NotNegativeDefinite {
                    state: idx,
                    max_eigenvalue: top,
                });
            }
        }
    }

    match &model.objective {
        Objective::RevenueMaximization if m != n => {
            out.push(Violation::DimensionMismatch {
                detail: format!("revenue objective needs m = n, got m={m}, n={n}"),
            });
        }
        Objective::QuadraticRegulation { target } if target.len() != m => {
            out.push(Violation::DimensionMismatch {
                detail: format!("target has length {}, expected m={m}", target.len()),
            });
        }
        _ => {}
    }

    if feasible.dim() != n {
        out.push(Violation::DimensionMismatch {
            detail: format!("feasible box has dimension {}, expected n={n}", feasible.dim()),
        });
    }
    out.extend(feasible.violations());

    ValidationReport { violations: out }
}

/// Smallest singular value exceeds `rank_tol` times the largest.
pub fn has_full_column_rank(gain: &DMatrix<f64>, rank_tol: f64) -> bool {
    if gain.nrows() < gain.ncols() || gain.ncols() == 0 {
        return false;
    }
    let sv = gain.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    max > 0.0 && min > rank_tol * max
}

/// Largest eigenvalue of `(A + A^T) / 2` for a square `A`.
pub fn max_symmetric_eigenvalue(gain: &DMatrix<f64>) -> f64 {
    let sym = (gain + gain.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

/// Axis-aligned box `[lower, upper]` of admissible inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

/// Input vector length disagrees with the box dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("DimensionMismatch: expected length {expected}, got {actual}")]
pub struct DimensionMismatch {
    pub expected: usize,
    pub actual: usize,
}

impl FeasibleBox {
    /// Build a box, rejecting empty or unbounded ones.
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, ValidationReport> {
        let b = Self { lower, upper };
        let violations = b.violations();
        if violations.is_empty() {
            Ok(b)
        } else {
            Err(ValidationReport { violations })
        }
    }

    /// The cube `[lo, hi]^n`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, ValidationReport> {
        Self::new(DVector::from_element(dim, lo), DVector::from_element(dim, hi))
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.lower.len() != self.upper.len() {
            out.push(Violation::DimensionMismatch {
                detail: format!(
                    "box bounds have lengths {} and {}",
                    self.lower.len(),
                    self.upper.len()
                ),
            });
            return out;
        }
        for (coord, (lo, hi)) in self.lower.iter().zip(self.upper.iter()).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                out.push(Violation::UnboundedBox { coord });
            } else if lo > hi {
                out.push(Violation::EmptyBox { coord });
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Componentwise clamp, which is the Euclidean projection for a box.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, DimensionMismatch> {
        let mut out = x.clone();
        self.project_in_place(&mut out)?;
        Ok(out)
    }

    pub fn project_in_place(&self, x: &mut DVector<f64>) -> Result<(), DimensionMismatch> {
        if x.len() != self.dim() {
            return Err(DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        for ((v, lo), hi) in x.iter_mut().zip(self.lower.iter()).zip(self.upper.iter()) {
            *v = v.clamp(*lo, *hi);
        }
        Ok(())
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Distance from `x` to the nearest face, negative outside the box.
    pub fn interior_margin(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(v, (lo, hi))| (v - lo).min(hi - v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Projection onto `feasible`.
pub fn project(
    feasible: &FeasibleBox,
    x: &DVector<f64>,
) -> Result<DVector<f64>, DimensionMismatch> {
    feasible.project(x)
}
