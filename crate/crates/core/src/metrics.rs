//! Regret and mean-squared-error bookkeeping.
//!
//! Regret is accumulated from the realized quadratic-form terms
//!
//! ```text
//! quadratic regulation:  ||A_{s_t} (x_t - x*_{s_{t-1}})||^2
//! revenue maximization:  -(x_t - x*)^T A_{s_t} (x_t - x*)
//! ```
//!
//! whose conditional mean given `s_{t-1}` equals the stage-cost gap to the
//! known-model optimum. The noise never enters these terms, which keeps the
//! Monte Carlo error of regret curves small.

use nalgebra::DVector;
use serde::Serialize;

use crate::model::{JumpAffineModel, Objective};
use crate::oracle::OptimalInputs;
use crate::simulate::StepRecord;

/// `||A_{state} (x - x*_{prev})||^2`.
pub fn stage_regret_qr(
    model: &JumpAffineModel,
    optimal: &OptimalInputs,
    state: usize,
    prev: usize,
    x: &DVector<f64>,
) -> f64 {
    let diff = x - optimal.get(prev);
    (&model.states[state].gain * diff).norm_squared()
}

/// `-(x - x*_{prev})^T A_{state} (x - x*_{prev})`.
pub fn stage_regret_rm(
    model: &JumpAffineModel,
    optimal: &OptimalInputs,
    state: usize,
    prev: usize,
    x: &DVector<f64>,
) -> f64 {
    let diff = x - optimal.get(prev);
    0.0 - diff.dot(&(&model.states[state].gain * &diff))
}

/// Realized regret term for the model's objective.
pub fn stage_regret(
    model: &JumpAffineModel,
    optimal: &OptimalInputs,
    state: usize,
    prev: usize,
    x: &DVector<f64>,
) -> f64 {
    match model.objective {
        Objective::QuadraticRegulation { .. } => stage_regret_qr(model, optimal, state, prev, x),
        Objective::RevenueMaximization => stage_regret_rm(model, optimal, state, prev, x),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("LengthMismatch: series of length {found} where {expected} was expected")]
    LengthMismatch { expected: usize, found: usize },
    #[error("no series to aggregate")]
    Empty,
}

/// Per-period curves of a single replication. Missing values (no oracle,
/// or no estimate yet) are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretSeries {
    pub replication: u64,
    pub cumulative_regret: Vec<f64>,
    pub cumulative_input_sq_err: Vec<f64>,
    /// `||x_t - x*_{s_{t-1}}||^2` per period.
    pub input_sq_err: Vec<f64>,
    /// `||x_hat_{s_{t-1}} - x*_{s_{t-1}}||^2` per period.
    pub est_sq_err: Vec<f64>,
    /// Per state, error of the estimate after its `k`-th completed update
    /// (entry `k - 1`).
    pub update_sq_err: Vec<Vec<f64>>,
}

impl RegretSeries {
    pub fn with_capacity(replication: u64, horizon: usize, states: usize) -> Self {
        Self {
            replication,
            cumulative_regret: Vec::with_capacity(horizon),
            cumulative_input_sq_err: Vec::with_capacity(horizon),
            input_sq_err: Vec::with_capacity(horizon),
            est_sq_err: Vec::with_capacity(horizon),
            update_sq_err: vec![Vec::new(); states],
        }
    }

    /// Append one period.
    pub fn push(&mut self, record: &StepRecord) {
        let regret = record.stage_regret.unwrap_or(f64::NAN);
        let input = record.input_sq_err.unwrap_or(f64::NAN);
        let last_regret = self.cumulative_regret.last().copied().unwrap_or(0.0);
        let last_input = self.cumulative_input_sq_err.last().copied().unwrap_or(0.0);
        self.cumulative_regret.push(last_regret + regret);
        self.cumulative_input_sq_err.push(last_input + input);
        self.input_sq_err.push(input);
        self.est_sq_err.push(record.est_sq_err.unwrap_or(f64::NAN));

        if let (Some(updates), Some(err)) = (record.est_updates, record.est_sq_err) {
            let curve = &mut self.update_sq_err[record.prev_state];
            if updates as usize == curve.len() + 1 {
                curve.push(err);
            }
        }
    }

    pub fn from_records<'a>(
        replication: u64,
        states: usize,
        records: impl IntoIterator<Item = &'a StepRecord>,
    ) -> Self {
        let mut s = Self::with_capacity(replication, 0, states);
        for r in records {
            s.push(r);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.cumulative_regret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative_regret.is_empty()
    }
}

/// Pointwise running mean and variance (Welford), skipping `NaN`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MeanCurve {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: Vec<u64>,
}

impl MeanCurve {
    pub fn with_len(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            m2: vec![0.0; len],
            count: vec![0; len],
        }
    }

    pub fn add(&mut self, index: usize, value: f64) {
        if value.is_nan() {
            return;
        }
        if index >= self.mean.len() {
            self.mean.resize(index + 1, 0.0);
            self.m2.resize(index + 1, 0.0);
            self.count.resize(index + 1, 0);
        }
        self.count[index] += 1;
        let n = self.count[index] as f64;
        let delta = value - self.mean[index];
        self.mean[index] += delta / n;
        self.m2[index] += delta * (value - self.mean[index]);
    }

    pub fn add_all(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.add(i, *v);
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Mean at `index`, `NaN` when nothing was recorded there.
    pub fn mean(&self, index: usize) -> f64 {
        match self.count.get(index) {
            Some(&c) if c > 0 => self.mean[index],
            _ => f64::NAN,
        }
    }

    /// Standard error of the mean at `index`; zero for a single sample.
    pub fn std_error(&self, index: usize) -> f64 {
        match self.count.get(index) {
            Some(&c) if c > 1 => (self.m2[index] / (c - 1) as f64 / c as f64).sqrt(),
            Some(&1) => 0.0,
            _ => f64::NAN,
        }
    }

    pub fn count(&self, index: usize) -> u64 {
        self.count.get(index).copied().unwrap_or(0)
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.mean(i)).collect()
    }
}

/// Least-squares fit of `log y = intercept + slope * log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Fit a power law to the pairs with `lo <= x <= hi` and positive finite
/// coordinates. Needs at least two distinct abscissae.
pub fn fit_power_law(xs: &[f64], ys: &[f64], lo: f64, hi: f64) -> Option<PowerFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x >= lo && **x <= hi && **x > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(PowerFit {
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
    })
}

/// Mean curves over replications.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub horizon: usize,
    pub replications: u64,
    pub cumulative_regret: MeanCurve,
    pub cumulative_input_sq_err: MeanCurve,
    pub input_sq_err: MeanCurve,
    pub est_sq_err: MeanCurve,
    pub update_sq_err: Vec<MeanCurve>,
}

impl Aggregate {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            replications: 0,
            cumulative_regret: MeanCurve::with_len(horizon),
            cumulative_input_sq_err: MeanCurve::with_len(horizon),
            input_sq_err: MeanCurve::with_len(horizon),
            est_sq_err: MeanCurve::with_len(horizon),
            update_sq_err: Vec::new(),
        }
    }

    /// Fold one replication in. Folding order is the caller's
    /// responsibility when bit-identical results matter.
    pub fn push(&mut self, series: &RegretSeries) -> Result<(), MetricsError> {
        if series.len() != self.horizon {
            return Err(MetricsError::LengthMismatch {
                expected: self.horizon,
                found: series.len(),
            });
        }
        self.cumulative_regret.add_all(&series.cumulative_regret);
        self.cumulative_input_sq_err.add_all(&series.cumulative_input_sq_err);
        self.input_sq_err.add_all(&series.input_sq_err);
        self.est_sq_err.add_all(&series.est_sq_err);
        if self.update_sq_err.len() < series.update_sq_err.len() {
            self.update_sq_err.resize(series.update_sq_err.len(), MeanCurve::default());
        }
        for (acc, curve) in self.update_sq_err.iter_mut().zip(&series.update_sq_err) {
            acc.add_all(curve);
        }
        self.replications += 1;
        Ok(())
    }

    /// Slope of log mean cumulative regret against log t for t in `[lo, hi]`.
    pub fn regret_exponent(&self, lo: f64, hi: f64) -> Option<PowerFit> {
        let (ts, ys) = curve_points(&self.cumulative_regret, self.replications);
        fit_power_law(&ts, &ys, lo, hi)
    }

    /// Slope of log mean cumulative regret at the given one-based periods.
    pub fn regret_exponent_at(&self, ts: &[u64]) -> Option<PowerFit> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = ts
            .iter()
            .filter(|&&t| t >= 1 && t as usize <= self.horizon)
            .map(|&t| (t as f64, self.cumulative_regret.mean(t as usize - 1)))
            .unzip();
        fit_power_law(&xs, &ys, f64::MIN_POSITIVE, f64::INFINITY)
    }

    /// Slope of log mean estimation error against log t for t in `[lo, hi]`.
    pub fn est_mse_exponent(&self, lo: f64, hi: f64) -> Option<PowerFit> {
        let (ts, ys) = curve_points(&self.est_sq_err, self.replications);
        fit_power_law(&ts, &ys, lo, hi)
    }

    /// Largest update count reached by every replication for `state`.
    pub fn common_updates(&self, state: usize) -> usize {
        self.update_sq_err.get(state).map_or(0, |c| {
            (0..c.len())
                .take_while(|&k| c.count(k) == self.replications)
                .count()
        })
    }

    /// Slope of the mean per-state estimate error against the update index
    /// `t_i` over the last decade of indices every replication reached.
    pub fn update_mse_exponent(&self, state: usize) -> Option<PowerFit> {
        let curve = self.update_sq_err.get(state)?;
        let top = self.common_updates(state);
        let (ts, ys) = curve_points(curve, self.replications);
        fit_power_law(&ts[..top], &ys[..top], top as f64 / 10.0, top as f64)
    }
}

/// `(t, mean)` pairs for indices where every replication contributed, with
/// `t` one-based.
fn curve_points(curve: &MeanCurve, replications: u64) -> (Vec<f64>, Vec<f64>) {
    (0..curve.len())
        .map(|i| {
            let y = if curve.count(i) == replications {
                curve.mean(i)
            } else {
                f64::NAN
            };
            ((i + 1) as f64, y)
        })
        .unzip()
}

/// Aggregate equal-length series in slice order.
pub fn aggregate(series: &[RegretSeries]) -> Result<Aggregate, MetricsError> {
    let first = series.first().ok_or(MetricsError::Empty)?;
    let mut agg = Aggregate::new(first.len());
    for s in series {
        agg.push(s)?;
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineState, MarkovChain};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn scalar_model(a: f64, objective: Objective) -> (JumpAffineModel, OptimalInputs) {
        let model = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
            vec![AffineState::noiseless(DMatrix::from_element(1, 1, a), scalar(1.0))],
            objective,
        );
        let opt = OptimalInputs::compute(&model).unwrap();
        (model, opt)
    }

    #[test]
    fn regret_examples() {
        let (qr, opt) = scalar_model(2.0, Objective::QuadraticRegulation { target: scalar(3.0) });
        let star = opt.get(0)[0];
        assert_eq!(stage_regret_qr(&qr, &opt, 0, 0, &scalar(star)), 0.0);
        assert_eq!(stage_regret_qr(&qr, &opt, 0, 0, &scalar(star + 0.5)), 1.0);

        let (rm, opt) = scalar_model(-1.0, Objective::RevenueMaximization);
        let star = opt.get(0)[0];
        assert_eq!(stage_regret_rm(&rm, &opt, 0, 0, &scalar(star)), 0.0);
        assert_eq!(stage_regret_rm(&rm, &opt, 0, 0, &scalar(star + 0.5)), 0.25);
        assert_eq!(
            stage_regret_rm(&rm, &opt, 0, 0, &scalar(star - 0.5)),
            stage_regret_rm(&rm, &opt, 0, 0, &scalar(star + 0.5))
        );
    }

    fn series(values: &[f64]) -> RegretSeries {
        RegretSeries {
            replication: 0,
            cumulative_regret: values.to_vec(),
            cumulative_input_sq_err: values.to_vec(),
            input_sq_err: values.to_vec(),
            est_sq_err: values.to_vec(),
            update_sq_err: vec![values.to_vec()],
        }
    }

    #[test]
    fn identical_series_have_zero_spread() {
        let s = series(&[0.3, 1.7, 2.9]);
        let agg = aggregate(&[s.clone(), s.clone(), s]).unwrap();
        for i in 0..3 {
            assert_eq!(agg.cumulative_regret.mean(i), [0.3, 1.7, 2.9][i]);
            assert_eq!(agg.cumulative_regret.std_error(i), 0.0);
        }
    }

    #[test]
    fn two_replication_hand_average() {
        let agg = aggregate(&[series(&[1.0, 3.0]), series(&[3.0, 7.0])]).unwrap();
        assert_eq!(agg.cumulative_regret.means(), vec![2.0, 5.0]);
        // sample sd of {1, 3} is sqrt(2); se = sqrt(2) / sqrt(2) = 1.
        assert!((agg.cumulative_regret.std_error(0) - 1.0).abs() < 1e-15);
        assert!((agg.cumulative_regret.std_error(1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert_eq!(
            aggregate(&[series(&[1.0, 2.0]), series(&[1.0])]),
            Err(MetricsError::LengthMismatch { expected: 2, found: 1 })
        );
        assert_eq!(aggregate(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn synthetic_square_root_law() {
        let ts: Vec<f64> = (1..=1000).map(|t| t as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.7 * t.sqrt()).collect();
        let fit = fit_power_law(&ts, &ys, 100.0, 1000.0).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-6);
        assert!((fit.intercept - 3.7f64.ln()).abs() < 1e-6);
        assert_eq!(fit.points, 901);
    }

    #[test]
    fn update_curve_records_each_completed_update_once() {
        let mut s = RegretSeries::with_capacity(0, 4, 1);
        let rec = |updates: u64, err: f64| StepRecord {
            t: 1,
            prev_state: 0,
            state: 0,
            input: scalar(0.0),
            output: scalar(0.0),
            stage_cost: 0.0,
            stage_regret: Some(1.0),
            input_sq_err: Some(1.0),
            est_sq_err: Some(err),
            est_updates: Some(updates),
            fallback: false,
        };
        for (u, e) in [(0, 9.0), (1, 4.0), (1, 4.0), (2, 1.0)] {
            s.push(&rec(u, e));
        }
        assert_eq!(s.update_sq_err[0], vec![4.0, 1.0]);
        assert_eq!(s.cumulative_regret, vec![1.0, 2.0, 3.0, 4.0]);
    }

    fn matrix2() -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0..2.0f64, 4).prop_map(|v| DMatrix::from_vec(2, 2, v))
    }

    proptest! {
        #[test]
        fn regret_terms_are_nonnegative(
            a in matrix2(),
            x in proptest::collection::vec(-5.0..5.0f64, 2),
        ) {
            let x = DVector::from_vec(x);
            // Make a negative definite copy for the revenue term.
            let neg = -(a.transpose() * &a) - DMatrix::identity(2, 2) * 0.1;
            let chain = MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0);
            let qr = JumpAffineModel::new(
                chain.clone(),
                vec![AffineState::noiseless(a.clone() + DMatrix::identity(2, 2) * 3.0, DVector::zeros(2))],
                Objective::QuadraticRegulation { target: DVector::from_element(2, 1.0) },
            );
            let rm = JumpAffineModel::new(
                chain,
                vec![AffineState::noiseless(neg, DVector::from_element(2, 1.0))],
                Objective::RevenueMaximization,
            );
            let oq = OptimalInputs::compute(&qr).unwrap();
            let orm = OptimalInputs::compute(&rm).unwrap();
            prop_assert!(stage_regret(&qr, &oq, 0, 0, &x) >= 0.0);
            prop_assert!(stage_regret(&rm, &orm, 0, 0, &x) >= 0.0);
        }
    }
}
