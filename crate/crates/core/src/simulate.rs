//! Seeded randomness and the decision loop that drives a policy against the
//! ground-truth system.
//!
//! Each period `t = 1..=T` runs in a fixed order:
//!
//! 1. the policy sees `s_{t-1}` and emits `x_t` (policy draws come from the
//!    policy substream only);
//! 2. `s_t` is drawn from row `s_{t-1}` of the transition matrix (one uniform);
//! 3. `y_t = A_{s_t} x_t + b_{s_t} + w_t` is drawn (`m` Gaussians);
//! 4. the policy is told `(s_{t-1}, s_t, x_t, y_t)`.
//!
//! System draws and policy draws live on separate ChaCha streams, so two
//! policies replayed under the same `(seed, stream_id)` face the same chain
//! path and the same noise sequence.

use std::io::{self, Write};

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{JumpAffineModel, MarkovChain};
use crate::oracle::OptimalInputs;
use crate::policies::{Observation, Policy, PolicyError};

/// Horizons beyond this are rejected before any allocation happens.
pub const MAX_HORIZON: u64 = u32::MAX as u64;

const POLICY_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Replayable random source keyed by `(seed, stream_id)`.
///
/// Uniforms take the top 53 bits of a ChaCha8 word; Gaussians use the
/// Box-Muller transform with `libm` transcendental functions so the same
/// key yields the same bits on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent stream reserved for policy-internal randomness.
    pub fn policy_stream(&self) -> RngStream {
        RngStream::new(self.seed ^ POLICY_SEED_MIX, self.stream_id)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, second variate cached).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * libm::log(u1)).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fair `+1` / `-1` coin.
    pub fn rademacher(&mut self) -> f64 {
        if self.rng.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Draw `s_t` given `s_{t-1}` with exactly one uniform.
pub fn next_state(chain: &MarkovChain, prev: usize, rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let k = chain.len();
    let mut acc = 0.0;
    for j in 0..k {
        acc += chain.prob(prev, j);
        if u < acc {
            return j;
        }
    }
    // Rounding left the cumulative sum just below one: take the last state
    // with positive mass.
    (0..k).rev().find(|&j| chain.prob(prev, j) > 0.0).unwrap_or(k - 1)
}

/// A non-finite input was handed to the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("NonFiniteInput: input vector has a NaN or infinite entry")]
pub struct NonFiniteInput;

/// Draw `y_t` for state `state` and input `input` with exactly `m` Gaussians.
pub fn observe(
    model: &JumpAffineModel,
    state: usize,
    input: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<DVector<f64>, NonFiniteInput> {
    if input.iter().any(|v| !v.is_finite()) {
        return Err(NonFiniteInput);
    }
    let st = &model.states[state];
    let mut y = st.mean_response(input);
    for (yi, sigma) in y.iter_mut().zip(st.noise_sigma.iter()) {
        let z = rng.standard_normal();
        *yi += sigma * z;
    }
    Ok(y)
}

/// One period of the decision loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: u64,
    pub prev_state: usize,
    pub state: usize,
    pub input: DVector<f64>,
    pub output: DVector<f64>,
    /// Realized stage cost (`||y - y*||^2` or `-x.y`).
    pub stage_cost: f64,
    /// Realized regret term; `None` when no oracle was supplied.
    pub stage_regret: Option<f64>,
    /// `||x_t - x*_{s_{t-1}}||^2`.
    pub input_sq_err: Option<f64>,
    /// Squared error of the policy's estimate for `s_{t-1}` after its update.
    pub est_sq_err: Option<f64>,
    /// Completed estimate revisions for `s_{t-1}`, when the policy keeps any.
    pub est_updates: Option<u64>,
    /// The policy fell back to its previous input this period.
    pub fallback: bool,
}

/// Snapshot of one policy's per-state estimate at the end of an episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalEstimate {
    pub state: usize,
    pub estimate: DVector<f64>,
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub final_estimates: Vec<FinalEstimate>,
}

impl Trajectory {
    /// Chain consistency and strictly increasing timestamps.
    pub fn is_consistent(&self) -> bool {
        self.records.windows(2).all(|w| {
            w[1].prev_state == w[0].state && w[1].t > w[0].t
        })
    }

    /// Write the per-step trace CSV (state labels one-based).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = vec!["t".to_string(), "s_prev".into(), "s_t".into()];
        header.extend((0..self.input_dim).map(|j| format!("x{j}")));
        header.extend((0..self.output_dim).map(|j| format!("y{j}")));
        header.extend(["stage_cost".into(), "stage_regret".into(), "input_sq_err".into()]);
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![
                r.t.to_string(),
                (r.prev_state + 1).to_string(),
                (r.state + 1).to_string(),
            ];
            row.extend(r.input.iter().map(f64::to_string));
            row.extend(r.output.iter().map(f64::to_string));
            row.push(r.stage_cost.to_string());
            row.push(r.stage_regret.map(|v| v.to_string()).unwrap_or_default());
            row.push(r.input_sq_err.map(|v| v.to_string()).unwrap_or_default());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("horizon {0} exceeds the supported maximum {MAX_HORIZON}")]
    HorizonOverflow(u64),
    #[error("t={t}: {source}")]
    Policy {
        t: u64,
        #[source]
        source: PolicyError,
    },
    #[error("t={t}: {source}")]
    NonFinite {
        t: u64,
        #[source]
        source: NonFiniteInput,
    },
}

impl EpisodeError {
    /// Period at which the episode failed, if it got that far.
    pub fn period(&self) -> Option<u64> {
        match self {
            EpisodeError::Policy { t, .. } | EpisodeError::NonFinite { t, .. } => Some(*t),
            _ => None,
        }
    }
}

/// The environment side of an episode: system, feasible set and (optionally)
/// the known-model optimum used for regret bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub model: &'a JumpAffineModel,
    pub optimal: Option<&'a OptimalInputs>,
}

impl<'a> Episode<'a> {
    pub fn new(model: &'a JumpAffineModel, optimal: Option<&'a OptimalInputs>) -> Self {
        Self { model, optimal }
    }

    /// Run `horizon` periods, handing each record to `sink` instead of
    /// storing it.
    pub fn run_with<P, F>(
        &self,
        policy: &mut P,
        horizon: u64,
        rng: &mut RngStream,
        mut sink: F,
    ) -> Result<(), EpisodeError>
    where
        P: Policy + ?Sized,
        F: FnMut(StepRecord),
    {
        if horizon == 0 {
            return Err(EpisodeError::EmptyHorizon);
        }
        if horizon > MAX_HORIZON {
            return Err(EpisodeError::HorizonOverflow(horizon));
        }
        let model = self.model;
        let mut policy_rng = rng.policy_stream();
        let mut prev = model.chain.initial_state;
        for t in 1..=horizon {
            let decision = policy
                .act(prev, &mut policy_rng)
                .map_err(|source| EpisodeError::Policy { t, source })?;
            let input = decision.input;
            let state = next_state(&model.chain, prev, rng);
            let output = observe(model, state, &input, rng)
                .map_err(|source| EpisodeError::NonFinite { t, source })?;
            policy
                .update(&Observation {
                    prev_state: prev,
                    state,
                    input: &input,
                    output: &output,
                })
                .map_err(|source| EpisodeError::Policy { t, source })?;

            let stage_cost = model.objective.realized_cost(&input, &output);
            let (stage_regret, input_sq_err, est_sq_err) = match self.optimal {
                Some(opt) => {
                    let star = opt.get(prev);
                    let est = policy
                        .snapshot(prev)
                        .map(|v| (v.estimate - star).norm_squared());
                    (
                        Some(crate::metrics::stage_regret(model, opt, state, prev, &input)),
                        Some((&input - star).norm_squared()),
                        est,
                    )
                }
                None => (None, None, None),
            };
            let est_updates = policy.snapshot(prev).map(|v| v.updates);
            sink(StepRecord {
                t,
                prev_state: prev,
                state,
                input,
                output,
                stage_cost,
                stage_regret,
                input_sq_err,
                est_sq_err,
                est_updates,
                fallback: decision.fallback,
            });
            prev = state;
        }
        Ok(())
    }

    /// Run and collect the full trajectory.
    pub fn run<P: Policy + ?Sized>(
        &self,
        policy: &mut P,
        horizon: u64,
        rng: &mut RngStream,
    ) -> Result<Trajectory, EpisodeError> {
        let mut records = Vec::with_capacity(horizon.min(1 << 20) as usize);
        self.run_with(policy, horizon, rng, |r| records.push(r))?;
        let final_estimates = (0..self.model.state_count())
            .filter_map(|state| {
                policy.snapshot(state).map(|v| FinalEstimate {
                    state,
                    estimate: v.estimate.clone(),
                    updates: v.updates,
                })
            })
            .collect();
        Ok(Trajectory {
            records,
            input_dim: self.model.input_dim(),
            output_dim: self.model.output_dim(),
            final_estimates,
        })
    }
}

/// Run one episode of `policy` against `model`, recording regret against
/// `optimal` when it is given.
pub fn run_episode<P: Policy + ?Sized>(
    model: &JumpAffineModel,
    optimal: Option<&OptimalInputs>,
    policy: &mut P,
    horizon: u64,
    rng: &mut RngStream,
) -> Result<Trajectory, EpisodeError> {
    Episode::new(model, optimal).run(policy, horizon, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineState, Objective};
    use crate::policies::ConstantPolicy;
    use nalgebra::DMatrix;

    fn chain(rows: &[f64], k: usize) -> MarkovChain {
        MarkovChain::new(DMatrix::from_row_slice(k, k, rows), 0)
    }

    #[test]
    fn identity_chain_is_absorbing() {
        let c = chain(&[1.0, 0.0, 0.0, 1.0], 2);
        let mut rng = RngStream::new(3, 0);
        assert!((0..1000).all(|_| next_state(&c, 1, &mut rng) == 1));
    }

    #[test]
    fn deterministic_row() {
        let c = chain(&[1.0, 0.0, 0.3, 0.7], 2);
        let mut rng = RngStream::new(4, 9);
        assert!((0..1000).all(|_| next_state(&c, 0, &mut rng) == 0));
    }

    #[test]
    fn uniform_chain_frequency_within_three_standard_errors() {
        let c = chain(&[0.5, 0.5, 0.5, 0.5], 2);
        let mut rng = RngStream::new(11, 2);
        let n = 100_000;
        let hits = (0..n).filter(|_| next_state(&c, 0, &mut rng) == 0).count();
        let freq = hits as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn next_state_consumes_one_uniform() {
        let c = chain(&[0.2, 0.8, 0.5, 0.5], 2);
        let mut a = RngStream::new(5, 1);
        let mut b = RngStream::new(5, 1);
        next_state(&c, 0, &mut a);
        b.uniform();
        assert_eq!(a.uniform(), b.uniform());
    }

    fn scalar_model(a: f64, b: f64, sigma: f64) -> JumpAffineModel {
        JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
            vec![AffineState::new(
                DMatrix::from_element(1, 1, a),
                DVector::from_element(1, b),
                DVector::from_element(1, sigma),
            )],
            Objective::QuadraticRegulation {
                target: DVector::zeros(1),
            },
        )
    }

    #[test]
    fn noiseless_observation_is_affine() {
        let m = scalar_model(2.0, 1.0, 0.0);
        let mut rng = RngStream::new(0, 0);
        let y = observe(&m, 0, &DVector::from_element(1, 3.0), &mut rng).unwrap();
        assert_eq!(y[0], 7.0);

        let id = JumpAffineModel::new(
            MarkovChain::new(DMatrix::from_element(1, 1, 1.0), 0),
            vec![AffineState::noiseless(DMatrix::identity(2, 2), DVector::zeros(2))],
            Objective::QuadraticRegulation {
                target: DVector::zeros(2),
            },
        );
        let x = DVector::from_row_slice(&[-1.5, 0.25]);
        assert_eq!(observe(&id, 0, &x, &mut rng).unwrap(), x);
    }

    #[test]
    fn noisy_observation_mean_within_clt_band() {
        let m = scalar_model(2.0, 1.0, 0.5);
        let mut rng = RngStream::new(21, 0);
        let x = DVector::from_element(1, 0.75);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| observe(&m, 0, &x, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.5).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = scalar_model(1.0, 0.0, 0.0);
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            observe(&m, 0, &DVector::from_element(1, f64::NAN), &mut rng),
            Err(NonFiniteInput)
        );
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut rng = RngStream::new(8, 3);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn streams_differ_by_id_and_replay_by_key() {
        let mut a = RngStream::new(1, 0);
        let mut b = RngStream::new(1, 1);
        let mut c = RngStream::new(1, 0);
        let xa: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.uniform()).collect();
        assert_ne!(xa, xb);
        assert_eq!(xa, xc);
    }

    #[test]
    fn single_step_constant_policy() {
        let m = scalar_model(1.0, 0.0, 0.1);
        let mut policy = ConstantPolicy::new(DVector::from_element(1, 0.3));
        let mut rng = RngStream::new(0, 0);
        let traj = run_episode(&m, None, &mut policy, 1, &mut rng).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert_eq!(traj.records[0].input[0], 0.3);
        assert_eq!(traj.records[0].t, 1);
    }

    #[test]
    fn zero_horizon_rejected() {
        let m = scalar_model(1.0, 0.0, 0.1);
        let mut policy = ConstantPolicy::new(DVector::from_element(1, 0.3));
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            run_episode(&m, None, &mut policy, 0, &mut rng),
            Err(EpisodeError::EmptyHorizon)
        ));
        assert!(matches!(
            run_episode(&m, None, &mut policy, MAX_HORIZON + 1, &mut rng),
            Err(EpisodeError::HorizonOverflow(_))
        ));
    }

    #[test]
    fn trace_csv_layout() {
        let m = scalar_model(1.0, 0.0, 0.0);
        let mut policy = ConstantPolicy::new(DVector::from_element(1, 2.0));
        let mut rng = RngStream::new(0, 0);
        let traj = run_episode(&m, None, &mut policy, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,s_prev,s_t,x0,y0,stage_cost,stage_regret,input_sq_err"
        );
        assert_eq!(lines.next().unwrap(), "1,1,1,2,2,4,,");
    }
}
