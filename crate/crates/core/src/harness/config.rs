//! Experiment configuration: the TOML schema, its validation and its
//! resolution into a [`JumpAffineModel`], a [`FeasibleBox`] and policy
//! specifications.
//!
//! The key names are documented in the guide chapter on configuration and
//! are considered frozen. State indices in the file are one-based.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::{generate_states, GeneratorSpec};
use crate::model::{
    AffineState, FeasibleBox, JumpAffineModel, MarkovChain, Objective, DEFAULT_RANK_TOL,
};
use crate::policies::{GainSchedule, PerturbationLaw};

/// Default number of log-spaced checkpoints for curve output.
pub const DEFAULT_CHECKPOINTS: usize = 30;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "MJSPSA_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ParseError(line {line}, column {column}): {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("ValidationError({field}): {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError::Validation {
            field: field.into(),
            message: message.to_string(),
        }
    }

    /// Offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// A scalar broadcast to every coordinate, or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn resolve(&self, dim: usize, field: &str) -> Result<DVector<f64>, ConfigError> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(DVector::from_element(dim, *v)),
            ScalarOrVec::Vector(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
            ScalarOrVec::Vector(v) => Err(ConfigError::invalid(
                field,
                format!("expected {dim} entries, got {}", v.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic,
    Revenue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    #[serde(rename = "P")]
    pub transition: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub initial_state: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSection {
    #[serde(rename = "A")]
    pub gain: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(default = "zero_noise")]
    pub noise_sigma: ScalarOrVec,
}

fn zero_noise() -> ScalarOrVec {
    ScalarOrVec::Scalar(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub objective: ObjectiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ScalarOrVec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
    pub chain: ChainSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<StateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeasibleSection {
    pub lower: ScalarOrVec,
    pub upper: ScalarOrVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub horizon: u64,
    #[serde(default = "one_u64")]
    pub replications: u64,
    #[serde(default)]
    pub seed: u64,
    pub initial_input: ScalarOrVec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_window: Option<[f64; 2]>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn one_u64() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_step_offset() -> f64 {
    10.0
}

fn default_perturbation_gain() -> f64 {
    1.0
}

/// One entry of the `[[policies]]` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Mspsa {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        /// `gamma`; exclusive with `sigma_lower`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step_gain: Option<f64>,
        /// Lower bound on the curvature eigenvalues; sets `gamma = 1 / (8 sigma_lower)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_lower: Option<f64>,
        #[serde(default = "default_step_offset")]
        step_offset: f64,
        #[serde(default = "default_perturbation_gain")]
        perturbation_gain: f64,
        #[serde(default)]
        perturbation_offset: f64,
        #[serde(default)]
        perturbation: PerturbationLaw,
    },
    GreedyLse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Oracle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
}

impl PolicySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Mspsa { .. } => "mspsa",
            PolicySpec::GreedyLse { .. } => "greedy_lse",
            PolicySpec::Oracle { .. } => "oracle",
        }
    }

    /// Configured name, falling back to the kind.
    pub fn name(&self) -> &str {
        let name = match self {
            PolicySpec::Mspsa { name, .. }
            | PolicySpec::GreedyLse { name }
            | PolicySpec::Oracle { name } => name,
        };
        name.as_deref().unwrap_or(self.kind())
    }

    /// Resolved MSPSA gains, `None` for other kinds.
    pub fn gains(&self) -> Option<GainSchedule> {
        match *self {
            PolicySpec::Mspsa {
                step_gain,
                sigma_lower,
                step_offset,
                perturbation_gain,
                perturbation_offset,
                ..
            } => {
                let gamma = step_gain
                    .or_else(|| sigma_lower.map(GainSchedule::step_gain_for_curvature_bound))?;
                Some(GainSchedule::new(gamma, step_offset, perturbation_gain, perturbation_offset))
            }
            _ => None,
        }
    }
}

/// The file as written, before resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: ModelSection,
    pub feasible: FeasibleSection,
    pub experiment: ExperimentSection,
    pub policies: Vec<PolicySpec>,
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub horizon: Option<u64>,
    pub replications: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub model: JumpAffineModel,
    pub feasible: FeasibleBox,
    pub initial_input: DVector<f64>,
    pub policies: Vec<PolicySpec>,
    pub horizon: u64,
    pub replications: u64,
    pub seed: u64,
    pub checkpoints: Vec<u64>,
    pub slope_window: (f64, f64),
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse and validate TOML text.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        Self::resolve(raw)
    }

    /// Validate a raw config.
    pub fn resolve(raw: RawConfig) -> Result<Self, ConfigError> {
        resolve(raw)
    }

    /// Canonical TOML rendering; `from_toml(to_toml())` reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.raw).expect("config is representable as TOML")
    }

    /// SHA-256 of the canonical rendering, hex encoded. The output
    /// directory is left out so the same experiment hashes the same
    /// wherever it is written.
    pub fn hash(&self) -> String {
        let mut raw = self.raw.clone();
        raw.experiment.output_dir = PathBuf::new();
        let text = toml::to_string(&raw).expect("config is representable as TOML");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Re-resolve with command-line overrides. A shorter horizon drops
    /// explicit checkpoints beyond it and keeps the horizon itself as the
    /// last checkpoint.
    pub fn with_overrides(&self, o: &Overrides) -> Result<Self, ConfigError> {
        let mut raw = self.raw.clone();
        if let Some(seed) = o.seed {
            raw.experiment.seed = seed;
        }
        if let Some(r) = o.replications {
            raw.experiment.replications = r;
        }
        if let Some(t) = o.horizon {
            raw.experiment.horizon = t;
            if let Some(cps) = raw.experiment.checkpoints.as_mut() {
                cps.retain(|&c| c <= t);
                if cps.last() != Some(&t) {
                    cps.push(t);
                }
            }
            if let Some([lo, hi]) = raw.experiment.slope_window {
                if hi > t as f64 {
                    raw.experiment.slope_window = Some([lo.min(t as f64 / 10.0), t as f64]);
                }
            }
        }
        if let Some(dir) = &o.output_dir {
            raw.experiment.output_dir = dir.clone();
        }
        resolve(raw)
    }

    /// Output directory after applying the environment override.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn rank_tol(&self) -> f64 {
        self.raw.model.rank_tol.unwrap_or(DEFAULT_RANK_TOL)
    }
}

/// Read, parse and validate a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_toml(&text)
}

fn parse_error(text: &str, err: &toml::de::Error) -> ConfigError {
    let (line, column) = match err.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ConfigError::Parse {
        line,
        column,
        message: err.message().to_string(),
    }
}

/// `count` log-spaced integers in `[1, horizon]`, deduplicated, ending at
/// `horizon`.
pub fn log_checkpoints(horizon: u64, count: usize) -> Vec<u64> {
    if horizon <= 1 || count <= 1 {
        return vec![horizon.max(1)];
    }
    let top = (horizon as f64).ln();
    let mut out: Vec<u64> = (0..count)
        .map(|k| (top * k as f64 / (count - 1) as f64).exp().round() as u64)
        .map(|v| v.clamp(1, horizon))
        .collect();
    out.dedup();
    if out.last() != Some(&horizon) {
        out.push(horizon);
    }
    out
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let m = &raw.model;
    let k = m.chain.transition.len();
    if k == 0 {
        return Err(ConfigError::invalid("model.chain.P", "transition matrix is empty"));
    }
    for (i, row) in m.chain.transition.iter().enumerate() {
        if row.len() != k {
            return Err(ConfigError::invalid(
                format!("chain.P.row{}", i + 1),
                format!("expected {k} entries, got {}", row.len()),
            ));
        }
    }
    if m.chain.initial_state == 0 || m.chain.initial_state > k {
        return Err(ConfigError::invalid(
            "model.chain.initial_state",
            format!("must be in 1..={k}"),
        ));
    }
    let transition = DMatrix::from_fn(k, k, |i, j| m.chain.transition[i][j]);
    let chain = MarkovChain::new(transition, m.chain.initial_state - 1);

    let f = &raw.feasible;
    let n_hint = match (&f.lower, &f.upper) {
        (ScalarOrVec::Vector(v), _) | (_, ScalarOrVec::Vector(v)) => Some(v.len()),
        _ => None,
    };

    let states = match (&m.generator, m.states.is_empty()) {
        (Some(_), false) => {
            return Err(ConfigError::invalid(
                "model",
                "give either [[model.states]] or [model.generator], not both",
            ))
        }
        (None, true) => {
            return Err(ConfigError::invalid("model.states", "no states and no generator"))
        }
        (None, false) => explicit_states(&m.states)?,
        (Some(gen), true) => {
            let n = gen.dim;
            let lower = f.lower.resolve(n, "feasible.lower")?;
            let upper = f.upper.resolve(n, "feasible.upper")?;
            let feasible = FeasibleBox::new(lower, upper)
                .map_err(|r| ConfigError::invalid("feasible", r))?;
            let target = match (m.objective, &m.target) {
                (ObjectiveKind::Quadratic, Some(t)) => Some(t.resolve(n, "model.target")?),
                _ => None,
            };
            generate_states(gen, &chain, m.objective, target.as_ref(), &feasible)
                .map_err(|e| ConfigError::invalid("model.generator", e))?
        }
    };
    if states.len() != k {
        return Err(ConfigError::invalid(
            "model.states",
            format!("{} states given for a {k}-state chain", states.len()),
        ));
    }
    let out_dim = states[0].gain.nrows();
    let in_dim = states[0].gain.ncols();
    if let Some(nh) = n_hint {
        if nh != in_dim {
            return Err(ConfigError::invalid(
                "feasible",
                format!("box has {nh} coordinates, inputs have {in_dim}"),
            ));
        }
    }

    let objective = match m.objective {
        ObjectiveKind::Quadratic => {
            let t = m
                .target
                .as_ref()
                .ok_or_else(|| ConfigError::invalid("model.target", "quadratic objective needs a target"))?;
            Objective::QuadraticRegulation {
                target: t.resolve(out_dim, "model.target")?,
            }
        }
        ObjectiveKind::Revenue => {
            if m.target.is_some() {
                return Err(ConfigError::invalid("model.target", "revenue objective takes no target"));
            }
            Objective::RevenueMaximization
        }
    };

    let feasible = FeasibleBox::new(
        f.lower.resolve(in_dim, "feasible.lower")?,
        f.upper.resolve(in_dim, "feasible.upper")?,
    )
    .map_err(|r| ConfigError::invalid("feasible", r))?;

    let rank_tol = m.rank_tol.unwrap_or(DEFAULT_RANK_TOL);
    if !(rank_tol > 0.0) {
        return Err(ConfigError::invalid("model.rank_tol", "must be positive"));
    }
    let model = JumpAffineModel::new(chain, states, objective)
        .validate(&feasible, rank_tol)
        .map_err(|report| {
            let field = report.violations[0].field_path();
            ConfigError::invalid(field, report)
        })?;

    let e = &raw.experiment;
    if e.horizon == 0 {
        return Err(ConfigError::invalid("experiment.horizon", "must be at least 1"));
    }
    if e.replications == 0 {
        return Err(ConfigError::invalid("experiment.replications", "must be at least 1"));
    }
    let initial_input = e.initial_input.resolve(in_dim, "experiment.initial_input")?;
    if !feasible.contains(&initial_input) {
        return Err(ConfigError::invalid(
            "experiment.initial_input",
            "initial input lies outside the feasible box",
        ));
    }
    let checkpoints = match &e.checkpoints {
        Some(c) => {
            if c.is_empty() {
                return Err(ConfigError::invalid("experiment.checkpoints", "empty checkpoint grid"));
            }
            if c.iter().any(|&v| v == 0 || v > e.horizon) {
                return Err(ConfigError::invalid(
                    "experiment.checkpoints",
                    format!("checkpoints must lie in [1, {}]", e.horizon),
                ));
            }
            if c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ConfigError::invalid(
                    "experiment.checkpoints",
                    "checkpoints must be strictly increasing",
                ));
            }
            c.clone()
        }
        None => log_checkpoints(e.horizon, DEFAULT_CHECKPOINTS),
    };
    let slope_window = match e.slope_window {
        Some([lo, hi]) => {
            if !(lo > 0.0 && lo < hi && hi <= e.horizon as f64) {
                return Err(ConfigError::invalid(
                    "experiment.slope_window",
                    "need 0 < lo < hi <= horizon",
                ));
            }
            (lo, hi)
        }
        None => (e.horizon as f64 / 10.0, e.horizon as f64),
    };

    if raw.policies.is_empty() {
        return Err(ConfigError::invalid("policies", "no policies configured"));
    }
    for (idx, p) in raw.policies.iter().enumerate() {
        let field = format!("policies[{}]", idx + 1);
        if raw.policies[..idx].iter().any(|q| q.name() == p.name()) {
            return Err(ConfigError::invalid(field, format!("duplicate policy name {:?}", p.name())));
        }
        if !p
            .name()
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(ConfigError::invalid(field, "names may only use [A-Za-z0-9_-]"));
        }
        if let PolicySpec::Mspsa {
            step_gain,
            sigma_lower,
            ..
        } = p
        {
            match (step_gain, sigma_lower) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::invalid(field, "give step_gain or sigma_lower, not both"))
                }
                (None, None) => {
                    return Err(ConfigError::invalid(field, "mspsa needs step_gain or sigma_lower"))
                }
                (None, Some(s)) if !(*s > 0.0) => {
                    return Err(ConfigError::invalid(format!("{field}.sigma_lower"), "must be positive"))
                }
                _ => {}
            }
            let gains = p.gains().expect("mspsa gains");
            if !gains.is_valid() {
                return Err(ConfigError::invalid(
                    field,
                    "gains must be positive and offsets non-negative",
                ));
            }
        }
    }

    Ok(ExperimentConfig {
        model,
        feasible,
        initial_input,
        policies: raw.policies.clone(),
        horizon: e.horizon,
        replications: e.replications,
        seed: e.seed,
        checkpoints,
        slope_window,
        output_dir: e.output_dir.clone(),
        raw,
    })
}

fn explicit_states(states: &[StateSection]) -> Result<Vec<AffineState>, ConfigError> {
    states
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            let field = format!("model.states[{}]", idx + 1);
            let rows = s.gain.len();
            let cols = s.gain.first().map_or(0, Vec::len);
            if rows == 0 || cols == 0 || s.gain.iter().any(|r| r.len() != cols) {
                return Err(ConfigError::invalid(format!("{field}.A"), "A must be a non-empty rectangular matrix"));
            }
            if s.b.len() != rows {
                return Err(ConfigError::invalid(
                    format!("{field}.b"),
                    format!("expected {rows} entries, got {}", s.b.len()),
                ));
            }
            let gain = DMatrix::from_fn(rows, cols, |i, j| s.gain[i][j]);
            let noise = s.noise_sigma.resolve(rows, &format!("{field}.noise_sigma"))?;
            Ok(AffineState::new(gain, DVector::from_column_slice(&s.b), noise))
        })
        .collect()
}
