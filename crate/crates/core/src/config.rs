//! JSON study configuration and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{hypothesis_table, theoretical_nu, HypothesisRow, IncrementSampling, RateParams, StudySetup};
use crate::drift::HolderDriftSpec;
use crate::noise::MAX_FINE_LEVEL;
use crate::scheme::{InitialData, SchemeConfig};
use crate::spectral::{SpectralOperator, TraceVerdict};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSection {
    /// `λ_i = i²`.
    Heat { n_max: usize },
    PowerLaw { n_max: usize, exponent: f64 },
    Explicit { eigenvalues: Vec<f64> },
}

impl OperatorSection {
    pub fn build(&self) -> Result<SpectralOperator, ConfigError> {
        let op = match self {
            OperatorSection::Heat { n_max } => SpectralOperator::heat(*n_max),
            OperatorSection::PowerLaw { n_max, exponent } => SpectralOperator::power_law(*n_max, *exponent),
            OperatorSection::Explicit { eigenvalues } => SpectralOperator::from_eigenvalues(eigenvalues.clone()),
        };
        op.map_err(|e| ConfigError::Invalid(format!("operator: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSection {
    pub seed: u64,
    /// Level of the noise lattice; the finest step is `T / 2^L`.
    #[serde(rename = "L")]
    pub level: u32,
    pub n_modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Temporal,
    Spatial,
    Increment,
    Kolmogorov,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KolmogorovSection {
    #[serde(default = "default_t")]
    pub t: f64,
    /// 1-based modes for the gradient decay check.
    #[serde(default = "default_decay_modes")]
    pub modes: Vec<usize>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_time_nodes")]
    pub time_nodes: usize,
}

fn default_t() -> f64 {
    0.5
}
fn default_decay_modes() -> Vec<usize> {
    vec![1, 4, 16]
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0, 10.0, 100.0]
}
fn default_depth() -> usize {
    1
}
fn default_dims() -> usize {
    3
}
fn default_time_nodes() -> usize {
    32
}
fn default_horizon() -> f64 {
    1.0
}

impl Default for KolmogorovSection {
    fn default() -> Self {
        Self {
            t: default_t(),
            modes: default_decay_modes(),
            lambdas: default_lambdas(),
            depth: default_depth(),
            dims: default_dims(),
            time_nodes: default_time_nodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySection {
    pub kind: StudyKind,
    /// Level ladder for temporal and increment studies.
    #[serde(default)]
    pub levels: Vec<u32>,
    /// Mode-count ladder for spatial studies.
    #[serde(default)]
    pub modes: Vec<usize>,
    #[serde(rename = "M")]
    pub m_paths: usize,
    /// Temporal reference level; defaults to `noise.L`.
    #[serde(default)]
    pub reference_level: Option<u32>,
    /// Spatial reference dimension; defaults to `noise.n_modes`.
    #[serde(default)]
    pub reference_modes: Option<usize>,
    /// Common step level for spatial studies and simulation; defaults to `noise.L`.
    #[serde(default)]
    pub level: Option<u32>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub increment: Option<IncrementSampling>,
    #[serde(default)]
    pub kolmogorov: Option<KolmogorovSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub directory: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub operator: OperatorSection,
    pub drift: HolderDriftSpec,
    pub rate_params: RateParams,
    pub initial: InitialData,
    pub noise: NoiseSection,
    pub study: StudySection,
    pub output: OutputSection,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses without validating.
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    /// Parses and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hypotheses(&self) -> Result<Vec<HypothesisRow>, ConfigError> {
        let op = self.operator.build()?;
        let domain = self.initial.domain_check(&op);
        Ok(hypothesis_table(&op, &self.rate_params, Some((domain.partial_sum, domain.verdict))))
    }

    /// Structural checks first, then every hypothesis of the convergence theorem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let op = self.operator.build()?;
        self.drift.validate().map_err(|e| ConfigError::Invalid(format!("drift: {e}")))?;
        if self.rate_params.beta != self.drift.beta || self.rate_params.epsilon != self.drift.epsilon {
            return invalid(format!(
                "rate_params (β = {}, ε = {}) do not match the drift (β = {}, ε = {})",
                self.rate_params.beta, self.rate_params.epsilon, self.drift.beta, self.drift.epsilon
            ));
        }
        if !(self.study.horizon > 0.0 && self.study.horizon.is_finite()) {
            return invalid(format!("horizon {} must be positive", self.study.horizon));
        }
        let n = self.noise;
        if n.level > MAX_FINE_LEVEL {
            return invalid(format!("noise level L = {} exceeds {MAX_FINE_LEVEL}", n.level));
        }
        if n.n_modes == 0 || n.n_modes > op.n_max() {
            return invalid(format!("noise n_modes = {} outside 1..={}", n.n_modes, op.n_max()));
        }
        if self.study.m_paths < 2 {
            return invalid(format!("M = {} paths, at least 2 required", self.study.m_paths));
        }
        self.validate_study(&op)?;

        theoretical_nu(&self.rate_params).map_err(|e| ConfigError::Hypothesis(e.to_string()))?;
        let trace = op
            .check_trace_condition(self.rate_params.alpha)
            .map_err(|e| ConfigError::Hypothesis(e.to_string()))?;
        if trace.verdict != TraceVerdict::Converges {
            return Err(ConfigError::Hypothesis(format!(
                "trace condition fails for α = {} ({:?})",
                self.rate_params.alpha, trace.verdict
            )));
        }
        if self.initial.domain_check(&op).verdict == TraceVerdict::Diverges {
            return Err(ConfigError::Hypothesis("x ∉ D(A)".into()));
        }
        Ok(())
    }

    fn validate_study(&self, op: &SpectralOperator) -> Result<(), ConfigError> {
        let s = &self.study;
        let l = self.noise.level;
        let increasing = |v: &[u64]| v.windows(2).all(|w| w[0] < w[1]);
        match s.kind {
            StudyKind::Temporal | StudyKind::Increment => {
                if s.levels.len() < 2 {
                    return invalid(format!("level ladder needs at least 2 entries, got {}", s.levels.len()));
                }
                if !increasing(&s.levels.iter().map(|v| *v as u64).collect::<Vec<_>>()) {
                    return invalid("level ladder must be strictly increasing");
                }
                let top = *s.levels.last().unwrap();
                if s.kind == StudyKind::Temporal {
                    let r = self.reference_level();
                    if r > l || top >= r {
                        return invalid(format!("levels must stay below the reference level {r} ≤ L = {l}"));
                    }
                } else if top >= l {
                    return invalid(format!("increment levels must stay below L = {l}"));
                }
            }
            StudyKind::Spatial => {
                if s.modes.len() < 2 {
                    return invalid(format!("mode ladder needs at least 2 entries, got {}", s.modes.len()));
                }
                if !increasing(&s.modes.iter().map(|v| *v as u64).collect::<Vec<_>>()) || s.modes[0] == 0 {
                    return invalid("mode ladder must be positive and strictly increasing");
                }
                let r = self.reference_modes();
                if r > self.noise.n_modes || r > op.n_max() || *s.modes.last().unwrap() >= r {
                    return invalid(format!("modes must stay below the reference {r} ≤ noise.n_modes"));
                }
                if self.step_level() > l {
                    return invalid(format!("step level {} exceeds L = {l}", self.step_level()));
                }
            }
            StudyKind::Kolmogorov => {
                let k = s.kolmogorov.clone().unwrap_or_default();
                if k.modes.is_empty() || k.lambdas.is_empty() {
                    return invalid("kolmogorov mode and λ lists must be non-empty");
                }
                let top = k.modes.iter().copied().max().unwrap_or(0);
                if k.modes.contains(&0) || top > op.n_max() || k.dims == 0 || k.dims > op.n_max() {
                    return invalid("kolmogorov modes and dims must lie in 1..=n_max");
                }
                if !(k.t > 0.0 && k.t < s.horizon) {
                    return invalid(format!("kolmogorov t = {} must lie in (0, T)", k.t));
                }
            }
            StudyKind::Validate => {}
        }
        Ok(())
    }

    pub fn reference_level(&self) -> u32 {
        self.study.reference_level.unwrap_or(self.noise.level)
    }

    pub fn reference_modes(&self) -> usize {
        self.study.reference_modes.unwrap_or(self.noise.n_modes)
    }

    pub fn step_level(&self) -> u32 {
        self.study.level.unwrap_or(self.noise.level)
    }

    /// Scheme configuration at the given resolution.
    pub fn scheme(&self, level: u32, n_modes: usize) -> Result<SchemeConfig, ConfigError> {
        Ok(SchemeConfig {
            operator: self.operator.build()?,
            drift: self.drift.clone(),
            horizon: self.study.horizon,
            level,
            n_modes,
            initial: self.initial.clone(),
        })
    }

    pub fn setup(&self, workers: Option<usize>) -> Result<StudySetup, ConfigError> {
        Ok(StudySetup {
            base: self.scheme(0, self.noise.n_modes)?,
            rates: self.rate_params,
            seed: self.noise.seed,
            paths: self.study.m_paths,
            workers,
            lattice_level: Some(self.noise.level),
        })
    }
}
