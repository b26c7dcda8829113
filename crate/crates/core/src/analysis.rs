//! Strong-error estimation, log-log rate fitting and the theoretical
//! exponent `ν = (ε + min(2β, αε²))/2 + α - 1`.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{NoiseError, NoiseLattice, PathNoise};
use crate::scheme::{simulate_coupled_with_noise, SchemeConfig, SchemeError, Trajectory};
use crate::spectral::{ModeVector, SpectralError, SpectralOperator, TraceVerdict};

/// Label stored in every report for how off-grid values are produced.
pub const OFF_GRID_EVALUATION: &str = "partial_exponential_step";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error("rate parameter {name} = {value} is outside {range}")]
    Range { name: &'static str, value: f64, range: &'static str },
    #[error("ν ≤ 0: ν = {nu}")]
    NuNonPositive { nu: f64 },
    #[error("ν ≥ 1/2: ν = {nu}")]
    NuTooLarge { nu: f64 },
    #[error("2β/(2-ε) = {lhs} < 1-α = {rhs}")]
    BetaConstraint { lhs: f64, rhs: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("rate fit needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("rate fit needs positive finite inputs, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("rate fit is degenerate: all resolutions coincide")]
    DegenerateFit,
    #[error("incompatible grids: {0}")]
    Grid(String),
    #[error("at least {min} Monte Carlo paths are required, got {got}")]
    TooFewPaths { min: usize, got: usize },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// `α` of the trace condition and `β, ε` of the drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl RateParams {
    pub fn validate(&self) -> Result<(), HypothesisError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.alpha) {
            return Err(HypothesisError::Range { name: "alpha", value: self.alpha, range: "(0, 1)" });
        }
        if !open_unit(self.epsilon) {
            return Err(HypothesisError::Range { name: "epsilon", value: self.epsilon, range: "(0, 1)" });
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(HypothesisError::Range { name: "beta", value: self.beta, range: "(0, ∞)" });
        }
        Ok(())
    }

    /// The formula alone, without hypothesis checks.
    pub fn nu_raw(&self) -> f64 {
        let (a, b, e) = (self.alpha, self.beta, self.epsilon);
        (e + (2.0 * b).min(a * e * e)) / 2.0 + a - 1.0
    }

    /// `(2β/(2-ε), 1-α)`; the constraint requires the first to dominate.
    pub fn beta_constraint(&self) -> (f64, f64) {
        (2.0 * self.beta / (2.0 - self.epsilon), 1.0 - self.alpha)
    }
}

/// `ν`, rejecting parameters with `ν ∉ (0, 1/2)` or `2β/(2-ε) < 1-α`.
pub fn theoretical_nu(p: &RateParams) -> Result<f64, HypothesisError> {
    p.validate()?;
    let nu = p.nu_raw();
    if nu <= 0.0 {
        return Err(HypothesisError::NuNonPositive { nu });
    }
    if nu >= 0.5 {
        return Err(HypothesisError::NuTooLarge { nu });
    }
    let (lhs, rhs) = p.beta_constraint();
    if lhs < rhs {
        return Err(HypothesisError::BetaConstraint { lhs, rhs });
    }
    Ok(nu)
}

/// Smallest `α` with `ν > 0` on the branch `2β ≥ αε²`.
pub fn alpha_threshold(epsilon: f64) -> f64 {
    (2.0 - epsilon) / (2.0 + epsilon * epsilon)
}

/// For `λ_i = i²` the trace condition forces `α < 1/2`, so `ν > 0` needs
/// `alpha_threshold(ε) < 1/2`, i.e. `ε > √3 - 1`.
pub fn heat_epsilon_threshold() -> f64 {
    3f64.sqrt() - 1.0
}

/// One row of the hypothesis table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisRow {
    pub name: &'static str,
    pub value: String,
    pub holds: bool,
    pub verdict: String,
}

/// Evaluates every hypothesis without short-circuiting.
pub fn hypothesis_table(
    op: &SpectralOperator,
    p: &RateParams,
    domain: Option<(f64, TraceVerdict)>,
) -> Vec<HypothesisRow> {
    let mut rows = Vec::new();
    match op.check_trace_condition(p.alpha) {
        Ok(report) => rows.push(HypothesisRow {
            name: "trace condition Σ λ_i^{-(1-α)} < ∞",
            value: format!("partial sum {:.6}, tail ≤ {:.3e}", report.partial_sum, report.tail_bound),
            holds: report.converges(),
            verdict: match report.verdict {
                TraceVerdict::Converges => "holds".into(),
                TraceVerdict::Diverges => "trace condition fails".into(),
                TraceVerdict::UndeterminedBeyondTruncation => "undetermined beyond truncation".into(),
            },
        }),
        Err(e) => rows.push(HypothesisRow {
            name: "trace condition Σ λ_i^{-(1-α)} < ∞",
            value: "n/a".into(),
            holds: false,
            verdict: e.to_string(),
        }),
    }
    let (lhs, rhs) = p.beta_constraint();
    rows.push(HypothesisRow {
        name: "2β/(2-ε) ≥ 1-α",
        value: format!("{lhs:.6} vs {rhs:.6}"),
        holds: lhs >= rhs,
        verdict: if lhs >= rhs { "holds".into() } else { "constraint fails".into() },
    });
    let nu = p.nu_raw();
    let nu_ok = nu > 0.0 && nu < 0.5 && p.validate().is_ok();
    rows.push(HypothesisRow {
        name: "0 < ν < 1/2",
        value: format!("ν = {nu:.6}"),
        holds: nu_ok,
        verdict: match p.validate() {
            Err(e) => e.to_string(),
            Ok(()) if nu <= 0.0 => "ν ≤ 0".into(),
            Ok(()) if nu >= 0.5 => "ν ≥ 1/2".into(),
            Ok(()) => "holds".into(),
        },
    });
    if let Some((partial, verdict)) = domain {
        let holds = verdict == TraceVerdict::Converges;
        rows.push(HypothesisRow {
            name: "x ∈ D(A)",
            value: format!("Σ λ_i² x_i² ≈ {partial:.6}"),
            holds,
            verdict: match verdict {
                TraceVerdict::Converges => "x ∈ D(A)".into(),
                TraceVerdict::Diverges => "x ∉ D(A)".into(),
                TraceVerdict::UndeterminedBeyondTruncation => "undetermined beyond truncation".into(),
            },
        });
    }
    rows
}

/// Mergeable mean and variance (Chan et al. pairwise update).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ErrorAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ErrorAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let mut acc = Self::new();
        samples.iter().for_each(|x| acc.push(*x));
        acc
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance with `n - 1` normalisation.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Left Riemann sum `Σ_{k<N} dt ‖a_k - b_k‖²` over `N + 1` grid values,
/// shorter vectors zero-padded.
pub fn integrated_sq_distance(a: &[ModeVector], b: &[ModeVector], dt: f64) -> Result<f64, AnalysisError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AnalysisError::Grid(format!("{} vs {} grid values", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a[..a.len() - 1].iter().zip(b) {
        total += x.dist_sq_padded(y);
    }
    Ok(total * dt)
}

/// `∫_0^T ‖ref(t) - approx(t)‖² dt` on the reference grid for one path,
/// evaluating the coarse scheme off its own grid by partial steps.
pub fn path_strong_error(
    reference: &Trajectory,
    approx_cfg: &SchemeConfig,
    approx: &Trajectory,
    noise: &PathNoise,
) -> Result<f64, AnalysisError> {
    if reference.horizon != approx.horizon || approx_cfg.horizon != approx.horizon {
        return Err(AnalysisError::Grid("horizons differ".into()));
    }
    if reference.level < approx.level || approx.level != approx_cfg.level {
        return Err(AnalysisError::Grid(format!(
            "reference level {} cannot refine level {}",
            reference.level, approx.level
        )));
    }
    if approx.n_modes() > reference.n_modes() {
        return Err(AnalysisError::Grid(format!(
            "{} modes exceed the reference's {}",
            approx.n_modes(),
            reference.n_modes()
        )));
    }
    let refined = if approx.level == reference.level {
        approx.values.clone()
    } else {
        approx_cfg.stepper()?.refine(approx, noise, reference.level)?
    };
    integrated_sq_distance(&reference.values, &refined, reference.delta)
}

/// Mean and standard error of per-path squared errors.
pub fn strong_error(samples: &[f64]) -> (f64, f64) {
    let acc = ErrorAccumulator::from_samples(samples);
    (acc.mean(), acc.stderr())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `log err2` on `log h`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    if let Some(&(h, e)) = points.iter().find(|(h, e)| !(*h > 0.0 && *e > 0.0 && h.is_finite() && e.is_finite())) {
        return Err(AnalysisError::NonPositive(h, e));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Ok(RateFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Temporal,
    Spatial,
    Increment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    /// Level `ℓ` for temporal and increment studies, mode count for spatial ones.
    pub resolution: usize,
    pub delta: f64,
    pub n_modes: usize,
    pub m_paths: usize,
    pub err2_mean: f64,
    pub err2_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub kind: StudyKind,
    pub rows: Vec<ReportRow>,
    pub fit: RateFit,
    pub nu_theory: f64,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub kind: StudyKind,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub nu_theory: f64,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub off_grid_evaluation: &'static str,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            kind: self.kind,
            slope: self.fit.slope,
            intercept: self.fit.intercept,
            r2: self.fit.r2,
            nu_theory: self.nu_theory,
            pass: self.pass(),
            checks: self.checks.clone(),
            off_grid_evaluation: OFF_GRID_EVALUATION,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "resolution,delta,n_modes,m_paths,err2_mean,err2_stderr")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{},{},{:e},{:e}",
                r.resolution, r.delta, r.n_modes, r.m_paths, r.err2_mean, r.err2_stderr
            )?;
        }
        Ok(())
    }
}

/// Shared settings of the Monte Carlo studies.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySetup {
    /// Operator, drift, horizon and initial data; its resolution is ignored.
    pub base: SchemeConfig,
    pub rates: RateParams,
    pub seed: u64,
    pub paths: usize,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Level of the noise lattice; `None` uses the finest level the study needs.
    pub lattice_level: Option<u32>,
}

impl StudySetup {
    fn check(&self) -> Result<f64, AnalysisError> {
        if self.paths < 2 {
            return Err(AnalysisError::TooFewPaths { min: 2, got: self.paths });
        }
        Ok(theoretical_nu(&self.rates)?)
    }

    fn lattice(&self, needed: u32, n_modes: usize) -> Result<NoiseLattice, AnalysisError> {
        let level = self.lattice_level.unwrap_or(needed);
        if level < needed {
            return Err(AnalysisError::Grid(format!("lattice level {level} is coarser than the required {needed}")));
        }
        Ok(NoiseLattice::new(self.seed, self.base.horizon, level, n_modes)?)
    }
}

/// Evaluates `f` on path ids `0..paths`, returning results in path order
/// whatever the scheduling.
pub fn run_paths<T, F>(paths: usize, workers: Option<usize>, f: F) -> Result<Vec<T>, AnalysisError>
where
    T: Send,
    F: Fn(u64) -> Result<T, AnalysisError> + Sync + Send,
{
    let job = || (0..paths as u64).into_par_iter().map(&f).collect::<Result<Vec<T>, AnalysisError>>();
    match workers {
        None => job(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| AnalysisError::Pool(e.to_string()))?
            .install(job),
    }
}

/// Per-column accumulators folded in path order.
fn reduce_columns(per_path: &[Vec<f64>], columns: usize) -> Vec<ErrorAccumulator> {
    let mut accs = vec![ErrorAccumulator::new(); columns];
    for row in per_path {
        for (acc, v) in accs.iter_mut().zip(row) {
            acc.push(*v);
        }
    }
    accs
}

fn ensure_ladder<T: PartialOrd + Copy + std::fmt::Debug>(ladder: &[T], reference: T, what: &str) -> Result<(), AnalysisError> {
    if ladder.len() < 2 {
        return Err(AnalysisError::TooFewPoints(ladder.len()));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::Grid(format!("{what} ladder {ladder:?} must be strictly increasing")));
    }
    if *ladder.last().unwrap() >= reference {
        return Err(AnalysisError::Grid(format!("{what} ladder must stay below the reference {reference:?}")));
    }
    Ok(())
}

/// Adjacent rows decrease by more than `k` combined standard errors.
fn decreasing_check(rows: &[ReportRow], k: f64) -> Check {
    let margin = rows
        .windows(2)
        .map(|w| {
            let combined = (w[0].err2_stderr.powi(2) + w[1].err2_stderr.powi(2)).sqrt();
            (w[0].err2_mean - w[1].err2_mean) / combined.max(f64::MIN_POSITIVE)
        })
        .fold(f64::INFINITY, f64::min);
    Check { name: "strictly_decreasing".into(), value: margin, threshold: k, passed: margin > k }
}

/// Coarse steps `δ ∈ {T 2^{-ℓ}}` at `n = n_ref` against the reference level,
/// all driven by the same lattice path.
pub fn temporal_study(setup: &StudySetup, levels: &[u32], reference_level: u32) -> Result<ConvergenceReport, AnalysisError> {
    let nu = setup.check()?;
    ensure_ladder(levels, reference_level, "level")?;
    let n = setup.base.n_modes;
    let lattice = setup.lattice(reference_level, n)?;
    let mut configs: Vec<SchemeConfig> = levels.iter().map(|&l| setup.base.with_resolution(l, n)).collect();
    configs.push(setup.base.with_resolution(reference_level, n));
    for c in &configs {
        c.validate_against(&lattice)?;
    }

    let per_path = run_paths(setup.paths, setup.workers, |path| {
        let noise = lattice.path(path, n)?;
        let run = simulate_coupled_with_noise(&configs, &noise)?;
        let (reference, coarse) = run.trajectories.split_last().expect("non-empty");
        coarse
            .iter()
            .zip(&configs)
            .map(|(traj, cfg)| path_strong_error(reference, cfg, traj, &noise))
            .collect::<Result<Vec<f64>, _>>()
    })?;

    let accs = reduce_columns(&per_path, levels.len());
    let rows: Vec<ReportRow> = levels
        .iter()
        .zip(&accs)
        .map(|(&l, acc)| ReportRow {
            resolution: l as usize,
            delta: lattice.delta(l),
            n_modes: n,
            m_paths: setup.paths,
            err2_mean: acc.mean(),
            err2_stderr: acc.stderr(),
        })
        .collect();
    let fit = fit_rate(&rows.iter().map(|r| (r.delta, r.err2_mean)).collect::<Vec<_>>())?;
    let checks = vec![
        decreasing_check(&rows, 2.0),
        Check { name: "slope".into(), value: fit.slope, threshold: nu - 0.05, passed: fit.slope >= nu - 0.05 },
        Check { name: "r2".into(), value: fit.r2, threshold: 0.9, passed: fit.r2 >= 0.9 },
    ];
    Ok(ConvergenceReport { kind: StudyKind::Temporal, rows, fit, nu_theory: nu, checks })
}

/// Galerkin dimensions `n` at a common step against `n_ref` modes; slope is
/// fitted against `log λ_n`.
pub fn spatial_study(
    setup: &StudySetup,
    modes: &[usize],
    reference_modes: usize,
    level: u32,
) -> Result<ConvergenceReport, AnalysisError> {
    let nu = setup.check()?;
    ensure_ladder(modes, reference_modes, "mode")?;
    let lattice = setup.lattice(level, reference_modes)?;
    let mut configs: Vec<SchemeConfig> = modes.iter().map(|&m| setup.base.with_resolution(level, m)).collect();
    configs.push(setup.base.with_resolution(level, reference_modes));
    for c in &configs {
        c.validate_against(&lattice)?;
    }

    let per_path = run_paths(setup.paths, setup.workers, |path| {
        let noise = lattice.path(path, reference_modes)?;
        let run = simulate_coupled_with_noise(&configs, &noise)?;
        let (reference, coarse) = run.trajectories.split_last().expect("non-empty");
        coarse
            .iter()
            .zip(&configs)
            .map(|(traj, cfg)| path_strong_error(reference, cfg, traj, &noise))
            .collect::<Result<Vec<f64>, _>>()
    })?;

    let accs = reduce_columns(&per_path, modes.len());
    let rows: Vec<ReportRow> = modes
        .iter()
        .zip(&accs)
        .map(|(&m, acc)| ReportRow {
            resolution: m,
            delta: lattice.delta(level),
            n_modes: m,
            m_paths: setup.paths,
            err2_mean: acc.mean(),
            err2_stderr: acc.stderr(),
        })
        .collect();
    let points: Vec<(f64, f64)> =
        rows.iter().map(|r| (setup.base.operator.eigenvalue(r.n_modes - 1), r.err2_mean)).collect();
    let fit = fit_rate(&points)?;
    let decreasing = rows.windows(2).all(|w| w[1].err2_mean < w[0].err2_mean);
    let checks = vec![
        Check {
            name: "decreasing".into(),
            value: if decreasing { 1.0 } else { 0.0 },
            threshold: 1.0,
            passed: decreasing,
        },
        Check { name: "slope".into(), value: fit.slope, threshold: -(nu - 0.05), passed: fit.slope <= -(nu - 0.05) },
    ];
    Ok(ConvergenceReport { kind: StudyKind::Spatial, rows, fit, nu_theory: nu, checks })
}

/// Where `E‖Y_t - Y_{t_δ}‖²` is sampled within each level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementSampling {
    /// Times in `[0, T)`; each selects the step containing it.
    pub anchors: Vec<f64>,
    /// Position within the step as a fraction of `δ`.
    pub offset: f64,
}

impl Default for IncrementSampling {
    fn default() -> Self {
        Self { anchors: vec![0.125, 0.375, 0.625, 0.875], offset: 0.5 }
    }
}

impl IncrementSampling {
    /// Lattice level needed so every offset lands on a fine point.
    fn fine_level(&self, max_level: u32) -> Result<u32, AnalysisError> {
        if !(0.0..=1.0).contains(&self.offset) {
            return Err(AnalysisError::Grid(format!("offset {} outside [0, 1]", self.offset)));
        }
        if self.anchors.is_empty() {
            return Err(AnalysisError::Grid("no sample anchors".into()));
        }
        for extra in 0..=20u32 {
            let scaled = self.offset * (1u64 << extra) as f64;
            if scaled.fract() == 0.0 {
                return Ok(max_level + extra);
            }
        }
        Err(AnalysisError::Grid(format!("offset {} is not a dyadic fraction", self.offset)))
    }

    fn step_index(&self, anchor: f64, horizon: f64, steps: usize) -> Result<usize, AnalysisError> {
        if !(0.0..horizon).contains(&anchor) {
            return Err(AnalysisError::Grid(format!("anchor {anchor} outside [0, {horizon})")));
        }
        Ok(((anchor / horizon * steps as f64).floor() as usize).min(steps - 1))
    }
}

/// `S(δ) = max over sampled t of E‖Y_t - Y_{t_δ}‖²` per level, with `n` taken
/// from the base configuration.
pub fn increment_study(
    setup: &StudySetup,
    levels: &[u32],
    sampling: &IncrementSampling,
) -> Result<ConvergenceReport, AnalysisError> {
    let nu = setup.check()?;
    if levels.len() < 2 {
        return Err(AnalysisError::TooFewPoints(levels.len()));
    }
    let max_level = *levels.iter().max().expect("non-empty");
    let fine = sampling.fine_level(max_level)?;
    let n = setup.base.n_modes;
    let lattice = setup.lattice(fine, n)?;
    let configs: Vec<SchemeConfig> = levels.iter().map(|&l| setup.base.with_resolution(l, n)).collect();
    let mut steps_per_level = Vec::new();
    for c in &configs {
        c.validate_against(&lattice)?;
        let ks = sampling
            .anchors
            .iter()
            .map(|&a| sampling.step_index(a, c.horizon, c.steps()))
            .collect::<Result<Vec<_>, _>>()?;
        steps_per_level.push(ks);
    }
    let n_anchor = sampling.anchors.len();

    let per_path = run_paths(setup.paths, setup.workers, |path| {
        let noise = lattice.path(path, n)?;
        let mut out = Vec::with_capacity(configs.len() * n_anchor);
        for (cfg, ks) in configs.iter().zip(&steps_per_level) {
            let traj = cfg.simulate_with_noise(&noise)?;
            let stepper = cfg.stepper()?;
            let span = 1usize << (lattice.fine_level() - cfg.level);
            let sub = (sampling.offset * span as f64) as usize;
            let tau = sampling.offset * cfg.delta();
            for &k in ks {
                let dw = noise.partial_vector(n, k * span, k * span + sub);
                let y_t = stepper.substep(k, &traj.values[k], tau, &dw)?;
                out.push(y_t.dist_sq_padded(&traj.values[k]));
            }
        }
        Ok(out)
    })?;

    let accs = reduce_columns(&per_path, configs.len() * n_anchor);
    let rows: Vec<ReportRow> = configs
        .iter()
        .enumerate()
        .map(|(j, cfg)| {
            let best = accs[j * n_anchor..(j + 1) * n_anchor]
                .iter()
                .copied()
                .fold(None::<ErrorAccumulator>, |m, a| match m {
                    Some(b) if b.mean() >= a.mean() => Some(b),
                    _ => Some(a),
                })
                .expect("anchors non-empty");
            ReportRow {
                resolution: cfg.level as usize,
                delta: cfg.delta(),
                n_modes: n,
                m_paths: setup.paths,
                err2_mean: best.mean(),
                err2_stderr: best.stderr(),
            }
        })
        .collect();
    let fit = fit_rate(&rows.iter().map(|r| (r.delta, r.err2_mean)).collect::<Vec<_>>())?;
    let gate = setup.rates.alpha - 0.1;
    let checks = vec![Check { name: "slope".into(), value: fit.slope, threshold: gate, passed: fit.slope >= gate }];
    Ok(ConvergenceReport { kind: StudyKind::Increment, rows, fit, nu_theory: nu, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{DriftKind, HolderDriftSpec, TimeModulation};
    use crate::scheme::InitialData;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn params(alpha: f64, beta: f64, epsilon: f64) -> RateParams {
        RateParams { alpha, beta, epsilon }
    }

    fn base(n: usize, amplitude: f64) -> SchemeConfig {
        SchemeConfig {
            operator: SpectralOperator::heat(128).unwrap(),
            drift: HolderDriftSpec {
                kind: DriftKind::Diagonal,
                beta: 0.5,
                epsilon: 0.9,
                amplitude,
                time_mod: TimeModulation::Cosine { period: std::f64::consts::TAU },
                cap: 1.0,
            },
            horizon: 1.0,
            level: 0,
            n_modes: n,
            initial: InitialData::PowerDecay { q: 3.0 },
        }
    }

    #[test]
    fn nu_examples() {
        let nu = theoretical_nu(&params(0.45, 0.5, 0.9)).unwrap();
        assert!((nu - 0.08225).abs() < 1e-12);
        assert!(matches!(theoretical_nu(&params(0.49, 1.0, 0.7)), Err(HypothesisError::NuNonPositive { .. })));
        let err = theoretical_nu(&params(0.45, 0.5, 0.7)).unwrap_err();
        assert!(err.to_string().starts_with("ν ≤ 0"));
        assert!((params(0.45, 0.5, 0.7).nu_raw() + 0.08975).abs() < 1e-12);
        assert!(matches!(theoretical_nu(&params(0.9, 5.0, 0.95)), Err(HypothesisError::NuTooLarge { .. })));
        assert!(matches!(theoretical_nu(&params(0.45, 0.001, 0.9)), Err(HypothesisError::NuNonPositive { .. })));
        // ν > 0 but the β constraint fails.
        assert!(matches!(theoretical_nu(&params(0.75, 0.1, 0.9)), Err(HypothesisError::BetaConstraint { .. })));
        assert!(matches!(theoretical_nu(&params(1.2, 0.5, 0.9)), Err(HypothesisError::Range { .. })));
    }

    #[test]
    fn heat_threshold() {
        let eps = heat_epsilon_threshold();
        assert!((eps - 0.7320508075688772).abs() < 1e-15);
        assert!((alpha_threshold(eps) - 0.5).abs() < 1e-12);
        // Just above the threshold some α < 1/2 gives ν > 0, just below none does.
        let above = eps + 1e-3;
        let a = alpha_threshold(above) + 1e-6;
        assert!(a < 0.5 && params(a, 10.0, above).nu_raw() > 0.0);
        let below = eps - 1e-3;
        assert!(params(0.5 - 1e-9, 10.0, below).nu_raw() < 0.0);
    }

    #[test]
    fn nu_monotone_on_grid() {
        let beta = 10.0;
        for ia in 1..50 {
            for ie in 1..50 {
                let (a, e) = (ia as f64 / 50.0, ie as f64 / 50.0);
                let nu = params(a, beta, e).nu_raw();
                assert!(params(a + 0.02, beta, e).nu_raw() >= nu);
                assert!(params(a, beta, e + 0.02).nu_raw() >= nu);
            }
        }
    }

    #[test]
    fn hypothesis_rows() {
        let heat = SpectralOperator::heat(64).unwrap();
        let rows = hypothesis_table(&heat, &params(0.45, 0.5, 0.9), Some((1.0, TraceVerdict::Converges)));
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.holds));
        assert!(rows[2].value.contains("0.082250"));
        let rows = hypothesis_table(&heat, &params(0.5, 0.5, 0.9), Some((1.0, TraceVerdict::Diverges)));
        assert!(!rows[0].holds && rows[0].verdict == "trace condition fails");
        assert_eq!(rows[3].verdict, "x ∉ D(A)");
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let xs: Vec<f64> = (0..101).map(|i| ((i * 37) % 17) as f64 * 0.3 + 1.0).collect();
        let whole = ErrorAccumulator::from_samples(&xs);
        let mut left = ErrorAccumulator::from_samples(&xs[..40]);
        left.merge(&ErrorAccumulator::from_samples(&xs[40..]));
        assert_eq!(whole.count(), left.count());
        assert!((whole.mean() - left.mean()).abs() < 1e-12);
        assert!((whole.variance() - left.variance()).abs() < 1e-12);
        let mean = xs.iter().sum::<f64>() / 101.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0;
        assert!((whole.variance() - var).abs() < 1e-12);
        let mut empty = ErrorAccumulator::new();
        empty.merge(&whole);
        assert_eq!(empty, whole);
    }

    #[test]
    fn fit_examples() {
        let pts: Vec<(f64, f64)> = (0..6).map(|j| (2f64.powi(-j), 2f64.powi(-j).powf(0.5))).collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let fit = fit_rate(&[(1.0, 1.0), (0.5, 0.25)]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!(matches!(fit_rate(&[(1.0, 1.0)]), Err(AnalysisError::TooFewPoints(1))));
        assert!(matches!(fit_rate(&[(1.0, 0.0), (0.5, 1.0)]), Err(AnalysisError::NonPositive(..))));
        assert!(matches!(fit_rate(&[(1.0, 2.0), (1.0, 1.0)]), Err(AnalysisError::DegenerateFit)));
    }

    #[test]
    fn fit_robust_to_multiplicative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sigma in [0.01, 0.05, 0.1] {
            let normal = Normal::new(0.0, sigma).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let pts: Vec<(f64, f64)> = (0..6)
                    .map(|j| {
                        let h = 2f64.powi(-4 - j);
                        (h, h.powf(0.5) * Distribution::<f64>::sample(&normal, &mut rng).exp())
                    })
                    .collect();
                worst = worst.max((fit_rate(&pts).unwrap().slope - 0.5).abs());
            }
            // Slope standard error is σ / sqrt(Σ (x - x̄)²) with Σ = 17.5 ln²2.
            let se = sigma / (17.5f64.sqrt() * 2f64.ln());
            assert!(worst < 5.0 * se, "sigma {sigma}: worst {worst}");
        }
    }

    proptest! {
        #[test]
        fn slope_invariant_under_scaling(c in 1e-6f64..1e6, e0 in 0.1f64..10.0, e1 in 0.1f64..10.0, e2 in 0.1f64..10.0) {
            let pts = [(1.0, e0), (0.5, e1), (0.25, e2)];
            let scaled: Vec<(f64, f64)> = pts.iter().map(|(h, e)| (*h, e * c)).collect();
            let a = fit_rate(&pts).unwrap();
            let b = fit_rate(&scaled).unwrap();
            prop_assert!((a.slope - b.slope).abs() < 1e-9);
            prop_assert!((b.intercept - a.intercept - c.ln()).abs() < 1e-9);
        }

        #[test]
        fn sq_distance_symmetric_and_truncation_monotone(
            a in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 5),
            b in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 5),
            m in 0usize..6,
        ) {
            let va: Vec<ModeVector> = a.into_iter().map(|v| ModeVector::new(v).unwrap()).collect();
            let vb: Vec<ModeVector> = b.into_iter().map(|v| ModeVector::new(v).unwrap()).collect();
            let d = integrated_sq_distance(&va, &vb, 0.25).unwrap();
            prop_assert_eq!(d, integrated_sq_distance(&vb, &va, 0.25).unwrap());
            let pa: Vec<ModeVector> = va.iter().map(|v| v.project(m)).collect();
            let pb: Vec<ModeVector> = vb.iter().map(|v| v.project(m)).collect();
            prop_assert!(integrated_sq_distance(&pa, &pb, 0.25).unwrap() <= d);
        }
    }

    #[test]
    fn constant_difference_integrates_to_horizon_times_norm() {
        let v = ModeVector::new(vec![0.3, -0.4]).unwrap();
        let a: Vec<ModeVector> = (0..=16).map(|_| ModeVector::zeros(2)).collect();
        let b: Vec<ModeVector> = (0..=16).map(|_| v.clone()).collect();
        let d = integrated_sq_distance(&a, &b, 1.0 / 16.0).unwrap();
        assert!((d - 0.25).abs() < 1e-15);
        assert_eq!(integrated_sq_distance(&a, &a, 0.1).unwrap(), 0.0);
        assert!(integrated_sq_distance(&a, &b[..3], 0.1).is_err());
    }

    #[test]
    fn strong_error_of_self_is_zero() {
        let lattice = NoiseLattice::new(4, 1.0, 8, 16).unwrap();
        let cfg = base(16, 1.0).with_resolution(8, 16);
        let noise = lattice.path(0, 16).unwrap();
        let traj = cfg.simulate_with_noise(&noise).unwrap();
        assert_eq!(path_strong_error(&traj, &cfg, &traj, &noise).unwrap(), 0.0);
        let coarse_cfg = cfg.with_resolution(4, 8);
        let coarse = coarse_cfg.simulate_with_noise(&noise).unwrap();
        assert!(path_strong_error(&traj, &coarse_cfg, &coarse, &noise).unwrap() > 0.0);
        // Reference must be the finer grid.
        assert!(path_strong_error(&coarse, &cfg, &traj, &noise).is_err());
    }

    #[test]
    fn coarse_scheme_matches_reference_without_noise_and_drift() {
        let lattice = NoiseLattice::new(4, 1.0, 8, 16).unwrap().with_scale(0.0);
        let cfg = base(16, 0.0).with_resolution(8, 16);
        let noise = lattice.path(0, 16).unwrap();
        let reference = cfg.simulate_with_noise(&noise).unwrap();
        let coarse_cfg = cfg.with_resolution(3, 16);
        let coarse = coarse_cfg.simulate_with_noise(&noise).unwrap();
        // Pure semigroup flow: the partial-step interpolant is exact.
        assert!(path_strong_error(&reference, &coarse_cfg, &coarse, &noise).unwrap() < 1e-28);
    }

    fn setup(n: usize, paths: usize, workers: Option<usize>) -> StudySetup {
        StudySetup { base: base(n, 1.0), rates: params(0.45, 0.5, 0.9), seed: 17, paths, workers, lattice_level: None }
    }

    #[test]
    fn study_results_independent_of_worker_count() {
        let a = temporal_study(&setup(8, 12, Some(1)), &[2, 3, 4], 6).unwrap();
        let b = temporal_study(&setup(8, 12, Some(3)), &[2, 3, 4], 6).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_csv(&mut buf_a).unwrap();
        b.write_csv(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        assert!(String::from_utf8(buf_a).unwrap().starts_with("resolution,delta,n_modes,m_paths,err2_mean,err2_stderr\n"));
        assert_eq!(a.nu_theory, theoretical_nu(&params(0.45, 0.5, 0.9)).unwrap());
        assert!(a.rows.windows(2).all(|w| w[0].resolution < w[1].resolution));
    }

    #[test]
    fn study_ladders_validated() {
        let s = setup(8, 4, None);
        assert!(matches!(temporal_study(&s, &[], 6), Err(AnalysisError::TooFewPoints(0))));
        assert!(matches!(temporal_study(&s, &[3, 2], 6), Err(AnalysisError::Grid(_))));
        assert!(matches!(temporal_study(&s, &[3, 6], 6), Err(AnalysisError::Grid(_))));
        assert!(matches!(spatial_study(&s, &[4, 8], 8, 4), Err(AnalysisError::Grid(_))));
        assert!(matches!(temporal_study(&setup(8, 1, None), &[2, 3], 6), Err(AnalysisError::TooFewPaths { .. })));
        let bad = StudySetup { rates: params(0.45, 0.5, 0.7), ..s };
        assert!(matches!(temporal_study(&bad, &[2, 3], 6), Err(AnalysisError::Hypothesis(_))));
    }

    #[test]
    fn increment_closed_form_without_noise() {
        // Y_t - Y_{t_δ} = (e^{τA} - I) e^{t_δ A} x exactly.
        let mut s = setup(8, 2, Some(1));
        s.base.drift.amplitude = 0.0;
        let sampling = IncrementSampling { anchors: vec![0.3, 0.7], offset: 0.5 };
        let levels = [2, 3, 4];
        let fine = sampling.fine_level(4).unwrap();
        assert_eq!(fine, 5);
        let lattice = NoiseLattice::new(s.seed, 1.0, fine, 8).unwrap().with_scale(0.0);
        for &l in &levels {
            let cfg = s.base.with_resolution(l, 8);
            let noise = lattice.path(0, 8).unwrap();
            let traj = cfg.simulate_with_noise(&noise).unwrap();
            let tau = 0.5 * cfg.delta();
            let mut best: f64 = 0.0;
            for &a in &sampling.anchors {
                let k = (a * cfg.steps() as f64).floor() as usize;
                let y = cfg.interpolate_substep(k, &traj.values[k], tau, &ModeVector::zeros(8)).unwrap();
                let x = cfg.initial_state();
                let exact: f64 = (0..8)
                    .map(|i| {
                        let lam = cfg.operator.eigenvalue(i);
                        let yk = (-lam * k as f64 * cfg.delta()).exp() * x.coeffs()[i];
                        (((-lam * tau).exp() - 1.0) * yk).powi(2)
                    })
                    .sum();
                let got = y.dist_sq_padded(&traj.values[k]);
                assert!((got - exact).abs() <= 1e-12 * exact.max(1e-300), "level {l}");
                best = best.max(got);
            }
            assert!(best > 0.0);
        }
        // At grid points the statistic vanishes.
        let on_grid = IncrementSampling { anchors: vec![0.3, 0.7], offset: 0.0 };
        let report = increment_study(&setup(8, 3, Some(1)), &[2, 3], &on_grid);
        assert!(matches!(report, Err(AnalysisError::NonPositive(..))));
    }

    #[test]
    fn summary_records_off_grid_choice() {
        let report = spatial_study(&setup(16, 6, Some(2)), &[2, 4, 8], 16, 5).unwrap();
        let json = serde_json::to_value(report.summary()).unwrap();
        for key in ["slope", "intercept", "r2", "nu_theory", "pass", "off_grid_evaluation"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["off_grid_evaluation"], OFF_GRID_EVALUATION);
    }
}
