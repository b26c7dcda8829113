//! Monte Carlo probes of the Ornstein-Uhlenbeck semigroup `P_t^0`, its
//! Bismut gradient, and a depth-limited Picard evaluator for
//! `u_t(x) = ∫_t^T e^{-λ(s-t)} P_{s-t}^0(∇_{b_s} u_s + b_s)(x) ds`.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ErrorAccumulator;
use crate::drift::{DriftError, HolderDriftSpec};
use crate::noise::{ou_exact_step, ou_joint_with_weight, NoiseError, OUState};
use crate::spectral::{ModeVector, SpectralError, SpectralOperator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KolmogorovError {
    #[error("time {0} must be positive")]
    NonPositiveTime(f64),
    #[error("at least 2 Monte Carlo samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("test function has no finite bound")]
    Unbounded,
    #[error("dimension {d} exceeds the operator's {capacity} modes")]
    Dimension { d: usize, capacity: usize },
    #[error("coordinate index {j} outside 0..{d}")]
    Coordinate { j: usize, d: usize },
    #[error("mode index {0} must be at least 1")]
    ModeIndex(usize),
    #[error("Picard depth must be at least 1")]
    Depth,
    #[error("t = {t} outside [0, {horizon}]")]
    Time { t: f64, horizon: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("evaluation budget exhausted: {0:?}")]
    Budget(Box<PicardResult>),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Drift(#[from] DriftError),
}

/// Test functions `f: H → H` restricted to the first `d` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TestFunction {
    /// `f(z) = z_j u` (0-based `j`); unbounded.
    Coordinate { j: usize, u: Vec<f64> },
    /// `f(z) = tanh(⟨z, w⟩) u`.
    BoundedSmooth { w: Vec<f64>, u: Vec<f64> },
    /// `f = b_at`.
    DriftFunction { drift: HolderDriftSpec, at: f64 },
}

impl TestFunction {
    pub fn eval(&self, op: &SpectralOperator, z: &ModeVector) -> ModeVector {
        match self {
            TestFunction::Coordinate { j, u } => {
                let c = z.coeffs()[*j];
                ModeVector::from_raw(u.iter().map(|ui| c * ui).collect())
            }
            TestFunction::BoundedSmooth { w, u } => {
                let s: f64 = z.coeffs().iter().zip(w).map(|(a, b)| a * b).sum();
                let th = s.tanh();
                ModeVector::from_raw(u.iter().map(|ui| th * ui).collect())
            }
            TestFunction::DriftFunction { drift, at } => drift.eval(op, *at, z),
        }
    }

    /// `sup ‖f‖` over the first `d` modes, when finite.
    pub fn bound(&self, op: &SpectralOperator, d: usize) -> Option<f64> {
        match self {
            TestFunction::Coordinate { .. } => None,
            TestFunction::BoundedSmooth { u, .. } => Some(u.iter().map(|v| v * v).sum::<f64>().sqrt()),
            TestFunction::DriftFunction { drift, .. } => op.truncated(d).ok().map(|t| drift.bound(&t)),
        }
    }

    fn check(&self, d: usize) -> Result<(), KolmogorovError> {
        match self {
            TestFunction::Coordinate { j, .. } if *j >= d => Err(KolmogorovError::Coordinate { j: *j, d }),
            TestFunction::BoundedSmooth { w, .. } if w.len() > d => {
                Err(KolmogorovError::Parameter(format!("w has {} entries for {d} modes", w.len())))
            }
            TestFunction::DriftFunction { drift, .. } => Ok(drift.validate()?),
            _ => Ok(()),
        }
    }
}

/// Per-coordinate Monte Carlo mean and standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorEstimate {
    pub mean: ModeVector,
    pub stderr: ModeVector,
}

impl VectorEstimate {
    fn from_accumulators(accs: &[ErrorAccumulator]) -> Self {
        Self {
            mean: ModeVector::from_raw(accs.iter().map(ErrorAccumulator::mean).collect()),
            stderr: ModeVector::from_raw(accs.iter().map(ErrorAccumulator::stderr).collect()),
        }
    }

    /// `‖stderr‖₂`, used as the standard error of norms and linear combinations.
    pub fn norm_stderr(&self) -> f64 {
        self.stderr.norm()
    }
}

fn push_all(accs: &mut Vec<ErrorAccumulator>, v: &ModeVector) {
    if accs.is_empty() {
        accs.resize(v.len(), ErrorAccumulator::new());
    }
    for (a, x) in accs.iter_mut().zip(v.coeffs()) {
        a.push(*x);
    }
}

fn check_common(op: &SpectralOperator, t: f64, x: &ModeVector, m: usize) -> Result<(), KolmogorovError> {
    if !(t > 0.0) {
        return Err(KolmogorovError::NonPositiveTime(t));
    }
    if m < 2 {
        return Err(KolmogorovError::TooFewSamples(m));
    }
    if x.len() > op.n_max() || x.is_empty() {
        return Err(KolmogorovError::Dimension { d: x.len(), capacity: op.n_max() });
    }
    Ok(())
}

/// `P_t^0 f(x) = E f(Z_t^x)` from `m` exact draws.
pub fn ou_semigroup_estimate(
    op: &SpectralOperator,
    f: &TestFunction,
    t: f64,
    x: &ModeVector,
    m: usize,
    seed: u64,
) -> Result<VectorEstimate, KolmogorovError> {
    check_common(op, t, x, m)?;
    f.check(x.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = OUState { modes: x.clone(), t: 0.0 };
    let mut accs = Vec::new();
    for _ in 0..m {
        let z = ou_exact_step(op, &start, t, &mut rng)?;
        push_all(&mut accs, &f.eval(op, &z.modes));
    }
    Ok(VectorEstimate::from_accumulators(&accs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BismutVariant {
    /// `f(Z) I / t`.
    Plain,
    /// `(f(Z) - f(e^{tA}x)) I / t`; same mean since `E I = 0`.
    #[default]
    Centered,
}

/// `∇_η P_t^0 f(x) = E[f(Z_t^x) I] / t` with `I = ∫_0^t ⟨e^{sA}η, dW_s⟩`.
#[allow(clippy::too_many_arguments)]
pub fn bismut_gradient(
    op: &SpectralOperator,
    f: &TestFunction,
    t: f64,
    x: &ModeVector,
    eta: &ModeVector,
    m: usize,
    seed: u64,
    variant: BismutVariant,
) -> Result<VectorEstimate, KolmogorovError> {
    check_common(op, t, x, m)?;
    f.check(x.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let baseline = match variant {
        BismutVariant::Plain => None,
        BismutVariant::Centered => Some(f.eval(op, &op.semigroup_apply(t, x)?)),
    };
    let mut accs = Vec::new();
    for _ in 0..m {
        let (z, weight) = ou_joint_with_weight(op, x, t, eta, &mut rng)?;
        let mut fz = f.eval(op, &z);
        let scale = weight / t;
        match &baseline {
            Some(b) => fz.coeffs_mut().iter_mut().zip(b.coeffs()).for_each(|(v, c)| *v = (*v - c) * scale),
            None => fz.coeffs_mut().iter_mut().for_each(|v| *v *= scale),
        }
        push_all(&mut accs, &fz);
    }
    Ok(VectorEstimate::from_accumulators(&accs))
}

/// Central difference `(P_t f(x + hη) - P_t f(x - hη)) / 2h` with both
/// evaluations sharing every Gaussian draw.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_gradient(
    op: &SpectralOperator,
    f: &TestFunction,
    t: f64,
    x: &ModeVector,
    eta: &ModeVector,
    h: f64,
    m: usize,
    seed: u64,
) -> Result<VectorEstimate, KolmogorovError> {
    check_common(op, t, x, m)?;
    f.check(x.len())?;
    if !(h > 0.0) {
        return Err(KolmogorovError::Parameter(format!("finite-difference step {h}")));
    }
    let shift = |s: f64| -> Result<ModeVector, KolmogorovError> {
        let v: Vec<f64> = x.coeffs().iter().zip(eta.coeffs()).map(|(a, e)| a + s * h * e).collect();
        Ok(op.semigroup_apply(t, &ModeVector::new(v)?)?)
    };
    let (plus, minus) = (shift(1.0)?, shift(-1.0)?);
    let origin = OUState { modes: ModeVector::zeros(x.len()), t: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accs = Vec::new();
    let mut zp = ModeVector::zeros(x.len());
    let mut zm = ModeVector::zeros(x.len());
    for _ in 0..m {
        let fluct = ou_exact_step(op, &origin, t, &mut rng)?.modes;
        for i in 0..x.len() {
            zp.coeffs_mut()[i] = plus.coeffs()[i] + fluct.coeffs()[i];
            zm.coeffs_mut()[i] = minus.coeffs()[i] + fluct.coeffs()[i];
        }
        let (fp, fm) = (f.eval(op, &zp), f.eval(op, &zm));
        let diff: Vec<f64> = fp.coeffs().iter().zip(fm.coeffs()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        push_all(&mut accs, &ModeVector::from_raw(diff));
    }
    Ok(VectorEstimate::from_accumulators(&accs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientRow {
    /// 1-based mode index.
    pub i: usize,
    pub estimate: f64,
    pub stderr: f64,
    /// `sup‖f‖ sqrt(1 - e^{-2λ_i t}) / (sqrt(λ_i) t)`.
    pub bound: f64,
    pub bound_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientDecayReport {
    pub t: f64,
    pub rows: Vec<GradientRow>,
    pub max_ratio: f64,
    /// `estimate - 3 stderr ≤ bound` for every mode.
    pub bounded: bool,
    /// Later modes never exceed earlier ones beyond 3 combined stderr.
    pub decreasing: bool,
}

impl GradientDecayReport {
    pub fn pass(&self) -> bool {
        self.bounded && self.decreasing
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "i,estimate,stderr,bound_ratio")?;
        for r in &self.rows {
            writeln!(w, "{},{:e},{:e},{:e}", r.i, r.estimate, r.stderr, r.bound_ratio)?;
        }
        Ok(())
    }
}

/// `‖∇_{e_i} P_t^0 f(x)‖` for the listed 1-based modes against the
/// Cauchy-Schwarz bound on the Bismut weight.
pub fn gradient_decay_check(
    op: &SpectralOperator,
    f: &TestFunction,
    t: f64,
    x: &ModeVector,
    modes: &[usize],
    m: usize,
    seed: u64,
) -> Result<GradientDecayReport, KolmogorovError> {
    let sup = f.bound(op, x.len()).ok_or(KolmogorovError::Unbounded)?;
    let mut rows = Vec::with_capacity(modes.len());
    for (k, &i) in modes.iter().enumerate() {
        if i == 0 {
            return Err(KolmogorovError::ModeIndex(i));
        }
        if i > x.len() {
            return Err(KolmogorovError::Dimension { d: i, capacity: x.len() });
        }
        let eta = ModeVector::basis(x.len(), i - 1);
        let est = bismut_gradient(op, f, t, x, &eta, m, seed.wrapping_add(k as u64), BismutVariant::Centered)?;
        let lambda = op.eigenvalue(i - 1);
        let bound = sup * (-(-2.0 * lambda * t).exp_m1()).sqrt() / (lambda.sqrt() * t);
        let estimate = est.mean.norm();
        rows.push(GradientRow { i, estimate, stderr: est.norm_stderr(), bound, bound_ratio: estimate / bound });
    }
    let max_ratio = rows.iter().map(|r| r.bound_ratio).fold(0.0, f64::max);
    let bounded = rows.iter().all(|r| r.estimate - 3.0 * r.stderr <= r.bound);
    let decreasing = rows.iter().enumerate().all(|(k, r)| {
        rows[..k].iter().all(|p| p.i >= r.i || r.estimate <= p.estimate + 3.0 * (r.stderr + p.stderr))
    });
    Ok(GradientDecayReport { t, rows, max_ratio, bounded, decreasing })
}

/// Settings of the pointwise Picard evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub lambda: f64,
    pub depth: usize,
    pub dims: usize,
    /// Samples per time node at the outermost level.
    pub outer_samples: usize,
    /// Samples per time node inside nested evaluations.
    pub inner_samples: usize,
    /// Midpoint-rule nodes on `[t, T]`.
    pub time_nodes: usize,
    /// Forward-difference step for `∇_{b_s} u`.
    pub fd_step: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Maximum number of drift evaluations.
    pub budget: u64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            depth: 1,
            dims: 3,
            outer_samples: 2000,
            inner_samples: 64,
            time_nodes: 16,
            fd_step: 1e-2,
            horizon: 1.0,
            seed: 0,
            budget: 1_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardDiagnostics {
    /// Depth of the returned estimate.
    pub completed_depth: usize,
    pub requested_depth: usize,
    pub evaluations: u64,
    /// `sup‖b‖ (1 - e^{-λ(T-t)}) / λ`.
    pub first_iterate_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardResult {
    pub estimate: VectorEstimate,
    pub diagnostics: PicardDiagnostics,
}

impl PicardResult {
    pub fn norm(&self) -> f64 {
        self.estimate.mean.norm()
    }
}

struct Picard<'a> {
    op: &'a SpectralOperator,
    drift: &'a HolderDriftSpec,
    weights: Vec<f64>,
    cfg: &'a PicardConfig,
    evaluations: u64,
}

impl Picard<'_> {
    /// Drift evaluations needed for one estimate of `u^{(k)}` with `m` samples per node.
    fn cost(&self, k: usize, m: usize) -> u64 {
        if k == 0 {
            return 0;
        }
        let nodes = self.cfg.time_nodes as u64;
        let inner = if k > 1 { 2 * self.cost(k - 1, self.cfg.inner_samples) } else { 0 };
        nodes * m as u64 * (1 + inner)
    }

    fn drift(&mut self, s: f64, z: &ModeVector) -> ModeVector {
        self.evaluations += 1;
        self.drift.eval_weighted(&self.weights, s, z.coeffs())
    }

    /// `u^{(k)}_t(x)` with `m` samples per midpoint node.
    fn u(&mut self, k: usize, t: f64, x: &ModeVector, m: usize, rng: &mut ChaCha8Rng) -> Result<VectorEstimate, KolmogorovError> {
        let d = x.len();
        let zero = || VectorEstimate { mean: ModeVector::zeros(d), stderr: ModeVector::zeros(d) };
        let span = self.cfg.horizon - t;
        if k == 0 || span <= 0.0 {
            return Ok(zero());
        }
        let nodes = self.cfg.time_nodes;
        let ds = span / nodes as f64;
        let start = OUState { modes: x.clone(), t: 0.0 };
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for j in 0..nodes {
            let s = t + (j as f64 + 0.5) * ds;
            let w = (-self.cfg.lambda * (s - t)).exp() * ds;
            let mut accs = vec![ErrorAccumulator::new(); d];
            for _ in 0..m {
                let z = ou_exact_step(self.op, &start, s - t, rng)?.modes;
                let mut g = self.drift(s, &z);
                if k > 1 {
                    let shifted: Vec<f64> =
                        z.coeffs().iter().zip(g.coeffs()).map(|(a, b)| a + self.cfg.fd_step * b).collect();
                    let shifted = ModeVector::from_raw(shifted);
                    // Common random numbers for both nested evaluations.
                    let child: u64 = rng.random();
                    let up = self.u(k - 1, s, &shifted, self.cfg.inner_samples, &mut ChaCha8Rng::seed_from_u64(child))?;
                    let u0 = self.u(k - 1, s, &z, self.cfg.inner_samples, &mut ChaCha8Rng::seed_from_u64(child))?;
                    for ((gi, a), b) in g.coeffs_mut().iter_mut().zip(up.mean.coeffs()).zip(u0.mean.coeffs()) {
                        *gi += (a - b) / self.cfg.fd_step;
                    }
                }
                for (acc, v) in accs.iter_mut().zip(g.coeffs()) {
                    acc.push(*v);
                }
            }
            for (i, acc) in accs.iter().enumerate() {
                mean[i] += w * acc.mean();
                var[i] += (w * acc.stderr()).powi(2);
            }
        }
        Ok(VectorEstimate {
            mean: ModeVector::from_raw(mean),
            stderr: ModeVector::from_raw(var.into_iter().map(f64::sqrt).collect()),
        })
    }
}

/// Pointwise estimate of the `K`-th Picard iterate `u^{(K)}_t(x)`, `u^{(0)} ≡ 0`.
/// Depths are attempted in order; if the next one would exceed the budget,
/// the last completed depth is returned inside the error.
pub fn picard_u_lambda(
    op: &SpectralOperator,
    drift: &HolderDriftSpec,
    cfg: &PicardConfig,
    t: f64,
    x: &ModeVector,
) -> Result<PicardResult, KolmogorovError> {
    if cfg.depth == 0 {
        return Err(KolmogorovError::Depth);
    }
    if cfg.dims == 0 || cfg.dims > op.n_max() || x.len() != cfg.dims {
        return Err(KolmogorovError::Dimension { d: cfg.dims.max(x.len()), capacity: op.n_max() });
    }
    if !(0.0..=cfg.horizon).contains(&t) {
        return Err(KolmogorovError::Time { t, horizon: cfg.horizon });
    }
    if !(cfg.lambda > 0.0) || !(cfg.fd_step > 0.0) || cfg.time_nodes == 0 {
        return Err(KolmogorovError::Parameter("λ, fd_step and time_nodes must be positive".into()));
    }
    if cfg.outer_samples < 2 || (cfg.depth > 1 && cfg.inner_samples < 2) {
        return Err(KolmogorovError::TooFewSamples(cfg.outer_samples.min(cfg.inner_samples)));
    }
    drift.validate()?;
    let truncated = op.truncated(cfg.dims)?;
    let first_iterate_bound = drift.bound(&truncated) * -(-cfg.lambda * (cfg.horizon - t)).exp_m1() / cfg.lambda;
    let mut p = Picard { op, drift, weights: drift.weights(op, cfg.dims), cfg, evaluations: 0 };
    let mut result = PicardResult {
        estimate: VectorEstimate { mean: ModeVector::zeros(cfg.dims), stderr: ModeVector::zeros(cfg.dims) },
        diagnostics: PicardDiagnostics {
            completed_depth: 0,
            requested_depth: cfg.depth,
            evaluations: 0,
            first_iterate_bound,
        },
    };
    for k in 1..=cfg.depth {
        if p.evaluations + p.cost(k, cfg.outer_samples) > cfg.budget {
            result.diagnostics.evaluations = p.evaluations;
            return Err(KolmogorovError::Budget(Box::new(result)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        result.estimate = p.u(k, t, x, cfg.outer_samples, &mut rng)?;
        result.diagnostics.completed_depth = k;
        result.diagnostics.evaluations = p.evaluations;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummabilityReport {
    pub theta: f64,
    /// `(n, Σ_{i≤n} λ_i^θ ‖∇_{e_i} u^{(1)}‖²)` with squared norms bias-corrected by `stderr²`.
    pub partial_sums: Vec<(usize, f64)>,
    /// Relative growth of the partial sum over the second half of the modes.
    pub tail_growth: f64,
    pub bounded: bool,
}

/// Estimates `∇_{e_i} u^{(1)}_t(x)` by Bismut weights inside the time integral
/// and reports the weighted partial sums.
#[allow(clippy::too_many_arguments)]
pub fn summability_probe(
    op: &SpectralOperator,
    drift: &HolderDriftSpec,
    lambda: f64,
    horizon: f64,
    t: f64,
    x: &ModeVector,
    theta: f64,
    time_nodes: usize,
    m: usize,
    seed: u64,
) -> Result<SummabilityReport, KolmogorovError> {
    let n = x.len();
    if !(0.0..horizon).contains(&t) {
        return Err(KolmogorovError::Time { t, horizon });
    }
    if time_nodes == 0 {
        return Err(KolmogorovError::Parameter("time_nodes must be positive".into()));
    }
    let ds = (horizon - t) / time_nodes as f64;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let eta = ModeVector::basis(n, i);
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for j in 0..time_nodes {
            let s = t + (j as f64 + 0.5) * ds;
            let w = (-lambda * (s - t)).exp() * ds;
            let f = TestFunction::DriftFunction { drift: drift.clone(), at: s };
            let seed = seed.wrapping_add((i * time_nodes + j) as u64);
            let est = bismut_gradient(op, &f, s - t, x, &eta, m, seed, BismutVariant::Centered)?;
            for c in 0..n {
                mean[c] += w * est.mean.coeffs()[c];
                var[c] += (w * est.stderr.coeffs()[c]).powi(2);
            }
        }
        let sq: f64 = mean.iter().map(|v| v * v).sum::<f64>() - var.iter().sum::<f64>();
        terms.push(op.eigenvalue(i).powf(theta) * sq.max(0.0));
    }
    let mut partial_sums = Vec::new();
    let mut acc = 0.0;
    for (i, v) in terms.iter().enumerate() {
        acc += v;
        partial_sums.push((i + 1, acc));
    }
    let half = partial_sums[(n / 2).max(1) - 1].1;
    let tail_growth = if half > 0.0 { (acc - half) / half } else { 0.0 };
    Ok(SummabilityReport { theta, partial_sums, tail_growth, bounded: tail_growth < 0.5 })
}
