//! Diagonal calculus for a positive self-adjoint operator with discrete spectrum.
//!
//! Everything here acts mode by mode in the eigenbasis of `-A`, so a vector is
//! just its list of eigen-coefficients and the semigroup `e^{tA}` multiplies
//! coefficient `i` by `e^{-λ_i t}`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("truncation capacity must be at least one mode")]
    EmptySpectrum,
    #[error("eigenvalue {index} = {value} is not strictly positive and finite")]
    NonPositiveEigenvalue { index: usize, value: f64 },
    #[error("eigenvalues must be non-decreasing (λ_{index} = {value} < λ_{prev_index} = {prev})", prev_index = index - 1)]
    Unsorted { index: usize, value: f64, prev: f64 },
    #[error("trace exponent alpha = {0} must lie in (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("vector of length {len} exceeds operator capacity {capacity}")]
    TooManyModes { len: usize, capacity: usize },
    #[error("coefficient {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("physical rendering needs the Dirichlet Laplacian spectrum (power law with exponent 2)")]
    NotRenderable,
}

/// `(1 - e^{-x}) / x` for `x >= 0`, continuous at zero.
///
/// Below `1e-4` the quotient is replaced by its Taylor polynomial; the direct
/// form suffers cancellation there.
pub fn one_minus_exp_over(x: f64) -> f64 {
    if x < 1e-4 {
        1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Variance of the Ornstein-Uhlenbeck fluctuation in a mode with rate `lambda`
/// after time `t`: `(1 - e^{-2λt}) / (2λ)`.
pub fn ou_variance(lambda: f64, t: f64) -> f64 {
    t * one_minus_exp_over(2.0 * lambda * t)
}

/// A constant `c` with `|e^{-x} - e^{-y}| <= c |x - y|^θ` for all `x, y >= 0`.
///
/// `|e^{-x} - e^{-y}| <= min(1, |x - y|) <= |x - y|^θ`, so one works for every
/// `θ ∈ [0, 1]`.
pub fn exp_holder_constant(theta: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&theta));
    1.0
}

/// Eigen-coefficients of an element of the Galerkin space `H_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeVector(Vec<f64>);

impl ModeVector {
    pub fn new(coeffs: Vec<f64>) -> Result<Self, SpectralError> {
        if let Some((index, &value)) = coeffs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SpectralError::NonFinite { index, value });
        }
        Ok(Self(coeffs))
    }

    /// Wraps coefficients without the finiteness check; the scheme uses this on
    /// hot paths and checks finiteness itself.
    pub(crate) fn from_raw(coeffs: Vec<f64>) -> Self {
        Self(coeffs)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// The eigenvector `e_{index+1}` in `H_n`.
    pub fn basis(n: usize, index: usize) -> Self {
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Embeds into `H_n` for `n >= len` by zero padding.
    pub fn embed(&self, n: usize) -> Self {
        assert!(n >= self.0.len(), "embedding must not shrink the space");
        let mut v = self.0.clone();
        v.resize(n, 0.0);
        Self(v)
    }

    /// Orthogonal projection `π_m`, keeping the first `m` coefficients.
    pub fn project(&self, m: usize) -> Self {
        Self(self.0.iter().take(m).copied().collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SpectralError> {
        if self.len() != other.len() {
            return Err(SpectralError::LengthMismatch { left: self.len(), right: other.len() });
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    /// Squared distance, treating the shorter vector as zero-padded.
    pub fn dist_sq_padded(&self, other: &Self) -> f64 {
        let (long, short) = if self.len() >= other.len() { (self, other) } else { (other, self) };
        let mut acc = 0.0;
        for (i, a) in long.0.iter().enumerate() {
            let d = a - short.0.get(i).copied().unwrap_or(0.0);
            acc += d * d;
        }
        acc
    }
}

/// Analytic family the eigenvalues were generated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumKind {
    /// `λ_i = i^exponent`.
    PowerLaw { exponent: f64 },
    Explicit,
}

/// How far a trace-type series can be decided from the stored spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceVerdict {
    Converges,
    Diverges,
    UndeterminedBeyondTruncation,
}

/// Summability of `Σ_i λ_i^{-(1-α)}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub alpha: f64,
    pub partial_sum: f64,
    /// Bound on the tail beyond the stored modes; infinite when unknown or divergent.
    pub tail_bound: f64,
    pub verdict: TraceVerdict,
}

impl TraceReport {
    pub fn converges(&self) -> bool {
        self.verdict == TraceVerdict::Converges
    }
}

/// The operator `-A` through its ascending eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOperator {
    eigenvalues: Vec<f64>,
    kind: SpectrumKind,
}

impl SpectralOperator {
    /// Dirichlet Laplacian on `(0, π)`: `λ_i = i²`.
    pub fn heat(n_max: usize) -> Result<Self, SpectralError> {
        Self::power_law(n_max, 2.0)
    }

    pub fn power_law(n_max: usize, exponent: f64) -> Result<Self, SpectralError> {
        if n_max == 0 {
            return Err(SpectralError::EmptySpectrum);
        }
        let eigenvalues: Vec<f64> = (1..=n_max)
            .map(|i| {
                let i = i as f64;
                if exponent == 2.0 {
                    i * i
                } else {
                    i.powf(exponent)
                }
            })
            .collect();
        Self::validate(&eigenvalues)?;
        Ok(Self { eigenvalues, kind: SpectrumKind::PowerLaw { exponent } })
    }

    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Result<Self, SpectralError> {
        Self::validate(&eigenvalues)?;
        Ok(Self { eigenvalues, kind: SpectrumKind::Explicit })
    }

    fn validate(eigenvalues: &[f64]) -> Result<(), SpectralError> {
        if eigenvalues.is_empty() {
            return Err(SpectralError::EmptySpectrum);
        }
        for (index, &value) in eigenvalues.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(SpectralError::NonPositiveEigenvalue { index: index + 1, value });
            }
            if index > 0 && value < eigenvalues[index - 1] {
                return Err(SpectralError::Unsorted {
                    index: index + 1,
                    value,
                    prev: eigenvalues[index - 1],
                });
            }
        }
        Ok(())
    }

    pub fn n_max(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `λ_{index+1}` (zero-based index).
    pub fn eigenvalue(&self, index: usize) -> f64 {
        self.eigenvalues[index]
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    /// Same family restricted to the first `n` modes.
    pub fn truncated(&self, n: usize) -> Result<Self, SpectralError> {
        if n == 0 {
            return Err(SpectralError::EmptySpectrum);
        }
        if n > self.n_max() {
            return Err(SpectralError::TooManyModes { len: n, capacity: self.n_max() });
        }
        Ok(Self { eigenvalues: self.eigenvalues[..n].to_vec(), kind: self.kind })
    }

    fn check_len(&self, v: &ModeVector) -> Result<(), SpectralError> {
        if v.len() > self.n_max() {
            return Err(SpectralError::TooManyModes { len: v.len(), capacity: self.n_max() });
        }
        Ok(())
    }

    /// `Σ_{i<=n_max} λ_i^{-(1-α)}` with an analytic verdict for power laws.
    pub fn check_trace_condition(&self, alpha: f64) -> Result<TraceReport, SpectralError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(SpectralError::AlphaOutOfRange(alpha));
        }
        let partial_sum: f64 = self.eigenvalues.iter().map(|l| l.powf(-(1.0 - alpha))).sum();
        let (tail_bound, verdict) = match self.kind {
            SpectrumKind::PowerLaw { exponent } => {
                let s = exponent * (1.0 - alpha);
                if s > 1.0 {
                    // Integral test: Σ_{i>N} i^{-s} <= ∫_N^∞ x^{-s} dx.
                    let n = self.n_max() as f64;
                    (n.powf(1.0 - s) / (s - 1.0), TraceVerdict::Converges)
                } else {
                    (f64::INFINITY, TraceVerdict::Diverges)
                }
            }
            SpectrumKind::Explicit => (f64::INFINITY, TraceVerdict::UndeterminedBeyondTruncation),
        };
        Ok(TraceReport { alpha, partial_sum, tail_bound, verdict })
    }

    /// `e^{tA} v`.
    pub fn semigroup_apply(&self, t: f64, v: &ModeVector) -> Result<ModeVector, SpectralError> {
        if t < 0.0 || t.is_nan() {
            return Err(SpectralError::NegativeTime(t));
        }
        self.check_len(v)?;
        if t == 0.0 {
            return Ok(v.clone());
        }
        Ok(ModeVector(
            v.0.iter().zip(&self.eigenvalues).map(|(c, l)| c * (-l * t).exp()).collect(),
        ))
    }

    /// `(-A)^γ v`.
    pub fn frac_power_apply(&self, gamma: f64, v: &ModeVector) -> Result<ModeVector, SpectralError> {
        self.check_len(v)?;
        if gamma == 0.0 {
            return Ok(v.clone());
        }
        Ok(ModeVector(v.0.iter().zip(&self.eigenvalues).map(|(c, l)| c * l.powf(gamma)).collect()))
    }

    /// Operator norm of `(-A)^γ e^{tA}` on the stored modes.
    pub fn smoothing_norm(&self, gamma: f64, t: f64) -> f64 {
        self.eigenvalues.iter().map(|l| l.powf(gamma) * (-l * t).exp()).fold(0.0, f64::max)
    }

    /// Operator norm of `(-A)^{-γ} (e^{tA} - I)` on the stored modes.
    pub fn increment_norm(&self, gamma: f64, t: f64) -> f64 {
        self.eigenvalues.iter().map(|l| -(-l * t).exp_m1() * l.powf(-gamma)).fold(0.0, f64::max)
    }

    /// Evaluates `Σ_i v_i e_i(ξ)` with `e_i(ξ) = (2/π)^{1/2} sin(iξ)` at the given points.
    pub fn render_physical(&self, v: &ModeVector, xi: &[f64]) -> Result<Vec<f64>, SpectralError> {
        if self.kind != (SpectrumKind::PowerLaw { exponent: 2.0 }) {
            return Err(SpectralError::NotRenderable);
        }
        self.check_len(v)?;
        let scale = (2.0 / PI).sqrt();
        Ok(xi
            .iter()
            .map(|&x| {
                v.0.iter().enumerate().map(|(i, c)| c * ((i + 1) as f64 * x).sin()).sum::<f64>() * scale
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heat_spectrum() {
        assert_eq!(SpectralOperator::heat(3).unwrap().eigenvalues(), &[1.0, 4.0, 9.0]);
        assert_eq!(SpectralOperator::heat(1).unwrap().eigenvalues(), &[1.0]);
        assert_eq!(SpectralOperator::heat(128).unwrap().eigenvalue(127), 16384.0);
        assert_eq!(SpectralOperator::heat(0), Err(SpectralError::EmptySpectrum));
    }

    #[test]
    fn explicit_spectrum_validation() {
        assert!(SpectralOperator::from_eigenvalues(vec![1.0, 1.0, 3.0]).is_ok());
        assert!(matches!(
            SpectralOperator::from_eigenvalues(vec![1.0, 0.5]),
            Err(SpectralError::Unsorted { index: 2, .. })
        ));
        assert!(matches!(
            SpectralOperator::from_eigenvalues(vec![0.0, 1.0]),
            Err(SpectralError::NonPositiveEigenvalue { index: 1, .. })
        ));
    }

    #[test]
    fn trace_condition_heat() {
        let op = SpectralOperator::heat(128).unwrap();
        let r = op.check_trace_condition(0.45).unwrap();
        assert!(r.converges());
        assert!(r.tail_bound.is_finite());
        // Independent evaluation of Σ_{i<=128} i^{-1.1} and 128^{-0.1}/0.1.
        assert!((r.partial_sum - 4.431127533122986).abs() < 1e-12);
        assert!((r.tail_bound - 6.155722066724578).abs() < 1e-12);

        let r = op.check_trace_condition(0.5).unwrap();
        assert_eq!(r.verdict, TraceVerdict::Diverges);
        assert_eq!(r.tail_bound, f64::INFINITY);

        assert!(op.check_trace_condition(0.0).is_err());
        assert!(op.check_trace_condition(1.0).is_err());
    }

    #[test]
    fn trace_condition_single_mode() {
        let op = SpectralOperator::from_eigenvalues(vec![2.5]).unwrap();
        let r = op.check_trace_condition(0.3).unwrap();
        assert_eq!(r.partial_sum, 2.5f64.powf(-0.7));
        assert_eq!(r.verdict, TraceVerdict::UndeterminedBeyondTruncation);
        assert!(!r.converges());

        let heat = SpectralOperator::heat(1).unwrap();
        let r = heat.check_trace_condition(0.3).unwrap();
        assert_eq!(r.partial_sum, 1.0);
        assert!(r.converges());
    }

    #[test]
    fn semigroup_examples() {
        let op = SpectralOperator::heat(4).unwrap();
        let v = ModeVector::new(vec![1.0, 1.0]).unwrap();
        let out = op.semigroup_apply(2f64.ln(), &v).unwrap();
        assert!((out.coeffs()[0] - 0.5).abs() < 1e-15);
        assert!((out.coeffs()[1] - 0.0625).abs() < 1e-15);
        assert_eq!(op.semigroup_apply(0.0, &v).unwrap(), v);
        assert_eq!(op.semigroup_apply(-1.0, &v), Err(SpectralError::NegativeTime(-1.0)));
        let too_long = ModeVector::zeros(5);
        assert!(matches!(op.semigroup_apply(1.0, &too_long), Err(SpectralError::TooManyModes { .. })));
    }

    #[test]
    fn frac_power_examples() {
        let op = SpectralOperator::heat(4).unwrap();
        let e2 = ModeVector::basis(2, 1);
        assert_eq!(op.frac_power_apply(-1.0, &e2).unwrap().coeffs(), &[0.0, 0.25]);
        let v = ModeVector::new(vec![0.3, -2.0, 7.0]).unwrap();
        assert_eq!(op.frac_power_apply(0.0, &v).unwrap(), v);
    }

    #[test]
    fn smoothing_inequalities() {
        let op = SpectralOperator::heat(4096).unwrap();
        for gamma in [0.25, 0.5, 1.0] {
            for t in [1e-3, 1e-1, 1.0] {
                assert!(op.smoothing_norm(gamma, t) <= t.powf(-gamma), "γ={gamma} t={t}");
                assert!(op.increment_norm(gamma, t) <= t.powf(gamma), "γ={gamma} t={t}");
            }
        }
    }

    #[test]
    fn exp_holder_helper_dominates_sampled_ratio() {
        let grid: Vec<f64> = (0..=400).map(|k| 50.0 * k as f64 / 400.0).chain([1e-6, 1e-3, 0.01]).collect();
        for theta in [0.25, 0.5, 1.0] {
            let mut worst: f64 = 0.0;
            for &x in &grid {
                for &y in &grid {
                    if x != y {
                        worst = worst.max(((-x).exp() - (-y).exp()).abs() / (x - y).abs().powf(theta));
                    }
                }
            }
            assert!(worst.is_finite());
            assert!(worst <= exp_holder_constant(theta), "θ={theta}: sampled {worst}");
        }
    }

    #[test]
    fn ou_variance_is_stable() {
        assert!((ou_variance(1.0, 1.0) - 0.43233235838169365).abs() < 1e-15);
        // 2λt below the series threshold: compare with the exact expansion t(1 - λt + ...).
        let v = ou_variance(1e-9, 0.5);
        assert!((v - 0.5 * (1.0 - 0.5e-9)).abs() < 1e-20);
        assert!(ou_variance(1.0, 0.0) == 0.0);
        // Continuity across the switch.
        let below = one_minus_exp_over(0.99999e-4);
        let above = one_minus_exp_over(1.00001e-4);
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn render_uses_sine_basis() {
        let op = SpectralOperator::heat(2).unwrap();
        let v = ModeVector::new(vec![1.0, 0.0]).unwrap();
        let vals = op.render_physical(&v, &[PI / 2.0]).unwrap();
        assert!((vals[0] - (2.0 / PI).sqrt()).abs() < 1e-15);
        let explicit = SpectralOperator::from_eigenvalues(vec![1.0]).unwrap();
        assert_eq!(explicit.render_physical(&v.project(1), &[0.1]), Err(SpectralError::NotRenderable));
    }

    fn coeffs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..=n)
    }

    proptest! {
        #[test]
        fn semigroup_law(v in coeffs(32), s in 0.0f64..2.0, t in 0.0f64..2.0) {
            let op = SpectralOperator::heat(32).unwrap();
            let v = ModeVector::new(v).unwrap();
            let two_step = op.semigroup_apply(s, &op.semigroup_apply(t, &v).unwrap()).unwrap();
            let one_step = op.semigroup_apply(s + t, &v).unwrap();
            for (a, b) in two_step.coeffs().iter().zip(one_step.coeffs()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs() + 1e-290);
            }
        }

        #[test]
        fn contraction(v in coeffs(32), t in 0.0f64..5.0) {
            let op = SpectralOperator::heat(32).unwrap();
            let v = ModeVector::new(v).unwrap();
            let out = op.semigroup_apply(t, &v).unwrap();
            prop_assert!(out.norm() <= v.norm());
            for (a, b) in out.coeffs().iter().zip(v.coeffs()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }

        #[test]
        fn embed_then_project_is_identity(v in coeffs(16), extra in 0usize..16) {
            let v = ModeVector::new(v).unwrap();
            let big = v.embed(v.len() + extra);
            prop_assert_eq!(big.norm_sq(), v.norm_sq());
            prop_assert!(big.coeffs()[v.len()..].iter().all(|c| *c == 0.0));
            prop_assert_eq!(big.project(v.len()), v);
        }
    }
}
