//! Galerkin truncation plus the exponential integrator
//! `Y_{(k+1)δ} = e^{δA_n}(Y_{kδ} + b_{kδ}(Y_{kδ}) δ + ΔW_k)`.
//!
//! Off-grid values come from the same update over a partial step,
//! `Y_t = e^{(t - t_δ)A}(Y_{t_δ} + b_{t_δ}(Y_{t_δ})(t - t_δ) + W_t - W_{t_δ})`,
//! so the interpolant agrees with the recursion bit for bit at grid points.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{DriftError, HolderDriftSpec};
use crate::noise::{NoiseError, NoiseLattice, PathNoise};
use crate::spectral::{ModeVector, SpectralOperator, SpectrumKind, TraceVerdict};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sub-step offset {tau} is outside [0, {delta}]")]
    OutsideStep { tau: f64, delta: f64 },
    #[error("step index {step} is outside 0..{steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("{n} Galerkin modes exceed the available {capacity}")]
    TooManyModes { n: usize, capacity: usize },
    #[error("at least one Galerkin mode is required")]
    NoModes,
    #[error("level {level} is finer than the lattice level {fine}")]
    LevelTooFine { level: u32, fine: u32 },
    #[error("horizon {got} does not match {expected}")]
    HorizonMismatch { expected: f64, got: f64 },
    #[error("initial profile exponent q = {0} must be finite")]
    InitialProfile(f64),
    #[error("no configurations given")]
    Empty,
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Drift(#[from] DriftError),
}

/// Initial condition `x`, given by its eigen-coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum InitialData {
    /// `x_i = i^{-q}`.
    PowerDecay { q: f64 },
    Explicit { coeffs: Vec<f64> },
}

/// Membership of `x` in `D(A)`, i.e. finiteness of `Σ λ_i² x_i²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainReport {
    pub partial_sum: f64,
    pub verdict: TraceVerdict,
}

impl InitialData {
    /// `π_n x`.
    pub fn coefficients(&self, n: usize) -> ModeVector {
        match self {
            InitialData::PowerDecay { q } => {
                ModeVector::from_raw((1..=n).map(|i| (i as f64).powf(-q)).collect())
            }
            InitialData::Explicit { coeffs } => {
                let mut v: Vec<f64> = coeffs.iter().take(n).copied().collect();
                v.resize(n, 0.0);
                ModeVector::from_raw(v)
            }
        }
    }

    pub fn domain_check(&self, op: &SpectralOperator) -> DomainReport {
        let x = self.coefficients(op.n_max());
        let partial_sum = x.coeffs().iter().zip(op.eigenvalues()).map(|(c, l)| (l * c).powi(2)).sum();
        let verdict = match (self, op.kind()) {
            (InitialData::Explicit { coeffs }, _) if coeffs.len() <= op.n_max() => TraceVerdict::Converges,
            (InitialData::Explicit { .. }, _) => TraceVerdict::UndeterminedBeyondTruncation,
            // Σ i^{2p - 2q} converges iff 2q - 2p > 1.
            (InitialData::PowerDecay { q }, SpectrumKind::PowerLaw { exponent }) => {
                if 2.0 * q - 2.0 * exponent > 1.0 {
                    TraceVerdict::Converges
                } else {
                    TraceVerdict::Diverges
                }
            }
            (InitialData::PowerDecay { .. }, SpectrumKind::Explicit) => TraceVerdict::UndeterminedBeyondTruncation,
        };
        DomainReport { partial_sum, verdict }
    }

    fn validate(&self) -> Result<(), SchemeError> {
        match self {
            InitialData::PowerDecay { q } if !q.is_finite() => Err(SchemeError::InitialProfile(*q)),
            InitialData::Explicit { coeffs } => match coeffs.iter().position(|c| !c.is_finite()) {
                Some(step) => Err(SchemeError::NonFinite { step }),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// One resolution `(n, δ = T / 2^level)` of the scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub operator: SpectralOperator,
    pub drift: HolderDriftSpec,
    pub horizon: f64,
    pub level: u32,
    pub n_modes: usize,
    pub initial: InitialData,
}

impl SchemeConfig {
    pub fn delta(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn steps(&self) -> usize {
        1usize << self.level
    }

    pub fn with_resolution(&self, level: u32, n_modes: usize) -> Self {
        Self { level, n_modes, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        if self.n_modes == 0 {
            return Err(SchemeError::NoModes);
        }
        if self.n_modes > self.operator.n_max() {
            return Err(SchemeError::TooManyModes { n: self.n_modes, capacity: self.operator.n_max() });
        }
        self.drift.validate()?;
        self.initial.validate()?;
        Ok(())
    }

    pub fn validate_against(&self, lattice: &NoiseLattice) -> Result<(), SchemeError> {
        self.validate()?;
        if self.level > lattice.fine_level() {
            return Err(SchemeError::LevelTooFine { level: self.level, fine: lattice.fine_level() });
        }
        if self.n_modes > lattice.n_modes() {
            return Err(SchemeError::TooManyModes { n: self.n_modes, capacity: lattice.n_modes() });
        }
        if self.horizon != lattice.horizon() {
            return Err(SchemeError::HorizonMismatch { expected: lattice.horizon(), got: self.horizon });
        }
        Ok(())
    }

    /// `Y_0 = π_n x`.
    pub fn initial_state(&self) -> ModeVector {
        self.initial.coefficients(self.n_modes)
    }

    pub fn stepper(&self) -> Result<Stepper<'_>, SchemeError> {
        self.validate()?;
        Stepper::new(self)
    }

    /// One step of the recursion from grid time `kδ`.
    pub fn ei_step(&self, k: usize, y: &ModeVector, dw: &ModeVector) -> Result<ModeVector, SchemeError> {
        self.stepper()?.step(k, y, dw)
    }

    /// Partial step from grid time `kδ` to `kδ + tau`, `0 <= tau <= δ`, given the
    /// noise increment over the same interval.
    pub fn interpolate_substep(
        &self,
        k: usize,
        y: &ModeVector,
        tau: f64,
        partial_dw: &ModeVector,
    ) -> Result<ModeVector, SchemeError> {
        self.stepper()?.substep(k, y, tau, partial_dw)
    }

    pub fn simulate_path(&self, lattice: &NoiseLattice, path_id: u64) -> Result<Trajectory, SchemeError> {
        self.validate_against(lattice)?;
        let noise = lattice.path(path_id, self.n_modes)?;
        self.simulate_with_noise(&noise)
    }

    /// Runs the recursion on an already materialized path.
    pub fn simulate_with_noise(&self, noise: &PathNoise) -> Result<Trajectory, SchemeError> {
        let stepper = self.stepper()?;
        if self.level > noise.fine_level() {
            return Err(SchemeError::LevelTooFine { level: self.level, fine: noise.fine_level() });
        }
        if self.n_modes > noise.n_modes() {
            return Err(SchemeError::TooManyModes { n: self.n_modes, capacity: noise.n_modes() });
        }
        let n = self.n_modes;
        let mut values = Vec::with_capacity(self.steps() + 1);
        values.push(self.initial_state());
        let mut dw = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for k in 0..self.steps() {
            for (i, d) in dw.iter_mut().enumerate() {
                *d = noise.coarse(i, self.level, k);
            }
            let mut next = vec![0.0; n];
            stepper.advance(k, values[k].coeffs(), &stepper.decay, self.delta(), &dw, &mut scratch, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SchemeError::NonFinite { step: k + 1 });
            }
            values.push(ModeVector::from_raw(next));
        }
        Ok(Trajectory { level: self.level, delta: self.delta(), horizon: self.horizon, values })
    }
}

/// Per-configuration constants: `e^{-λ_i δ}` and the drift weights.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    cfg: &'a SchemeConfig,
    decay: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(cfg: &'a SchemeConfig) -> Result<Self, SchemeError> {
        let delta = cfg.delta();
        let lambdas = &cfg.operator.eigenvalues()[..cfg.n_modes];
        Ok(Self {
            cfg,
            decay: lambdas.iter().map(|l| decay_factor(*l, delta)).collect(),
            weights: cfg.drift.weights(&cfg.operator, cfg.n_modes),
        })
    }

    pub fn config(&self) -> &SchemeConfig {
        self.cfg
    }

    /// `e^{-λ_i τ}` for the configuration's modes.
    pub fn decay_factors(&self, tau: f64) -> Vec<f64> {
        self.cfg.operator.eigenvalues()[..self.cfg.n_modes].iter().map(|l| decay_factor(*l, tau)).collect()
    }

    fn check_len(&self, v: &ModeVector) -> Result<(), SchemeError> {
        if v.len() != self.cfg.n_modes {
            return Err(SchemeError::LengthMismatch { expected: self.cfg.n_modes, got: v.len() });
        }
        Ok(())
    }

    /// Drift `b_{kδ}(y)` at grid point `k`.
    pub fn drift_at(&self, k: usize, y: &[f64], out: &mut [f64]) {
        self.cfg.drift.eval_into(&self.weights, k as f64 * self.cfg.delta(), y, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(&self, k: usize, y: &[f64], decay: &[f64], tau: f64, dw: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.drift_at(k, y, scratch);
        apply_update(y, scratch, decay, tau, dw, out);
    }

    pub fn step(&self, k: usize, y: &ModeVector, dw: &ModeVector) -> Result<ModeVector, SchemeError> {
        self.check_len(y)?;
        self.check_len(dw)?;
        if k >= self.cfg.steps() {
            return Err(SchemeError::StepOutOfRange { step: k, steps: self.cfg.steps() });
        }
        let n = self.cfg.n_modes;
        let mut scratch = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.advance(k, y.coeffs(), &self.decay, self.cfg.delta(), dw.coeffs(), &mut scratch, &mut out);
        Ok(ModeVector::from_raw(out))
    }

    pub fn substep(&self, k: usize, y: &ModeVector, tau: f64, partial_dw: &ModeVector) -> Result<ModeVector, SchemeError> {
        self.check_len(y)?;
        self.check_len(partial_dw)?;
        let delta = self.cfg.delta();
        if !(0.0..=delta).contains(&tau) {
            return Err(SchemeError::OutsideStep { tau, delta });
        }
        if k >= self.cfg.steps() {
            return Err(SchemeError::StepOutOfRange { step: k, steps: self.cfg.steps() });
        }
        let n = self.cfg.n_modes;
        let decay = self.decay_factors(tau);
        let mut scratch = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.advance(k, y.coeffs(), &decay, tau, partial_dw.coeffs(), &mut scratch, &mut out);
        Ok(ModeVector::from_raw(out))
    }

    /// Evaluates the continuous-time scheme on the grid of `target_level`
    /// (finer than or equal to the configuration's level), using the path's
    /// partial noise between grid points.
    pub fn refine(&self, traj: &Trajectory, noise: &PathNoise, target_level: u32) -> Result<Vec<ModeVector>, SchemeError> {
        let cfg = self.cfg;
        if target_level < cfg.level {
            return Err(SchemeError::LevelTooFine { level: cfg.level, fine: target_level });
        }
        if target_level > noise.fine_level() {
            return Err(SchemeError::LevelTooFine { level: target_level, fine: noise.fine_level() });
        }
        if traj.values.len() != cfg.steps() + 1 {
            return Err(SchemeError::LengthMismatch { expected: cfg.steps() + 1, got: traj.values.len() });
        }
        let n = cfg.n_modes;
        let ratio = 1usize << (target_level - cfg.level);
        let fine_per_target = 1usize << (noise.fine_level() - target_level);
        let fine_per_step = ratio * fine_per_target;
        let target_delta = cfg.horizon / (1usize << target_level) as f64;
        let offsets: Vec<(f64, Vec<f64>)> = (1..ratio)
            .map(|r| {
                let tau = r as f64 * target_delta;
                (tau, self.decay_factors(tau))
            })
            .collect();

        let mut out = Vec::with_capacity(cfg.steps() * ratio + 1);
        let mut drift = vec![0.0; n];
        let mut dw = vec![0.0; n];
        for k in 0..cfg.steps() {
            let y = traj.values[k].coeffs();
            out.push(traj.values[k].clone());
            if ratio == 1 {
                continue;
            }
            self.drift_at(k, y, &mut drift);
            // Running left-to-right sums reproduce `PathNoise::sum` bit for bit.
            dw.iter_mut().for_each(|d| *d = 0.0);
            let start = k * fine_per_step;
            for (r, (tau, decay)) in offsets.iter().enumerate() {
                let lo = start + r * fine_per_target;
                for (i, d) in dw.iter_mut().enumerate() {
                    for v in &noise.mode_increments(i)[lo..lo + fine_per_target] {
                        *d += v;
                    }
                }
                let mut v = vec![0.0; n];
                apply_update(y, &drift, decay, *tau, &dw, &mut v);
                out.push(ModeVector::from_raw(v));
            }
        }
        out.push(traj.values[cfg.steps()].clone());
        Ok(out)
    }
}

fn decay_factor(lambda: f64, tau: f64) -> f64 {
    (-lambda * tau).exp()
}

/// `out_i = decay_i (y_i + drift_i τ + dw_i)`.
fn apply_update(y: &[f64], drift: &[f64], decay: &[f64], tau: f64, dw: &[f64], out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = decay[i] * (y[i] + drift[i] * tau + dw[i]);
    }
}

/// Grid values `Y_{kδ}`, `k = 0..=2^level`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub level: u32,
    pub delta: f64,
    pub horizon: f64,
    pub values: Vec<ModeVector>,
}

impl Trajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |k| k as f64 * self.delta)
    }

    pub fn n_modes(&self) -> usize {
        self.values.first().map_or(0, ModeVector::len)
    }

    /// CSV with header `t,mode_1,...,mode_n`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> =
            std::iter::once("t".to_string()).chain((1..=self.n_modes()).map(|i| format!("mode_{i}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, v) in self.times().zip(&self.values) {
            write!(w, "{t}")?;
            for c in v.coeffs() {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Result of driving several resolutions with one pass over the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRun {
    pub trajectories: Vec<Trajectory>,
    /// Fine increments consumed per configuration and mode.
    pub consumed_fine: Vec<usize>,
}

/// Runs every configuration on the same lattice path in a single sweep over
/// the fine steps, advancing each one when its own grid point is reached.
pub fn simulate_coupled(configs: &[SchemeConfig], lattice: &NoiseLattice, path_id: u64) -> Result<CoupledRun, SchemeError> {
    let first = configs.first().ok_or(SchemeError::Empty)?;
    for cfg in configs {
        if cfg.horizon != first.horizon {
            return Err(SchemeError::HorizonMismatch { expected: first.horizon, got: cfg.horizon });
        }
        cfg.validate_against(lattice)?;
    }
    let max_modes = configs.iter().map(|c| c.n_modes).max().unwrap_or(0);
    let noise = lattice.path(path_id, max_modes)?;
    simulate_coupled_with_noise(configs, &noise)
}

pub fn simulate_coupled_with_noise(configs: &[SchemeConfig], noise: &PathNoise) -> Result<CoupledRun, SchemeError> {
    let steppers = configs.iter().map(SchemeConfig::stepper).collect::<Result<Vec<_>, _>>()?;
    for cfg in configs {
        if cfg.level > noise.fine_level() {
            return Err(SchemeError::LevelTooFine { level: cfg.level, fine: noise.fine_level() });
        }
        if cfg.n_modes > noise.n_modes() {
            return Err(SchemeError::TooManyModes { n: cfg.n_modes, capacity: noise.n_modes() });
        }
    }
    let spans: Vec<usize> = configs.iter().map(|c| 1usize << (noise.fine_level() - c.level)).collect();
    let mut values: Vec<Vec<ModeVector>> = configs
        .iter()
        .map(|c| {
            let mut v = Vec::with_capacity(c.steps() + 1);
            v.push(c.initial_state());
            v
        })
        .collect();
    let mut acc: Vec<Vec<f64>> = configs.iter().map(|c| vec![0.0; c.n_modes]).collect();
    let mut consumed = vec![0usize; configs.len()];
    let mut scratch = vec![0.0; noise.n_modes()];

    for k in 0..noise.fine_steps() {
        for (c, cfg) in configs.iter().enumerate() {
            for (i, a) in acc[c].iter_mut().enumerate() {
                *a += noise.fine(i, k);
            }
            consumed[c] += 1;
            if (k + 1) % spans[c] == 0 {
                let step = (k + 1) / spans[c] - 1;
                let n = cfg.n_modes;
                let st = &steppers[c];
                let mut next = vec![0.0; n];
                st.advance(step, values[c][step].coeffs(), &st.decay, cfg.delta(), &acc[c], &mut scratch[..n], &mut next);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(SchemeError::NonFinite { step: step + 1 });
                }
                values[c].push(ModeVector::from_raw(next));
                acc[c].iter_mut().for_each(|a| *a = 0.0);
            }
        }
    }
    let trajectories = configs
        .iter()
        .zip(values)
        .map(|(cfg, values)| Trajectory { level: cfg.level, delta: cfg.delta(), horizon: cfg.horizon, values })
        .collect();
    Ok(CoupledRun { trajectories, consumed_fine: consumed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{DriftKind, TimeModulation};

    fn drift(kind: DriftKind, amplitude: f64) -> HolderDriftSpec {
        HolderDriftSpec {
            kind,
            beta: 0.5,
            epsilon: 0.9,
            amplitude,
            time_mod: TimeModulation::Cosine { period: std::f64::consts::TAU },
            cap: 1.0,
        }
    }

    fn config(level: u32, n: usize) -> SchemeConfig {
        SchemeConfig {
            operator: SpectralOperator::heat(32).unwrap(),
            drift: drift(DriftKind::Diagonal, 1.0),
            horizon: 1.0,
            level,
            n_modes: n,
            initial: InitialData::PowerDecay { q: 3.0 },
        }
    }

    #[test]
    fn ei_step_examples() {
        let cfg = SchemeConfig {
            operator: SpectralOperator::heat(1).unwrap(),
            drift: drift(DriftKind::Diagonal, 0.0),
            horizon: 1.0,
            level: 0,
            n_modes: 1,
            initial: InitialData::Explicit { coeffs: vec![1.0] },
        };
        let y = ModeVector::new(vec![1.0]).unwrap();
        let out = cfg.ei_step(0, &y, &ModeVector::new(vec![0.5]).unwrap()).unwrap();
        assert!((out.coeffs()[0] - 0.5518191617571635).abs() < 1e-15);

        let cfg = config(3, 4).with_resolution(3, 4);
        let cfg = SchemeConfig { drift: drift(DriftKind::Diagonal, 0.0), ..cfg };
        let y = ModeVector::new(vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let out = cfg.ei_step(2, &y, &ModeVector::zeros(4)).unwrap();
        assert_eq!(out, cfg.operator.semigroup_apply(cfg.delta(), &y).unwrap());

        assert!(matches!(cfg.ei_step(0, &y, &ModeVector::zeros(3)), Err(SchemeError::LengthMismatch { .. })));
    }

    #[test]
    fn ei_step_is_diagonal() {
        let cfg = config(4, 4);
        let y = ModeVector::new(vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let dw = ModeVector::new(vec![0.1, 0.05, -0.2, 0.0]).unwrap();
        let mut dw2 = dw.clone();
        dw2.coeffs_mut()[1] += 0.5;
        let a = cfg.ei_step(1, &y, &dw).unwrap();
        let b = cfg.ei_step(1, &y, &dw2).unwrap();
        assert_eq!(a.coeffs()[0].to_bits(), b.coeffs()[0].to_bits());
        assert_ne!(a.coeffs()[1], b.coeffs()[1]);
    }

    #[test]
    fn substep_endpoints() {
        let cfg = config(3, 6);
        let y = cfg.initial_state();
        let dw = ModeVector::new(vec![0.1, -0.2, 0.3, 0.05, 0.0, -0.01]).unwrap();
        let full = cfg.interpolate_substep(5, &y, cfg.delta(), &dw).unwrap();
        let step = cfg.ei_step(5, &y, &dw).unwrap();
        for (a, b) in full.coeffs().iter().zip(step.coeffs()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let start = cfg.interpolate_substep(5, &y, 0.0, &ModeVector::zeros(6)).unwrap();
        assert_eq!(start, y);
        assert!(matches!(
            cfg.interpolate_substep(5, &y, 1.5 * cfg.delta(), &dw),
            Err(SchemeError::OutsideStep { .. })
        ));
    }

    #[test]
    fn deterministic_heat_flow_without_noise_or_drift() {
        let lattice = NoiseLattice::new(1, 1.0, 6, 8).unwrap().with_scale(0.0);
        let cfg = SchemeConfig { drift: drift(DriftKind::Diagonal, 0.0), ..config(4, 8) };
        let traj = cfg.simulate_path(&lattice, 0).unwrap();
        let x = cfg.initial_state();
        for (k, y) in traj.values.iter().enumerate() {
            let exact = cfg.operator.semigroup_apply(k as f64 * cfg.delta(), &x).unwrap();
            for (a, b) in y.coeffs().iter().zip(exact.coeffs()) {
                assert!((a - b).abs() <= 1e-13 * b.abs().max(1e-300), "k={k}");
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let lattice = NoiseLattice::new(99, 1.0, 8, 16).unwrap();
        let cfg = config(6, 16);
        let a = cfg.simulate_path(&lattice, 3).unwrap();
        let b = cfg.simulate_path(&lattice, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 65);
        assert_eq!(a.values[0], cfg.initial_state());
        assert_ne!(a, cfg.simulate_path(&lattice, 4).unwrap());
    }

    #[test]
    fn projection_consistency() {
        let lattice = NoiseLattice::new(5, 1.0, 7, 16).unwrap();
        let big = config(7, 16).simulate_path(&lattice, 0).unwrap();
        let small = config(7, 5).simulate_path(&lattice, 0).unwrap();
        for (b, s) in big.values.iter().zip(&small.values) {
            assert_eq!(&b.project(5), s);
        }

        let rank_one = |n| SchemeConfig { drift: drift(DriftKind::RankOne, 1.0), ..config(7, n) };
        let big = rank_one(16).simulate_path(&lattice, 0).unwrap();
        let small = rank_one(5).simulate_path(&lattice, 0).unwrap();
        assert!(big.values.iter().zip(&small.values).skip(1).any(|(b, s)| &b.project(5) != s));
    }

    #[test]
    fn coupled_matches_standalone() {
        let lattice = NoiseLattice::new(11, 1.0, 8, 16).unwrap();
        let configs = [config(3, 16), config(5, 16), config(8, 16), config(6, 7)];
        let run = simulate_coupled(&configs, &lattice, 2).unwrap();
        for (cfg, traj) in configs.iter().zip(&run.trajectories) {
            assert_eq!(traj, &cfg.simulate_path(&lattice, 2).unwrap());
        }
        assert!(run.consumed_fine.iter().all(|&c| c == lattice.fine_steps()));

        let single = simulate_coupled(&configs[..1], &lattice, 2).unwrap();
        assert_eq!(single.trajectories[0], configs[0].simulate_path(&lattice, 2).unwrap());

        let bad = [config(3, 16), SchemeConfig { horizon: 2.0, ..config(3, 16) }];
        assert!(matches!(simulate_coupled(&bad, &lattice, 0), Err(SchemeError::HorizonMismatch { .. })));
        assert!(matches!(simulate_coupled(&[], &lattice, 0), Err(SchemeError::Empty)));
    }

    #[test]
    fn refine_agrees_with_substep_and_grid() {
        let lattice = NoiseLattice::new(8, 1.0, 7, 6).unwrap();
        let cfg = config(3, 6);
        let noise = lattice.path(1, 6).unwrap();
        let traj = cfg.simulate_with_noise(&noise).unwrap();
        let stepper = cfg.stepper().unwrap();
        let refined = stepper.refine(&traj, &noise, 6).unwrap();
        assert_eq!(refined.len(), 65);
        for k in 0..8 {
            assert_eq!(refined[8 * k], traj.values[k]);
            for r in 1..8 {
                let tau = r as f64 * (1.0 / 64.0);
                let dw = noise.partial_vector(6, 16 * k, 16 * k + 2 * r);
                let expected = cfg.interpolate_substep(k, &traj.values[k], tau, &dw).unwrap();
                assert_eq!(refined[8 * k + r], expected);
            }
        }
        // The last sub-step reached with the full increment is the next grid value.
        let dw = noise.partial_vector(6, 16 * 3, 16 * 4);
        let end = cfg.interpolate_substep(3, &traj.values[3], cfg.delta(), &dw).unwrap();
        assert_eq!(end, traj.values[4]);
        // Half step with noise from the finer levels stays finite and bounded.
        let dw = noise.partial_vector(6, 0, 8);
        let half = cfg.interpolate_substep(0, &traj.values[0], cfg.delta() / 2.0, &dw).unwrap();
        assert!(half.is_finite() && half.norm() < 10.0);
    }

    #[test]
    fn second_moments_stable_across_levels() {
        let lattice = NoiseLattice::new(21, 1.0, 8, 16).unwrap();
        let sup_moment = |level: u32| {
            let cfg = config(level, 16);
            let mut sums = vec![0.0; cfg.steps() + 1];
            for path in 0..100 {
                let traj = cfg.simulate_path(&lattice, path).unwrap();
                for (s, y) in sums.iter_mut().zip(&traj.values) {
                    *s += y.norm_sq() / 100.0;
                }
            }
            sums.into_iter().fold(0.0, f64::max)
        };
        let (coarse, fine) = (sup_moment(3), sup_moment(8));
        assert!(coarse.is_finite() && fine.is_finite());
        assert!((coarse / fine - 1.0).abs() < 0.5, "{coarse} vs {fine}");
    }

    #[test]
    fn initial_data_domain() {
        let heat = SpectralOperator::heat(64).unwrap();
        assert_eq!(InitialData::PowerDecay { q: 3.0 }.domain_check(&heat).verdict, TraceVerdict::Converges);
        assert_eq!(InitialData::PowerDecay { q: 2.0 }.domain_check(&heat).verdict, TraceVerdict::Diverges);
        assert_eq!(InitialData::PowerDecay { q: 2.5 }.domain_check(&heat).verdict, TraceVerdict::Diverges);
        let explicit = InitialData::Explicit { coeffs: vec![1.0, 2.0] };
        assert_eq!(explicit.domain_check(&heat).verdict, TraceVerdict::Converges);
        assert_eq!(explicit.domain_check(&heat).partial_sum, 1.0 + 64.0);
        assert_eq!(explicit.coefficients(3).coeffs(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let lattice = NoiseLattice::new(1, 1.0, 4, 8).unwrap();
        assert!(matches!(config(5, 8).validate_against(&lattice), Err(SchemeError::LevelTooFine { .. })));
        assert!(matches!(config(3, 9).validate_against(&lattice), Err(SchemeError::TooManyModes { .. })));
        assert!(matches!(config(3, 33).validate(), Err(SchemeError::TooManyModes { .. })));
        assert!(matches!(config(3, 0).validate(), Err(SchemeError::NoModes)));
    }

    #[test]
    fn csv_export() {
        let lattice = NoiseLattice::new(1, 1.0, 2, 2).unwrap();
        let traj = config(2, 2).simulate_path(&lattice, 0).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,mode_1,mode_2");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0,1,0.125"));
    }
}
