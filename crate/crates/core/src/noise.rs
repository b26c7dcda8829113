//! Cylindrical Wiener increments and exact Ornstein-Uhlenbeck sampling.
//!
//! The lattice is counter-based: the fine increment of path `p`, mode `i`, step
//! `k` is a fixed function of `(seed, p, i, k)`. Each path is its own ChaCha8
//! stream and each mode owns a disjoint block of `2^40` words inside it, so no
//! generator state is shared between paths or carried between queries.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::spectral::{ou_variance, one_minus_exp_over, ModeVector, SpectralError, SpectralOperator};

/// Words per mode block in a path's stream.
const MODE_BLOCK_SHIFT: u32 = 40;
/// Each increment consumes two `u64` draws (four 32-bit words).
const WORDS_PER_INCREMENT: u128 = 4;
/// Largest supported fine level; keeps every mode block inside its `2^40` words.
pub const MAX_FINE_LEVEL: u32 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("level {level} exceeds the lattice's fine level {fine}")]
    LevelTooFine { level: u32, fine: u32 },
    #[error("fine level {0} exceeds the supported maximum {MAX_FINE_LEVEL}")]
    FineLevelTooLarge(u32),
    #[error("mode {mode} is outside the lattice's {n_modes} modes")]
    ModeOutOfRange { mode: usize, n_modes: usize },
    #[error("step {step} is outside 0..{steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("lattice needs at least one mode")]
    NoModes,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Standard normal from exactly two `u64` draws (Box-Muller, cosine branch).
fn box_muller<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = ((a >> 11) as f64 + 1.0) * SCALE; // (0, 1]
    let u2 = (b >> 11) as f64 * SCALE; // [0, 1)
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Brownian increments for every `(path, mode, fine step)` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLattice {
    master_seed: u64,
    horizon: f64,
    fine_level: u32,
    n_modes: usize,
    scale: f64,
}

impl NoiseLattice {
    pub fn new(master_seed: u64, horizon: f64, fine_level: u32, n_modes: usize) -> Result<Self, NoiseError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(NoiseError::Horizon(horizon));
        }
        if fine_level > MAX_FINE_LEVEL {
            return Err(NoiseError::FineLevelTooLarge(fine_level));
        }
        if n_modes == 0 {
            return Err(NoiseError::NoModes);
        }
        Ok(Self { master_seed, horizon, fine_level, n_modes, scale: 1.0 })
    }

    /// Multiplies every increment by `scale`; zero gives a noiseless lattice.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn fine_level(&self) -> u32 {
        self.fine_level
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn fine_steps(&self) -> usize {
        1usize << self.fine_level
    }

    pub fn fine_delta(&self) -> f64 {
        self.horizon / self.fine_steps() as f64
    }

    /// Step size at `level`, i.e. `T / 2^level`.
    pub fn delta(&self, level: u32) -> f64 {
        self.horizon / (1u64 << level) as f64
    }

    fn stream(&self, path_id: u64, mode: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(path_id);
        rng.set_word_pos((mode as u128) << MODE_BLOCK_SHIFT);
        rng
    }

    fn check_mode(&self, mode: usize) -> Result<(), NoiseError> {
        if mode >= self.n_modes {
            return Err(NoiseError::ModeOutOfRange { mode, n_modes: self.n_modes });
        }
        Ok(())
    }

    /// Fine increment `Δβ^{(mode+1)}` over `[kδ, (k+1)δ)` with `δ = T / 2^L`.
    pub fn increment(&self, path_id: u64, mode: usize, step: usize) -> Result<f64, NoiseError> {
        self.check_mode(mode)?;
        if step >= self.fine_steps() {
            return Err(NoiseError::StepOutOfRange { step, steps: self.fine_steps() });
        }
        let mut rng = self.stream(path_id, mode);
        rng.set_word_pos(rng.get_word_pos() + WORDS_PER_INCREMENT * step as u128);
        Ok(self.scale * self.fine_delta().sqrt() * box_muller(&mut rng))
    }

    /// Increment over coarse step `j` at `level`: the fine increments it spans,
    /// summed left to right.
    pub fn coarse_increment(&self, path_id: u64, mode: usize, level: u32, step: usize) -> Result<f64, NoiseError> {
        let span = self.span(level)?;
        let steps = 1usize << level;
        if step >= steps {
            return Err(NoiseError::StepOutOfRange { step, steps });
        }
        let mut acc = 0.0;
        for k in step * span..(step + 1) * span {
            acc += self.increment(path_id, mode, k)?;
        }
        Ok(acc)
    }

    /// Fine steps per coarse step at `level`.
    pub fn span(&self, level: u32) -> Result<usize, NoiseError> {
        if level > self.fine_level {
            return Err(NoiseError::LevelTooFine { level, fine: self.fine_level });
        }
        Ok(1usize << (self.fine_level - level))
    }

    /// All fine increments of one path for the first `n_modes` modes.
    ///
    /// Generated sequentially per mode; the values are identical to
    /// [`NoiseLattice::increment`] at the same indices.
    pub fn path(&self, path_id: u64, n_modes: usize) -> Result<PathNoise, NoiseError> {
        if n_modes > self.n_modes {
            return Err(NoiseError::ModeOutOfRange { mode: n_modes - 1, n_modes: self.n_modes });
        }
        let steps = self.fine_steps();
        let sd = self.scale * self.fine_delta().sqrt();
        let mut data = Vec::with_capacity(n_modes * steps);
        for mode in 0..n_modes {
            let mut rng = self.stream(path_id, mode);
            data.extend((0..steps).map(|_| sd * box_muller(&mut rng)));
        }
        Ok(PathNoise { fine_level: self.fine_level, n_modes, steps, data })
    }
}

/// One path's fine increments, mode-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    fine_level: u32,
    n_modes: usize,
    steps: usize,
    data: Vec<f64>,
}

impl PathNoise {
    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn fine_level(&self) -> u32 {
        self.fine_level
    }

    pub fn fine_steps(&self) -> usize {
        self.steps
    }

    pub fn fine(&self, mode: usize, step: usize) -> f64 {
        self.data[mode * self.steps + step]
    }

    pub fn mode_increments(&self, mode: usize) -> &[f64] {
        &self.data[mode * self.steps..(mode + 1) * self.steps]
    }

    /// `W_{k_end} - W_{k_start}` in one mode, summed left to right from `0.0`.
    pub fn sum(&self, mode: usize, start: usize, end: usize) -> f64 {
        let mut acc = 0.0;
        for v in &self.mode_increments(mode)[start..end] {
            acc += v;
        }
        acc
    }

    /// Same value as [`NoiseLattice::coarse_increment`].
    pub fn coarse(&self, mode: usize, level: u32, step: usize) -> f64 {
        let span = 1usize << (self.fine_level - level);
        self.sum(mode, step * span, (step + 1) * span)
    }

    /// Increment vector over fine steps `start..end` for the first `n` modes.
    pub fn partial_vector(&self, n: usize, start: usize, end: usize) -> ModeVector {
        ModeVector::from_raw((0..n).map(|m| self.sum(m, start, end)).collect())
    }
}

/// Current value of the Ornstein-Uhlenbeck process `dZ = AZ dt + dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct OUState {
    pub modes: ModeVector,
    pub t: f64,
}

/// One exact transition of the Ornstein-Uhlenbeck process over `delta`.
pub fn ou_exact_step<R: Rng + ?Sized>(
    op: &SpectralOperator,
    state: &OUState,
    delta: f64,
    rng: &mut R,
) -> Result<OUState, NoiseError> {
    if !(delta > 0.0) {
        return Err(NoiseError::NonPositiveStep(delta));
    }
    let mean = op.semigroup_apply(delta, &state.modes)?;
    let next = mean
        .coeffs()
        .iter()
        .zip(op.eigenvalues())
        .map(|(m, &l)| {
            let z: f64 = rng.sample(StandardNormal);
            m + ou_variance(l, delta).sqrt() * z
        })
        .collect();
    Ok(OUState { modes: ModeVector::from_raw(next), t: state.t + delta })
}

/// Second moments of the pair `(F, I)` in one mode, where `F = ∫_0^t e^{-λ(t-s)} dβ_s`
/// is the O-U fluctuation and `I = ∫_0^t e^{-λs} dβ_s` the Bismut weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointMoments {
    pub var_fluctuation: f64,
    pub var_weight: f64,
    pub covariance: f64,
    /// `I = slope · F + sqrt(residual) · Z'` with `Z'` independent of `F`.
    pub slope: f64,
    pub residual: f64,
}

pub fn joint_moments(lambda: f64, t: f64) -> JointMoments {
    let x = lambda * t;
    let phi = one_minus_exp_over(2.0 * x);
    let var = t * phi;
    let covariance = t * (-x).exp();
    let slope = (-x).exp() / phi;
    let residual = if x < 0.05 {
        // φ(2x)² - e^{-2x} = e^{-2x}(s² - 1) with s = sinh(x)/x.
        let x2 = x * x;
        let s_minus_one = x2 / 6.0 + x2 * x2 / 120.0 + x2 * x2 * x2 / 5040.0;
        t * (-2.0 * x).exp() * s_minus_one * (2.0 + s_minus_one) / phi
    } else {
        (var - slope * covariance).max(0.0)
    };
    JointMoments { var_fluctuation: var, var_weight: var, covariance, slope, residual }
}

/// Draws `Z_t^x` together with `∫_0^t ⟨e^{sA}η, dW_s⟩` from their exact joint law.
pub fn ou_joint_with_weight<R: Rng + ?Sized>(
    op: &SpectralOperator,
    x: &ModeVector,
    t: f64,
    eta: &ModeVector,
    rng: &mut R,
) -> Result<(ModeVector, f64), NoiseError> {
    if !(t > 0.0) {
        return Err(NoiseError::NonPositiveStep(t));
    }
    if x.len() != eta.len() {
        return Err(SpectralError::LengthMismatch { left: x.len(), right: eta.len() }.into());
    }
    let mean = op.semigroup_apply(t, x)?;
    let mut z = Vec::with_capacity(x.len());
    let mut weight = 0.0;
    for ((m, &l), &e) in mean.coeffs().iter().zip(op.eigenvalues()).zip(eta.coeffs()) {
        let jm = joint_moments(l, t);
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let f = jm.var_fluctuation.sqrt() * z1;
        z.push(m + f);
        weight += e * (jm.slope * f + jm.residual.sqrt() * z2);
    }
    Ok((ModeVector::from_raw(z), weight))
}
