//! Schrödinger-bridge numerics with zero drift: marginal sampling between a
//! data endpoint `z0` (t = 0) and a prior endpoint `zT` (t = 1), the
//! noise-prediction target, the `ẑ0` estimator and the first-order SDE sampler.
//!
//! With `f ≡ 0` both `α_t` and `ᾱ_t` are identically 1, and the schedule reduces
//! to `σ_t² = ∫₀ᵗ g²` and `σ̄_t² = σ_1² − σ_t²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Lower bound on training times, keeping `σ_t` away from zero.
pub const T_MIN: f64 = 1e-4;
pub const DEFAULT_STEPS: usize = 50;

/// A diffusion coefficient `g²(t)` on `[0, 1]`, described by its integral.
pub trait NoiseSchedule {
    /// `σ_t² = ∫₀ᵗ g²(τ) dτ`; must be strictly increasing with `σ_0² = 0`.
    fn sigma_sq(&self, t: f64) -> f64;

    fn sigma1_sq(&self) -> f64 {
        self.sigma_sq(1.0)
    }
}

/// Symmetric triangular diffusion: `g²` rises linearly from `g_min²` at the
/// endpoints to `g_max²` at `t = 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    pub g_min_sq: f64,
    pub g_max_sq: f64,
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        Self {
            g_min_sq: 0.001,
            g_max_sq: 1.0,
        }
    }
}

impl BridgeSchedule {
    pub fn new(g_min_sq: f64, g_max_sq: f64) -> Result<Self> {
        if !(g_min_sq > 0.0 && g_max_sq >= g_min_sq && g_max_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < g_min² <= g_max², got {g_min_sq}, {g_max_sq}"
            )));
        }
        Ok(Self { g_min_sq, g_max_sq })
    }

    /// Integral over the rising half, valid for `t ∈ [0, 1/2]`.
    fn rising(&self, t: f64) -> f64 {
        self.g_min_sq * t + (self.g_max_sq - self.g_min_sq) * t * t
    }
}

impl NoiseSchedule for BridgeSchedule {
    fn sigma_sq(&self, t: f64) -> f64 {
        if t <= 0.5 {
            self.rising(t)
        } else {
            self.sigma1_sq() - self.rising(1.0 - t)
        }
    }

    fn sigma1_sq(&self) -> f64 {
        2.0 * self.rising(0.5)
    }
}

/// Closed-form schedule values at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
    pub sigma_bar: f64,
    pub sigma1: f64,
    pub sigma_sq: f64,
    pub sigma_bar_sq: f64,
    pub sigma1_sq: f64,
}

pub fn schedule_coeffs<S: NoiseSchedule + ?Sized>(sched: &S, t: f64) -> Result<Coeffs> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime(t));
    }
    let sigma1_sq = sched.sigma1_sq();
    let sigma_sq = sched.sigma_sq(t);
    let sigma_bar_sq = sigma1_sq - sigma_sq;
    Ok(Coeffs {
        alpha: 1.0,
        alpha_bar: 1.0,
        sigma: sigma_sq.sqrt(),
        sigma_bar: sigma_bar_sq.max(0.0).sqrt(),
        sigma1: sigma1_sq.sqrt(),
        sigma_sq,
        sigma_bar_sq,
        sigma1_sq,
    })
}

/// Draws `z_t` from the bridge marginal given the endpoints and a standard-normal `eps`.
pub fn forward_sample<S: NoiseSchedule + ?Sized>(
    z0: &Tensor,
    z_t1: &Tensor,
    t: f64,
    eps: &Tensor,
    sched: &S,
) -> Result<Tensor> {
    z0.check_same_shape(z_t1)?;
    z0.check_same_shape(eps)?;
    let c = schedule_coeffs(sched, t)?;
    let a = c.alpha * c.sigma_bar_sq / c.sigma1_sq;
    let b = c.alpha_bar * c.sigma_sq / c.sigma1_sq;
    let n = c.alpha * c.sigma_bar * c.sigma / c.sigma1;
    let mut out = Tensor::zeros(z0.rows(), z0.cols());
    for (o, ((x0, x1), e)) in out
        .data_mut()
        .iter_mut()
        .zip(z0.data().iter().zip(z_t1.data()).zip(eps.data()))
    {
        *o = a * x0 + b * x1 + n * e;
    }
    Ok(out)
}

/// Noise-prediction regression target `(z_t − α_t z0) / (α_t σ_t)`.
pub fn loss_target<S: NoiseSchedule + ?Sized>(z_t: &Tensor, z0: &Tensor, t: f64, sched: &S) -> Result<Tensor> {
    z_t.check_same_shape(z0)?;
    let c = schedule_coeffs(sched, t)?;
    if c.sigma <= 0.0 {
        return Err(Error::InvalidTime(t));
    }
    Ok(z_t.zip_map(z0, |zt, x0| (zt - c.alpha * x0) / (c.alpha * c.sigma)))
}

/// `ẑ0 = z_t / α_t − σ_t ε̂`.
pub fn estimate_z0<S: NoiseSchedule + ?Sized>(z_t: &Tensor, eps_hat: &Tensor, t: f64, sched: &S) -> Result<Tensor> {
    z_t.check_same_shape(eps_hat)?;
    let c = schedule_coeffs(sched, t)?;
    Ok(z_t.zip_map(eps_hat, |zt, e| zt / c.alpha - c.sigma * e))
}

/// One first-order step of the reverse SDE from time `s` down to `t < s`.
pub fn sde_step<S: NoiseSchedule + ?Sized>(
    z_s: &Tensor,
    z0_hat: &Tensor,
    s: f64,
    t: f64,
    eps: &Tensor,
    sched: &S,
) -> Result<Tensor> {
    if !(t < s) {
        return Err(Error::InvalidArgument(format!("sde step needs t < s, got s={s}, t={t}")));
    }
    z_s.check_same_shape(z0_hat)?;
    z_s.check_same_shape(eps)?;
    let cs = schedule_coeffs(sched, s)?;
    let ct = schedule_coeffs(sched, t)?;
    if cs.sigma_sq <= 0.0 {
        return Err(Error::InvalidTime(s));
    }
    let ratio = ct.sigma_sq / cs.sigma_sq;
    let a = ct.alpha * ratio / cs.alpha;
    let b = ct.alpha * (1.0 - ratio);
    let n = ct.alpha * ct.sigma * (1.0 - ratio).max(0.0).sqrt();
    let mut out = Tensor::zeros(z_s.rows(), z_s.cols());
    for (o, ((zs, x0), e)) in out
        .data_mut()
        .iter_mut()
        .zip(z_s.data().iter().zip(z0_hat.data()).zip(eps.data()))
    {
        *o = a * zs + b * x0 + n * e;
    }
    Ok(out)
}

/// Uniform grid from 1 down to 0 with `n_steps` intervals.
pub fn time_grid(n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|i| 1.0 - i as f64 / n_steps as f64)
        .collect()
}

/// Reverse sampler driven by a `ẑ0` estimator, called as `z0_hat(z_t, t, step_index)`.
/// One standard-normal tensor is drawn per step, including the last.
pub fn sample_with_z0<S, R, F>(
    sched: &S,
    z_t1: &Tensor,
    n_steps: usize,
    rng: &mut R,
    mut z0_hat: F,
) -> Result<Tensor>
where
    S: NoiseSchedule + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(&Tensor, f64, usize) -> Result<Tensor>,
{
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let grid = time_grid(n_steps);
    let mut z = z_t1.clone();
    for (i, pair) in grid.windows(2).enumerate() {
        let (s, t) = (pair[0], pair[1]);
        let x0 = z0_hat(&z, s, i)?;
        let eps = Tensor::randn(z.rows(), z.cols(), rng);
        z = sde_step(&z, &x0, s, t, &eps, sched)?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {i} (t = {t})")));
        }
    }
    Ok(z)
}

/// Reverse sampler driven by a noise predictor `eps_hat(z_t, t)`.
pub fn sample<S, R, F>(sched: &S, z_t1: &Tensor, n_steps: usize, rng: &mut R, mut eps_hat: F) -> Result<Tensor>
where
    S: NoiseSchedule + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    sample_with_z0(sched, z_t1, n_steps, rng, |z, t, _| {
        let e = eps_hat(z, t)?;
        estimate_z0(z, &e, t, sched)
    })
}
