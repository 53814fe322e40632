//! Reference process conditioned on both endpoints.
//!
//! The bridge law at time `t` is Gaussian with mean
//! `mu_t^{x0} + Gamma_t (x_T - mu_T^{x0})` and covariance
//! `Omega_t = Phi_t - Gamma_t e^{(T-t)A} Phi_t`, where
//! `Gamma_t = Phi_t e^{(T-t)A^T} Phi_T^{-1}`. Everything that depends on `t`
//! alone lives in [`BridgeKernel`], so one kernel serves many pins.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::KernelCache;
use crate::linalg::{min_eigenvalue, psd_factor, psd_inverse, symmetrize};
use crate::rng::{rng, standard_normal, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct BridgePin {
    pub x0: DVector<f64>,
    pub xt: DVector<f64>,
    pub horizon: f64,
}

impl BridgePin {
    pub fn new(x0: DVector<f64>, xt: DVector<f64>, horizon: f64) -> Result<Self> {
        if x0.len() != xt.len() {
            return Err(Error::invalid("bridge endpoints differ in dimension"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("bridge horizon must be positive"));
        }
        if x0.iter().chain(xt.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("bridge endpoints must be finite"));
        }
        Ok(Self { x0, xt, horizon })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_pin(cache: &KernelCache, pin: &BridgePin) -> Result<()> {
    if pin.x0.len() != cache.dim() {
        return Err(Error::invalid(format!(
            "pin dimension {} does not match process dimension {}",
            pin.x0.len(),
            cache.dim()
        )));
    }
    if (pin.horizon - cache.horizon()).abs() > 1e-12 * cache.horizon() {
        return Err(Error::invalid("pin horizon differs from the cache horizon"));
    }
    Ok(())
}

/// `Gamma_t` and `Omega_t` without clamping or inversion.
fn gain_and_cov(cache: &KernelCache, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let phi_t = cache.phi(t)?;
    let exp_rem = cache.exp_at(cache.horizon() - t)?;
    let gamma = &phi_t * exp_rem.transpose() * cache.phi_t_inv()?;
    let omega = symmetrize(&(&phi_t - &gamma * &exp_rem * &phi_t));
    Ok((gamma, omega, phi_t))
}

/// Time-dependent pieces of the bridge, shared by every pin.
#[derive(Debug, Clone)]
pub struct BridgeKernel {
    t: f64,
    exp_t: DMatrix<f64>,
    exp_back: DMatrix<f64>,
    exp_full: DMatrix<f64>,
    gamma: DMatrix<f64>,
    omega: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
    omega_root: DMatrix<f64>,
    control_gain: DMatrix<f64>,
    drift: DMatrix<f64>,
    target: DVector<f64>,
    half_noise: DMatrix<f64>,
}

impl BridgeKernel {
    /// Build at `t`, clamped to `[eps_t, T - eps_t]`.
    pub fn new(cache: &KernelCache, t: f64) -> Result<Self> {
        if !(t.is_finite() && t >= -1e-12 && t <= cache.horizon() * (1.0 + 1e-12)) {
            return Err(Error::Domain {
                t,
                lo: 0.0,
                hi: cache.horizon(),
            });
        }
        let t = cache.clamp_time(t);
        let horizon = cache.horizon();
        let (gamma, omega, _) = gain_and_cov(cache, t)?;
        let omega_inv = psd_inverse(&omega)?;
        let omega_root = psd_factor(&omega);

        let lam = cache.lam_noise(t)?;
        let lmax = lam.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(min_eigenvalue(&lam) > 1e-14 * lmax) {
            return Err(Error::Degenerate(format!("Lambda_t singular at t = {t}")));
        }
        let lam_inv = lam
            .cholesky()
            .ok_or_else(|| Error::Degenerate(format!("Lambda_t singular at t = {t}")))?
            .inverse();
        let process = cache.process();
        let noise = process.noise_cov();
        Ok(Self {
            t,
            exp_t: cache.exp_at(t)?,
            exp_back: cache.exp_at(-(horizon - t))?,
            exp_full: cache.exp_at(horizon)?,
            gamma,
            omega,
            omega_inv,
            omega_root,
            control_gain: &noise * lam_inv,
            drift: process.drift().clone(),
            target: process.target().clone(),
            half_noise: noise * 0.5,
        })
    }

    /// The (clamped) time this kernel was built at.
    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn cov_inv(&self) -> &DMatrix<f64> {
        &self.omega_inv
    }

    /// PSD factor `L` with `L L^T = Omega_t`.
    pub fn cov_root(&self) -> &DMatrix<f64> {
        &self.omega_root
    }

    /// Pull target `k_t = e^{-(T-t)A}(x_T - m) + m`.
    pub fn pull_target(&self, pin: &BridgePin) -> DVector<f64> {
        &self.exp_back * (&pin.xt - &self.target) + &self.target
    }

    pub fn mean(&self, pin: &BridgePin) -> DVector<f64> {
        let m = &self.target;
        let mu_t = &self.exp_t * (&pin.x0 - m) + m;
        let mu_end = &self.exp_full * (&pin.x0 - m) + m;
        mu_t + &self.gamma * (&pin.xt - mu_end)
    }

    /// Conditioning drift `sigma sigma^T Lambda_sigma^{-1} (k_t - y)`.
    pub fn control(&self, pin: &BridgePin, y: &DVector<f64>) -> DVector<f64> {
        &self.control_gain * (self.pull_target(pin) - y)
    }

    pub fn score(&self, pin: &BridgePin, x: &DVector<f64>) -> DVector<f64> {
        &self.omega_inv * (self.mean(pin) - x)
    }

    /// Score given a precomputed bridge mean.
    pub fn score_from_mean(&self, mean: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.omega_inv * (mean - x)
    }

    pub fn flow(&self, pin: &BridgePin, x: &DVector<f64>) -> DVector<f64> {
        let s = self.score(pin, x);
        &self.drift * (x - &self.target) + self.control(pin, x) - &self.half_noise * s
    }

    /// Flow and score at `x` sharing one mean evaluation.
    pub fn flow_and_score(&self, pin: &BridgePin, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = self.score_from_mean(&self.mean(pin), x);
        let u = &self.drift * (x - &self.target) + self.control(pin, x) - &self.half_noise * &s;
        (u, s)
    }

    pub fn sample(&self, pin: &BridgePin, rng: &mut Rng) -> DVector<f64> {
        let z = standard_normal(rng, self.target.len());
        self.mean(pin) + &self.omega_root * z
    }
}

pub fn bridge_control(
    cache: &KernelCache,
    pin: &BridgePin,
    t: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_pin(cache, pin)?;
    Ok(BridgeKernel::new(cache, t)?.control(pin, y))
}

/// Bridge mean and covariance at `t` (clamped to the bridge time range).
pub fn bridge_moments(cache: &KernelCache, pin: &BridgePin, t: f64) -> Result<BridgeMoments> {
    check_pin(cache, pin)?;
    if !(t >= -1e-12 && t <= cache.horizon() * (1.0 + 1e-12)) {
        return Err(Error::Domain {
            t,
            lo: 0.0,
            hi: cache.horizon(),
        });
    }
    bridge_moments_exact(cache, pin, cache.clamp_time(t))
}

/// Bridge moments at any `t` in `[0, T]` with no endpoint clamp.
pub fn bridge_moments_exact(cache: &KernelCache, pin: &BridgePin, t: f64) -> Result<BridgeMoments> {
    check_pin(cache, pin)?;
    let (gamma, omega, _) = gain_and_cov(cache, t)?;
    let mu_t = cache.mean_from(&pin.x0, t)?;
    let mu_end = cache.mean_from(&pin.x0, cache.horizon())?;
    Ok(BridgeMoments {
        mean: mu_t + gamma * (&pin.xt - mu_end),
        cov: omega,
    })
}

/// `Cov(X_s, X_t)` under the bridge for `s <= t`.
pub fn bridge_two_time_cov(cache: &KernelCache, pin: &BridgePin, s: f64, t: f64) -> Result<DMatrix<f64>> {
    check_pin(cache, pin)?;
    if s > t {
        return Err(Error::Domain {
            t: s,
            lo: 0.0,
            hi: t,
        });
    }
    two_time_cov(cache, s, t)
}

pub(crate) fn two_time_cov(cache: &KernelCache, s: f64, t: f64) -> Result<DMatrix<f64>> {
    let horizon = cache.horizon();
    let phi_s = cache.phi(s)?;
    let phi_t = cache.phi(t)?;
    let lead = &phi_s * cache.exp_at(t - s)?.transpose();
    let tail = &phi_s * cache.exp_at(horizon - s)?.transpose() * cache.phi_t_inv()? * cache.exp_at(horizon - t)? * phi_t;
    let out = lead - tail;
    Ok(if s == t { symmetrize(&out) } else { out })
}

pub fn bridge_score(cache: &KernelCache, pin: &BridgePin, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_pin(cache, pin)?;
    Ok(BridgeKernel::new(cache, t)?.score(pin, x))
}

pub fn bridge_flow(cache: &KernelCache, pin: &BridgePin, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_pin(cache, pin)?;
    Ok(BridgeKernel::new(cache, t)?.flow(pin, x))
}

pub fn bridge_sample(cache: &KernelCache, pin: &BridgePin, t: f64, seed: u64) -> Result<DVector<f64>> {
    check_pin(cache, pin)?;
    Ok(BridgeKernel::new(cache, t)?.sample(pin, &mut rng(seed)))
}
