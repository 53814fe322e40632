//! Closed-form Schrödinger bridge between Gaussian marginals.
//!
//! The marginals are mapped to coordinates in which the reference transition
//! becomes a unit-variance translation, the static problem is solved there by
//! the Gaussian entropic transport formula, and the resulting plan is pushed
//! through the reference bridges. The bridge is a Markov Gaussian process with
//! mean `nu_t` and covariance `Xi_{s,t}`; its generating SDE has an affine drift.

use nalgebra::{DMatrix, DVector};

use crate::bridge::two_time_cov;
use crate::error::{Error, Result};
use crate::kernel::KernelCache;
use crate::linalg::{inv_sqrtm_pd, min_eigenvalue, psd_factor, sqrtm_psd, symmetrize};
use crate::process::Gaussian;
use crate::rng::{standard_normal, Rng};

/// Smallest accepted marginal covariance eigenvalue.
pub const MIN_MARGINAL_EIG: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GSBProblem {
    pub cache: KernelCache,
    pub rho0: Gaussian,
    pub rho_t: Gaussian,
}

impl GSBProblem {
    pub fn new(cache: KernelCache, rho0: Gaussian, rho_t: Gaussian) -> Result<Self> {
        let d = cache.dim();
        if rho0.dim() != d || rho_t.dim() != d {
            return Err(Error::invalid(format!(
                "marginal dimensions ({}, {}) do not match process dimension {d}",
                rho0.dim(),
                rho_t.dim()
            )));
        }
        for (name, g) in [("rho0", &rho0), ("rhoT", &rho_t)] {
            let min = min_eigenvalue(g.cov());
            if !(min > MIN_MARGINAL_EIG) {
                return Err(Error::Degenerate(format!(
                    "{name} covariance is not positive definite (min eigenvalue {min:.3e}); \
                     add jitter explicitly if intended"
                )));
            }
        }
        Ok(Self { cache, rho0, rho_t })
    }

    /// As [`GSBProblem::new`] after adding `jitter * I` to both covariances.
    pub fn with_jitter(cache: KernelCache, rho0: Gaussian, rho_t: Gaussian, jitter: f64) -> Result<Self> {
        let bump = |g: &Gaussian| {
            let d = g.dim();
            Gaussian::new(g.mean().clone(), g.cov() + DMatrix::identity(d, d) * jitter)
        };
        Self::new(cache, bump(&rho0)?, bump(&rho_t)?)
    }
}

/// Marginals in whitened end-time coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
    pub mean_t: DVector<f64>,
    pub cov_t: DMatrix<f64>,
}

pub fn transform_marginals(problem: &GSBProblem) -> Result<Transformed> {
    let cache = &problem.cache;
    let w = cache.sigma_t_invroot()?;
    let e = cache.exp_at(cache.horizon())?;
    let mean0 = w * cache.mean_from(problem.rho0.mean(), cache.horizon())?;
    let cov0 = symmetrize(&(w * &e * problem.rho0.cov() * e.transpose() * w));
    let mean_t = w * problem.rho_t.mean();
    let cov_t = symmetrize(&(w * problem.rho_t.cov() * w));
    Ok(Transformed {
        mean0,
        cov0,
        mean_t,
        cov_t,
    })
}

/// Cross-covariance of the entropic plan between `N(., a)` and `N(., b)` for
/// squared-distance cost with regularisation `sigma2`:
/// `a^{1/2} (a^{1/2} b a^{1/2} + sigma2^2/4 I)^{1/2} a^{-1/2} - sigma2/2 I`.
pub fn entropic_cross_cov_eps(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let ra = sqrtm_psd(a)?;
    let ra_inv = inv_sqrtm_pd(a)?;
    let inner = symmetrize(&(&ra * b * &ra + DMatrix::identity(d, d) * (0.25 * sigma2 * sigma2)));
    Ok(&ra * sqrtm_psd(&inner)? * ra_inv - DMatrix::identity(d, d) * (0.5 * sigma2))
}

/// Cross-covariance for unit regularisation, as used by the bridge.
pub fn entropic_cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    entropic_cross_cov_eps(a, b, 1.0)
}

/// Entropic transport value `1/2 |a-b|^2 + 1/2 (tr A + tr B - 2 tr C + s log det(C/s + I))`
/// between Gaussians; `sigma2 = 0` gives half the squared Bures-Wasserstein distance.
pub fn eot_gaussian_value(alpha: &Gaussian, beta: &Gaussian, sigma2: f64) -> Result<f64> {
    if alpha.dim() != beta.dim() {
        return Err(Error::invalid("Gaussians differ in dimension"));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid("sigma2 must be nonnegative"));
    }
    let d = alpha.dim();
    let ra = sqrtm_psd(alpha.cov())?;
    let inner = symmetrize(&(&ra * beta.cov() * &ra + DMatrix::identity(d, d) * (0.25 * sigma2 * sigma2)));
    let root = sqrtm_psd(&inner)?;
    // C is similar to root - sigma2/2 I, so its trace and determinant follow from root.
    let tr_c = root.trace() - 0.5 * sigma2 * d as f64;
    let mut value = alpha.cov().trace() + beta.cov().trace() - 2.0 * tr_c;
    if sigma2 > 0.0 {
        let shifted = &root / sigma2 + DMatrix::identity(d, d) * 0.5;
        let logdet: f64 = symmetrize(&shifted)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|l| l.ln())
            .sum();
        value += sigma2 * logdet;
    }
    let diff = alpha.mean() - beta.mean();
    Ok(0.5 * diff.norm_squared() + 0.5 * value)
}

/// Time-dependent coefficients of the bridge and their time derivatives.
///
/// `nu_t = start_weight * mean0 + end_weight * mean_t + offset`.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub t: f64,
    pub gamma: DMatrix<f64>,
    pub gamma_rate: DMatrix<f64>,
    pub start_weight: DMatrix<f64>,
    pub start_weight_rate: DMatrix<f64>,
    pub end_weight: DMatrix<f64>,
    pub end_weight_rate: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub offset_rate: DVector<f64>,
    /// Bridge covariance `Omega_t`.
    pub bridge_cov: DMatrix<f64>,
    /// `d/dt' Omega_{t,t'}` at `t' = t`.
    pub bridge_cov_rate: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GSBSolution {
    cache: KernelCache,
    rho0: Gaussian,
    rho_t: Gaussian,
    transformed: Transformed,
    cross_cov: DMatrix<f64>,
    plan_factor: DMatrix<f64>,
}

/// Affine drift `mean_rate + matrix (x - mean)` at a fixed time.
#[derive(Debug, Clone)]
pub struct AffineDrift {
    pub t: f64,
    pub mean: DVector<f64>,
    pub mean_rate: DVector<f64>,
    pub matrix: DMatrix<f64>,
}

impl AffineDrift {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mean_rate + &self.matrix * (x - &self.mean)
    }
}

pub fn solve(problem: GSBProblem) -> Result<GSBSolution> {
    let transformed = transform_marginals(&problem)?;
    let cross_cov = entropic_cross_cov(&transformed.cov0, &transformed.cov_t)?;
    let d = problem.cache.dim();
    let mut joint = DMatrix::zeros(2 * d, 2 * d);
    joint.view_mut((0, 0), (d, d)).copy_from(&transformed.cov0);
    joint.view_mut((0, d), (d, d)).copy_from(&cross_cov);
    joint.view_mut((d, 0), (d, d)).copy_from(&cross_cov.transpose());
    joint.view_mut((d, d), (d, d)).copy_from(&transformed.cov_t);
    let plan_factor = psd_factor(&symmetrize(&joint));
    Ok(GSBSolution {
        cache: problem.cache,
        rho0: problem.rho0,
        rho_t: problem.rho_t,
        transformed,
        cross_cov,
        plan_factor,
    })
}

impl GSBSolution {
    pub fn cache(&self) -> &KernelCache {
        &self.cache
    }

    pub fn transformed(&self) -> &Transformed {
        &self.transformed
    }

    pub fn cross_cov(&self) -> &DMatrix<f64> {
        &self.cross_cov
    }

    pub fn rho0(&self) -> &Gaussian {
        &self.rho0
    }

    pub fn rho_t(&self) -> &Gaussian {
        &self.rho_t
    }

    fn check(&self, t: f64) -> Result<f64> {
        let h = self.cache.horizon();
        if !(t >= -1e-12 * h && t <= h * (1.0 + 1e-12)) {
            return Err(Error::Domain { t, lo: 0.0, hi: h });
        }
        Ok(t.clamp(0.0, h))
    }

    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        let t = self.check(t)?;
        let cache = &self.cache;
        let process = cache.process();
        let a = process.drift();
        let q = process.noise_cov();
        let m = process.target();
        let d = cache.dim();
        let horizon = cache.horizon();
        let root = cache.sigma_t_root();
        let phi_inv = cache.phi_t_inv()?;

        let phi = cache.phi(t)?;
        let exp_rem = cache.exp_at(horizon - t)?;
        let exp_back = cache.exp_at(t - horizon)?;
        let gamma = &phi * exp_rem.transpose() * phi_inv;
        let gamma_rate = (a * &phi + &q) * exp_rem.transpose() * phi_inv;
        let back_rate = a * &exp_back;
        let pull = &gamma * &exp_rem;
        let bridge_cov = symmetrize(&(&phi - &pull * &phi));
        let bridge_cov_rate = &phi * a.transpose() - &pull * (&phi * a.transpose() + &q);
        let eye = DMatrix::<f64>::identity(d, d);
        Ok(Coefficients {
            t,
            start_weight: (&exp_back - &gamma) * root,
            start_weight_rate: (&back_rate - &gamma_rate) * root,
            end_weight: &gamma * root,
            end_weight_rate: &gamma_rate * root,
            offset: (&eye - &exp_back) * m,
            offset_rate: -(&back_rate * m),
            gamma,
            gamma_rate,
            bridge_cov,
            bridge_cov_rate,
        })
    }

    fn mean_of(&self, c: &Coefficients) -> DVector<f64> {
        &c.start_weight * &self.transformed.mean0 + &c.end_weight * &self.transformed.mean_t + &c.offset
    }

    fn mean_rate_of(&self, c: &Coefficients) -> DVector<f64> {
        &c.start_weight_rate * &self.transformed.mean0
            + &c.end_weight_rate * &self.transformed.mean_t
            + &c.offset_rate
    }

    /// Plan contribution `A_s X A_t^T + ...` for two coefficient sets.
    fn plan_cov(&self, s: (&DMatrix<f64>, &DMatrix<f64>), t: (&DMatrix<f64>, &DMatrix<f64>)) -> DMatrix<f64> {
        let tr = &self.transformed;
        let c = &self.cross_cov;
        s.0 * &tr.cov0 * t.0.transpose()
            + s.0 * c * t.1.transpose()
            + s.1 * c.transpose() * t.0.transpose()
            + s.1 * &tr.cov_t * t.1.transpose()
    }

    pub fn mean(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.mean_of(&self.coefficients(t)?))
    }

    /// `d/dt nu_t`.
    pub fn mean_rate(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.mean_rate_of(&self.coefficients(t)?))
    }

    /// `Xi_{s,t} = Cov(X_s, X_t)` for `s <= t`.
    pub fn cov(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        let s = self.check(s)?;
        let t = self.check(t)?;
        if s > t {
            return Err(Error::Domain { t: s, lo: 0.0, hi: t });
        }
        let cs = self.coefficients(s)?;
        let ct = self.coefficients(t)?;
        let bridge = two_time_cov(&self.cache, s, t)?;
        let out = bridge + self.plan_cov((&cs.start_weight, &cs.end_weight), (&ct.start_weight, &ct.end_weight));
        Ok(if s == t { symmetrize(&out) } else { out })
    }

    pub fn marginal(&self, t: f64) -> Result<Gaussian> {
        let c = self.coefficients(t)?;
        let cov = &c.bridge_cov + self.plan_cov((&c.start_weight, &c.end_weight), (&c.start_weight, &c.end_weight));
        Gaussian::new(self.mean_of(&c), symmetrize(&cov))
    }

    /// Drift of the generating SDE at `t` (clamped to the bridge time range).
    pub fn drift_at(&self, t: f64) -> Result<AffineDrift> {
        let t = self.cache.clamp_time(self.check(t)?);
        let c = self.coefficients(t)?;
        let w = (&c.start_weight, &c.end_weight);
        let xi = symmetrize(&(&c.bridge_cov + self.plan_cov(w, w)));
        let s = &c.bridge_cov_rate + self.plan_cov(w, (&c.start_weight_rate, &c.end_weight_rate));
        let chol = xi
            .cholesky()
            .ok_or_else(|| Error::Degenerate(format!("marginal covariance singular at t = {t}")))?;
        // K = S^T Xi^{-1}  <=>  Xi K^T = S
        let matrix = chol.solve(&s).transpose();
        Ok(AffineDrift {
            t,
            mean: self.mean_of(&c),
            mean_rate: self.mean_rate_of(&c),
            matrix,
        })
    }

    /// Draw an endpoint pair `(x0, xT)` from the optimal static plan.
    pub fn sample_plan(&self, rng: &mut Rng) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.cache.dim();
        let z = standard_normal(rng, 2 * d);
        let joint = &self.plan_factor * z;
        let tr = &self.transformed;
        let bar0 = &tr.mean0 + joint.rows(0, d);
        let bar_t = &tr.mean_t + joint.rows(d, d);
        let root = self.cache.sigma_t_root();
        let m = self.cache.process().target();
        let back = self.cache.exp_at(-self.cache.horizon())?;
        let x0 = back * (root * bar0 - m) + m;
        Ok((x0, root * bar_t))
    }
}

pub fn gsb_mean(sol: &GSBSolution, t: f64) -> Result<DVector<f64>> {
    sol.mean(t)
}

pub fn gsb_cov(sol: &GSBSolution, s: f64, t: f64) -> Result<DMatrix<f64>> {
    sol.cov(s, t)
}

pub fn gsb_drift(sol: &GSBSolution, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(sol.drift_at(t)?.eval(x))
}

pub fn gsb_marginal_interpolate(sol: &GSBSolution, times: &[f64]) -> Result<Vec<Gaussian>> {
    times.iter().map(|&t| sol.marginal(t)).collect()
}
