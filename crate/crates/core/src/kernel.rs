//! Cached time integrals of the reference process.
//!
//! `Phi_t = int_0^t e^{uA} sigma sigma^T e^{uA^T} du` is the covariance of the
//! process started from a point mass, and
//! `Lambda_t = int_0^{T-t} e^{-sA} e^{-sA^T} ds` drives the bridge control.
//! Both are computed once on a uniform grid by composite Simpson quadrature;
//! off-grid queries integrate the tail from the node below.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{expm, inv_sqrtm_pd, sqrtm_psd, symmetrize};
use crate::process::{Gaussian, OUProcess};

pub const DEFAULT_NODES: usize = 512;

/// Relative endpoint clamp: bridge-time queries live in `[eps T, (1 - eps) T]`.
pub const TIME_CLAMP_REL: f64 = 1e-4;

/// Sub-intervals used for off-grid tails.
const TAIL_STEPS: usize = 2;

#[derive(Debug, Clone)]
pub struct KernelCache {
    process: OUProcess,
    horizon: f64,
    step: f64,
    grid: Vec<f64>,
    exp_a: Vec<DMatrix<f64>>,
    phi: Vec<DMatrix<f64>>,
    /// `int_0^{t_k} e^{-sA} e^{-sA^T} ds` indexed by the upper limit.
    lam_cum: Vec<DMatrix<f64>>,
    /// Same with `sigma sigma^T` inserted.
    lam_noise_cum: Vec<DMatrix<f64>>,
    sigma_t_root: DMatrix<f64>,
    sigma_t_invroot: Option<DMatrix<f64>>,
    phi_t_inv: Option<DMatrix<f64>>,
}

impl KernelCache {
    /// Build the cache on `nodes` uniform intervals of `[0, horizon]`.
    pub fn new(process: &OUProcess, horizon: f64, nodes: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if nodes < 2 {
            return Err(Error::invalid("kernel cache needs at least 2 intervals"));
        }
        let a = process.drift();
        let q = process.noise_cov();
        let h = horizon / nodes as f64;
        let grid: Vec<f64> = (0..=nodes).map(|k| k as f64 * h).collect();
        grid_check(&grid)?;

        let mut exp_a = Vec::with_capacity(nodes + 1);
        let mut exp_neg = Vec::with_capacity(nodes + 1);
        for &t in &grid {
            exp_a.push(expm(&(a * t))?);
            exp_neg.push(expm(&(a * -t))?);
        }
        let d = process.dim();
        let mut phi = vec![DMatrix::zeros(d, d)];
        let mut lam_cum = vec![DMatrix::zeros(d, d)];
        let mut lam_noise_cum = vec![DMatrix::zeros(d, d)];
        for k in 0..nodes {
            let mid = grid[k] + 0.5 * h;
            let e_mid = expm(&(a * mid))?;
            let en_mid = expm(&(a * -mid))?;
            let f = |e: &DMatrix<f64>| e * &q * e.transpose();
            let g = |e: &DMatrix<f64>| e * e.transpose();
            let phi_inc = (f(&exp_a[k]) + f(&e_mid) * 4.0 + f(&exp_a[k + 1])) * (h / 6.0);
            let lam_inc = (g(&exp_neg[k]) + g(&en_mid) * 4.0 + g(&exp_neg[k + 1])) * (h / 6.0);
            let lamn_inc = (f(&exp_neg[k]) + f(&en_mid) * 4.0 + f(&exp_neg[k + 1])) * (h / 6.0);
            phi.push(symmetrize(&(&phi[k] + phi_inc)));
            lam_cum.push(symmetrize(&(&lam_cum[k] + lam_inc)));
            lam_noise_cum.push(symmetrize(&(&lam_noise_cum[k] + lamn_inc)));
        }
        let phi_t = &phi[nodes];
        let sigma_t_root = sqrtm_psd(phi_t)?;
        let sigma_t_invroot = inv_sqrtm_pd(phi_t).ok();
        let phi_t_inv = sigma_t_invroot.as_ref().map(|r| symmetrize(&(r * r)));
        Ok(Self {
            process: process.clone(),
            horizon,
            step: h,
            grid,
            exp_a,
            phi,
            lam_cum,
            lam_noise_cum,
            sigma_t_root,
            sigma_t_invroot,
            phi_t_inv,
        })
    }

    pub fn process(&self) -> &OUProcess {
        &self.process
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.process.dim()
    }

    /// Endpoint clamp width `1e-4 T`.
    pub fn time_eps(&self) -> f64 {
        TIME_CLAMP_REL * self.horizon
    }

    pub fn clamp_time(&self, t: f64) -> f64 {
        let eps = self.time_eps();
        t.clamp(eps, self.horizon - eps)
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Domain {
                t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    fn node_of(&self, t: f64) -> (usize, f64) {
        let x = t / self.step;
        let r = x.round();
        if (x - r).abs() < 1e-10 {
            return (r as usize, 0.0);
        }
        let k = (x.floor() as usize).min(self.grid.len() - 1);
        (k, t - self.grid[k])
    }

    /// `e^{tA}` for any real `t`; grid nodes are served from the cache.
    pub fn exp_at(&self, t: f64) -> Result<DMatrix<f64>> {
        if t >= 0.0 && t <= self.horizon {
            let (k, rem) = self.node_of(t);
            if rem == 0.0 {
                return Ok(self.exp_a[k].clone());
            }
        }
        expm(&(self.process.drift() * t))
    }

    /// Tail integral `int_lo^{lo+len} f(u) du` by composite Simpson.
    fn tail(
        &self,
        lo: f64,
        len: f64,
        sign: f64,
        weight: Option<&DMatrix<f64>>,
    ) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if len <= 0.0 {
            return Ok(DMatrix::zeros(d, d));
        }
        let a = self.process.drift();
        let hs = len / TAIL_STEPS as f64;
        let eval = |u: f64| -> Result<DMatrix<f64>> {
            let e = expm(&(a * (sign * u)))?;
            Ok(match weight {
                Some(w) => &e * w * e.transpose(),
                None => &e * e.transpose(),
            })
        };
        let mut acc = DMatrix::zeros(d, d);
        let mut left = eval(lo)?;
        for j in 0..TAIL_STEPS {
            let u0 = lo + j as f64 * hs;
            let mid = eval(u0 + 0.5 * hs)?;
            let right = eval(u0 + hs)?;
            acc += (&left + mid * 4.0 + &right) * (hs / 6.0);
            left = right;
        }
        Ok(acc)
    }

    /// `Phi_t`, the covariance at time `t` of the process started from a point.
    pub fn phi(&self, t: f64) -> Result<DMatrix<f64>> {
        let t = self.check_time(t)?;
        let (k, rem) = self.node_of(t);
        if rem == 0.0 {
            return Ok(self.phi[k].clone());
        }
        let q = self.process.noise_cov();
        let tail = self.tail(self.grid[k], rem, 1.0, Some(&q))?;
        Ok(symmetrize(&(&self.phi[k] + tail)))
    }

    fn cumulative(&self, tau: f64, noise: bool) -> Result<DMatrix<f64>> {
        let (k, rem) = self.node_of(tau);
        let table = if noise { &self.lam_noise_cum } else { &self.lam_cum };
        if rem == 0.0 {
            return Ok(table[k].clone());
        }
        let q = self.process.noise_cov();
        let tail = self.tail(self.grid[k], rem, -1.0, noise.then_some(&q))?;
        Ok(symmetrize(&(&table[k] + tail)))
    }

    /// `Lambda_t = int_0^{T-t} e^{-sA} e^{-sA^T} ds`; zero at `t = T`.
    pub fn lam(&self, t: f64) -> Result<DMatrix<f64>> {
        let t = self.check_time(t)?;
        self.cumulative(self.horizon - t, false)
    }

    /// `int_0^{T-t} e^{-sA} sigma sigma^T e^{-sA^T} ds`, the diffusion-weighted
    /// form of `Lambda_t`. Equal to `omega^2 Lambda_t` when `sigma = omega I`.
    pub fn lam_noise(&self, t: f64) -> Result<DMatrix<f64>> {
        let t = self.check_time(t)?;
        self.cumulative(self.horizon - t, true)
    }

    /// `Sigma_T^{1/2}` (equal to `Phi_T^{1/2}`).
    pub fn sigma_t_root(&self) -> &DMatrix<f64> {
        &self.sigma_t_root
    }

    /// `Sigma_T^{-1/2}`, or a degenerate-diffusion error if `Phi_T` is singular.
    pub fn sigma_t_invroot(&self) -> Result<&DMatrix<f64>> {
        self.sigma_t_invroot
            .as_ref()
            .ok_or_else(|| Error::Degenerate("Sigma_T is not positive definite".into()))
    }

    pub fn phi_t_inv(&self) -> Result<&DMatrix<f64>> {
        self.phi_t_inv
            .as_ref()
            .ok_or_else(|| Error::Degenerate("Sigma_T is not positive definite".into()))
    }

    /// Mean `e^{tA}(x0 - m) + m` of the unconditioned process.
    pub fn mean_from(&self, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let m = self.process.target();
        Ok(self.exp_at(t)? * (x0 - m) + m)
    }
}

fn grid_check(grid: &[f64]) -> Result<()> {
    if grid.windows(2).all(|w| w[1] > w[0]) {
        Ok(())
    } else {
        Err(Error::invalid("time grid must be strictly increasing"))
    }
}

/// Law of the unconditioned process at `t` started from `x0`.
pub fn unconditional_moments(cache: &KernelCache, x0: &DVector<f64>, t: f64) -> Result<Gaussian> {
    let phi = cache.phi(t)?;
    Gaussian::new(cache.mean_from(x0, t)?, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, min_eigenvalue, rel_frobenius};

    fn rotation_process() -> OUProcess {
        OUProcess::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    fn generic_process() -> OUProcess {
        OUProcess::new(
            DMatrix::from_row_slice(2, 2, &[-0.4, 1.3, -0.7, -0.2]),
            DVector::from_vec(vec![0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.6]),
        )
        .unwrap()
    }

    /// Fine composite midpoint rule, independent of the Simpson tables.
    fn quad(f: impl Fn(f64) -> DMatrix<f64>, lo: f64, hi: f64, n: usize) -> DMatrix<f64> {
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) * 0.0;
        // composite Simpson on a much finer grid
        for j in 0..n {
            let a = lo + j as f64 * h;
            acc += (f(a) + f(a + 0.5 * h) * 4.0 + f(a + h)) * (h / 6.0);
        }
        acc
    }

    #[test]
    fn phi_brownian_is_t_identity() {
        let p = OUProcess::brownian(3, 1.0).unwrap();
        let c = KernelCache::new(&p, 1.0, 64).unwrap();
        assert!(max_abs(&(c.phi(1.0).unwrap() - DMatrix::identity(3, 3))) < 1e-14);
        assert!(max_abs(&(c.phi(0.37).unwrap() - DMatrix::identity(3, 3) * 0.37)) < 1e-14);
    }

    #[test]
    fn phi_scalar_ou_closed_form() {
        let p = OUProcess::new(DMatrix::identity(2, 2) * -1.0, DVector::zeros(2), DMatrix::identity(2, 2))
            .unwrap();
        let c = KernelCache::new(&p, 1.0, DEFAULT_NODES).unwrap();
        let expected = (1.0 - (-2.0f64).exp()) / 2.0;
        let phi = c.phi(1.0).unwrap();
        assert!((phi[(0, 0)] - expected).abs() < 1e-12);
        assert!((expected - 0.432332).abs() < 1e-6);
        assert!(phi[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn phi_rotation_matches_fine_quadrature() {
        let p = rotation_process();
        let c = KernelCache::new(&p, 1.0, DEFAULT_NODES).unwrap();
        let a = p.drift().clone();
        let oracle = quad(
            |u| {
                let e = expm(&(&a * u)).unwrap();
                &e * e.transpose()
            },
            0.0,
            0.7,
            4000,
        );
        assert!(max_abs(&(c.phi(0.7).unwrap() - oracle)) < 1e-8);
    }

    #[test]
    fn lam_cases() {
        let p = OUProcess::brownian(2, 1.0).unwrap();
        let c = KernelCache::new(&p, 1.0, 32).unwrap();
        assert!(max_abs(&(c.lam(0.0).unwrap() - DMatrix::identity(2, 2))) < 1e-14);
        assert_eq!(c.lam(1.0).unwrap(), DMatrix::zeros(2, 2));

        let g = generic_process();
        let c = KernelCache::new(&g, 1.5, DEFAULT_NODES).unwrap();
        let a = g.drift().clone();
        for &t in &[0.0, 0.3, 0.91, 1.2] {
            let oracle = quad(
                |s| {
                    let e = expm(&(&a * -s)).unwrap();
                    &e * e.transpose()
                },
                0.0,
                1.5 - t,
                4000,
            );
            assert!(max_abs(&(c.lam(t).unwrap() - oracle)) < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn domain_errors() {
        let c = KernelCache::new(&rotation_process(), 1.0, 16).unwrap();
        assert!(matches!(c.phi(1.5), Err(Error::Domain { .. })));
        assert!(matches!(c.lam(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn cache_invariants() {
        let c = KernelCache::new(&generic_process(), 2.0, 128).unwrap();
        for k in 0..c.grid().len() - 1 {
            let diff = &c.phi[k + 1] - &c.phi[k];
            assert!(min_eigenvalue(&diff) > -1e-9);
        }
        assert_eq!(c.phi[0], DMatrix::zeros(2, 2));
        assert_eq!(c.lam(2.0).unwrap(), DMatrix::zeros(2, 2));
        assert!(min_eigenvalue(&c.lam(1.0).unwrap()) > 0.0);
        let root = c.sigma_t_root();
        assert!(rel_frobenius(&(root * root), &c.phi(2.0).unwrap()) < 1e-8);
    }

    #[test]
    fn phi_composition_law() {
        let c = KernelCache::new(&generic_process(), 2.0, 256).unwrap();
        let grid = c.grid().to_vec();
        for &(i, j) in &[(10usize, 100usize), (64, 200), (0, 256), (128, 256)] {
            let (s, t) = (grid[i], grid[j]);
            let e = c.exp_at(t - s).unwrap();
            let rhs = c.phi(t - s).unwrap() + &e * c.phi(s).unwrap() * e.transpose();
            assert!(max_abs(&(c.phi(t).unwrap() - rhs)) < 1e-8);
        }
    }

    #[test]
    fn lyapunov_residual_is_second_order() {
        let p = generic_process();
        let a = p.drift().clone();
        let q = p.noise_cov();
        let mut errs = Vec::new();
        for &nodes in &[64usize, 128] {
            let c = KernelCache::new(&p, 1.0, nodes).unwrap();
            let h = 1.0 / nodes as f64;
            let mut worst = 0.0f64;
            for k in 1..nodes {
                let deriv = (&c.phi[k + 1] - &c.phi[k - 1]) / (2.0 * h);
                let lyap = &a * &c.phi[k] + &c.phi[k] * a.transpose() + &q;
                worst = worst.max(max_abs(&(deriv - lyap)));
            }
            errs.push(worst);
        }
        assert!(errs[0] < 1e-3);
        // halving the step quarters the central-difference residual
        assert!(errs[1] < errs[0] / 3.0);
    }

    #[test]
    fn unconditional_moment_cases() {
        let g = generic_process();
        let c = KernelCache::new(&g, 1.0, 64).unwrap();
        let x0 = DVector::from_vec(vec![0.3, 2.0]);
        let m0 = unconditional_moments(&c, &x0, 0.0).unwrap();
        assert!((m0.mean() - &x0).norm() < 1e-15);
        assert_eq!(m0.cov(), &DMatrix::zeros(2, 2));

        let b = OUProcess::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![3.0, 1.0]), DMatrix::identity(2, 2) * 2.0)
            .unwrap();
        let cb = KernelCache::new(&b, 1.0, 64).unwrap();
        let mb = unconditional_moments(&cb, &x0, 0.5).unwrap();
        assert!((mb.mean() - &x0).norm() < 1e-15);
        assert!(max_abs(&(mb.cov() - DMatrix::identity(2, 2) * 2.0)) < 1e-13);
    }

    #[test]
    fn unconditional_mean_matches_ode() {
        let d = 3;
        let p = OUProcess::new(
            DMatrix::identity(d, d) * -1.0,
            DVector::from_element(d, 1.0),
            DMatrix::identity(d, d),
        )
        .unwrap();
        let c = KernelCache::new(&p, 1.0, 64).unwrap();
        let t = 2f64.ln();
        let mean = c.mean_from(&DVector::zeros(d), t).unwrap();
        // explicit Euler on dm/dt = A(m - target)
        let steps = 200_000;
        let h = t / steps as f64;
        let mut y = DVector::<f64>::zeros(d);
        for _ in 0..steps {
            y = &y + p.drift_at(&y) * h;
        }
        for i in 0..d {
            assert!((mean[i] - 0.5).abs() < 1e-12);
            assert!((y[i] - mean[i]).abs() / mean[i] < 1e-5);
        }
    }

    #[test]
    fn cache_is_deterministic() {
        let a = KernelCache::new(&generic_process(), 1.0, 64).unwrap();
        let b = KernelCache::new(&generic_process(), 1.0, 64).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.lam_cum, b.lam_cum);
    }
}
