//! Integrators and synthetic data.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::process::{Gaussian, OUProcess};
use crate::rng::{derive_seed, rng, standard_normal, Rng};

/// Samples as a list of points.
pub type Cloud = Vec<DVector<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub seed: u64,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("time grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("time grid must be strictly increasing"));
    }
    Ok(())
}

/// Uniform grid with `steps` intervals on `[t0, t1]`.
pub fn uniform_grid(t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    (0..=steps).map(|k| if k == steps { t1 } else { t0 + k as f64 * h }).collect()
}

/// Grid from `t0` through every time in `times` with steps no longer than
/// `h`, and the grid index of each time.
pub fn grid_through(t0: f64, times: &[f64], h: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(h > 0.0) || times.is_empty() {
        return Err(Error::invalid("need a positive step and at least one time"));
    }
    if times[0] < t0 || times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid(format!("times must be finite, increasing and no earlier than {t0}")));
    }
    let mut grid = vec![t0];
    let mut record = Vec::with_capacity(times.len());
    for &t in times {
        let prev = *grid.last().unwrap();
        if t > prev {
            let steps = ((t - prev) / h - 1e-9).ceil().max(1.0) as usize;
            grid.extend(uniform_grid(prev, t, steps).into_iter().skip(1));
        }
        record.push(grid.len() - 1);
    }
    if grid.len() == 1 {
        grid.push(t0 + h);
    }
    Ok((grid, record))
}

fn em_step<F>(drift: &F, sigma: &DMatrix<f64>, x: &DVector<f64>, t: f64, dt: f64, r: &mut Rng) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let xi = standard_normal(r, x.len());
    x + drift(t, x) * dt + sigma * xi * dt.sqrt()
}

/// `X_{k+1} = X_k + b(t_k, X_k) dt + sigma sqrt(dt) xi`.
pub fn euler_maruyama<F>(drift: F, sigma: &DMatrix<f64>, x0: &DVector<f64>, grid: &[f64], seed: u64) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    check_grid(grid)?;
    let mut r = rng(seed);
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0.clone());
    for k in 1..grid.len() {
        let dt = grid[k] - grid[k - 1];
        let next = em_step(&drift, sigma, &states[k - 1], grid[k - 1], dt, &mut r);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        states.push(next);
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        states,
        seed,
    })
}

/// Many independent Euler-Maruyama paths, keeping only the states at the
/// grid indices in `record`. Returns `out[k][path]`.
///
/// Path `i` uses the stream `derive_seed(seed, i)`, so results do not depend
/// on the worker count.
pub fn euler_maruyama_ensemble<F>(
    drift: F,
    sigma: &DMatrix<f64>,
    x0: &[DVector<f64>],
    grid: &[f64],
    record: &[usize],
    seed: u64,
) -> Result<Vec<Cloud>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Sync,
{
    check_grid(grid)?;
    if record.iter().any(|&k| k >= grid.len()) {
        return Err(Error::invalid("record index beyond the grid"));
    }
    let paths: Vec<Result<Vec<DVector<f64>>>> = x0
        .par_iter()
        .enumerate()
        .map(|(i, start)| {
            let mut r = rng(derive_seed(seed, i as u64));
            let mut x = start.clone();
            let mut kept = Vec::with_capacity(record.len());
            for k in 0..grid.len() {
                if k > 0 {
                    x = em_step(&drift, sigma, &x, grid[k - 1], grid[k] - grid[k - 1], &mut r);
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { step: k });
                    }
                }
                for (slot, _) in record.iter().enumerate().filter(|(_, &idx)| idx == k) {
                    kept.push((slot, x.clone()));
                }
            }
            kept.sort_by_key(|(slot, _)| *slot);
            Ok(kept.into_iter().map(|(_, v)| v).collect())
        })
        .collect();
    let mut out = vec![Vec::with_capacity(x0.len()); record.len()];
    for p in paths {
        for (k, v) in p?.into_iter().enumerate() {
            out[k].push(v);
        }
    }
    Ok(out)
}

/// Classical fourth-order Runge-Kutta for `dx/dt = f(t, x)`.
pub fn rk4<F>(flow: F, x0: &DVector<f64>, grid: &[f64]) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    check_grid(grid)?;
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0.clone());
    for k in 1..grid.len() {
        let (t, h) = (grid[k - 1], grid[k] - grid[k - 1]);
        let x = &states[k - 1];
        let k1 = flow(t, x);
        let k2 = flow(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
        let k3 = flow(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
        let k4 = flow(t + h, &(x + &k3 * h));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        states.push(next);
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        states,
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepressilatorParams {
    pub beta: f64,
    pub n: f64,
    pub k: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl Default for RepressilatorParams {
    fn default() -> Self {
        Self {
            beta: 10.0,
            n: 3.0,
            k: 1.0,
            gamma: 1.0,
            sigma: 0.1,
        }
    }
}

impl RepressilatorParams {
    fn validate(&self) -> Result<()> {
        let ok = [self.beta, self.n, self.k, self.gamma].iter().all(|v| *v > 0.0 && v.is_finite())
            && self.sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("repressilator parameters must be positive"))
        }
    }

    fn hill(&self, x: f64) -> f64 {
        self.beta / (1.0 + (x.max(0.0) / self.k).powf(self.n))
    }

    /// Each gene is repressed by its predecessor in the cycle 3 -> 1 -> 2 -> 3.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            self.hill(x[2]) - self.gamma * x[0],
            self.hill(x[0]) - self.gamma * x[1],
            self.hill(x[1]) - self.gamma * x[2],
        ])
    }

    /// The symmetric fixed point `x* = beta / (1 + x*^n)` (for `k = gamma = 1`
    /// scaled accordingly), found by bisection.
    pub fn fixed_point(&self) -> f64 {
        let (mut lo, mut hi) = (0.0, self.beta / self.gamma);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.hill(mid) - self.gamma * mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Jacobian of the drift at `x`.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let dh = |v: f64| {
            let u = v.max(0.0) / self.k;
            -self.beta * self.n * u.powf(self.n - 1.0) / self.k / (1.0 + u.powf(self.n)).powi(2)
        };
        let mut j = DMatrix::identity(3, 3) * -self.gamma;
        j[(0, 2)] = dh(x[2]);
        j[(1, 0)] = dh(x[0]);
        j[(2, 1)] = dh(x[1]);
        j
    }
}

pub const REPRESSILATOR_DT: f64 = 1e-3;

/// Snapshot clouds of independent repressilator trajectories started from
/// `N([1, 1, 2], 0.01 I)` and observed at `times`.
pub fn repressilator_snapshots(
    params: &RepressilatorParams,
    n_per_snapshot: usize,
    times: &[f64],
    dt: f64,
    seed: u64,
) -> Result<Vec<Cloud>> {
    params.validate()?;
    if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("snapshot times must be nonnegative and increasing"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("time step must be positive"));
    }
    let start = DVector::from_vec(vec![1.0, 1.0, 2.0]);
    let sigma = params.sigma;
    let jobs: Vec<(usize, usize)> = (0..times.len())
        .flat_map(|k| (0..n_per_snapshot).map(move |i| (k, i)))
        .collect();
    let states: Vec<Result<DVector<f64>>> = jobs
        .par_iter()
        .map(|&(k, i)| {
            let mut r = rng(derive_seed(derive_seed(seed, k as u64), i as u64));
            let mut x = &start + standard_normal(&mut r, 3) * 0.1;
            let steps = (times[k] / dt).round() as usize;
            let h = if steps > 0 { times[k] / steps as f64 } else { 0.0 };
            for s in 0..steps {
                let xi = standard_normal(&mut r, 3);
                x = &x + params.drift(&x) * h + xi * (sigma * h.sqrt());
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step: s + 1 });
                }
            }
            Ok(x)
        })
        .collect();
    let mut out = vec![Vec::with_capacity(n_per_snapshot); times.len()];
    for (&(k, _), s) in jobs.iter().zip(states) {
        out[k].push(s?);
    }
    Ok(out)
}

/// `n` repressilator paths from the same initial law, each observed at every
/// time in `times` (unlike the snapshots, which use fresh particles per time).
pub fn repressilator_paths(
    params: &RepressilatorParams,
    n: usize,
    times: &[f64],
    dt: f64,
    seed: u64,
) -> Result<Vec<Cloud>> {
    params.validate()?;
    let (grid, record) = grid_through(0.0, times, dt)?;
    let start = DVector::from_vec(vec![1.0, 1.0, 2.0]);
    let mut r = rng(derive_seed(seed, 0));
    let x0: Cloud = (0..n).map(|_| &start + standard_normal(&mut r, 3) * 0.1).collect();
    let sigma = DMatrix::identity(3, 3) * params.sigma;
    euler_maruyama_ensemble(|_, x| params.drift(x), &sigma, &x0, &grid, &record, derive_seed(seed, 1))
}

/// `d x 2` slice of a seeded random orthogonal matrix (QR of a Gaussian
/// matrix with the diagonal of R made positive).
pub fn random_embedding(d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d < 2 {
        return Err(Error::invalid("embedding dimension must be at least 2"));
    }
    let mut r = rng(seed);
    let g = DMatrix::from_fn(d, d, |_, _| standard_normal(&mut r, 1)[0]);
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..d {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q.columns(0, 2).into_owned())
}

#[derive(Debug, Clone)]
pub struct GaussianBenchmark {
    pub embedding: DMatrix<f64>,
    pub process: OUProcess,
    pub rho0: Gaussian,
    pub rho1: Gaussian,
    pub x0: Cloud,
    pub x1: Cloud,
}

pub const BENCHMARK_SAMPLES: usize = 128;

/// `U B U^T + ridge I`, with `B` first clipped to its nearest PSD matrix.
/// The published target block `[[1.1, -2], [-2, 1.1]]` has eigenvalue -0.9,
/// so taken literally it is not a covariance.
fn embed_cov(u: &DMatrix<f64>, block: &[f64], ridge: f64) -> DMatrix<f64> {
    let d = u.nrows();
    let eig = DMatrix::from_row_slice(2, 2, block).symmetric_eigen();
    let clipped = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)))
        * eig.eigenvectors.transpose();
    crate::linalg::symmetrize(&(u * clipped * u.transpose() + DMatrix::identity(d, d) * ridge))
}

fn draw(g: &Gaussian, n: usize, r: &mut Rng) -> Cloud {
    let f = crate::linalg::psd_factor(g.cov());
    (0..n).map(|_| g.mean() + &f * standard_normal(r, g.dim())).collect()
}

/// Rotational reference with Gaussian marginals embedded by `u` (`d x 2`,
/// orthonormal columns), with `n` samples per marginal.
pub fn gaussian_benchmark_with(u: &DMatrix<f64>, n: usize, seed: u64) -> Result<GaussianBenchmark> {
    let d = u.nrows();
    if u.ncols() != 2 || d < 2 {
        return Err(Error::invalid("embedding must be d x 2 with d >= 2"));
    }
    let a = u * DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.5, 0.0]) * u.transpose();
    let m = u * DVector::from_vec(vec![1.0, -1.0]);
    let process = OUProcess::new(a, m, DMatrix::identity(d, d))?;
    let rho0 = Gaussian::new(u * DVector::from_vec(vec![-2.5, -0.5]), embed_cov(u, &[0.1, 0.005, 0.005, 0.1], 0.1))?;
    let rho1 = Gaussian::new(u * DVector::from_vec(vec![0.5, 2.5]), embed_cov(u, &[1.1, -2.0, -2.0, 1.1], 0.1))?;
    let mut r = rng(derive_seed(seed, 1));
    let x0 = draw(&rho0, n, &mut r);
    let x1 = draw(&rho1, n, &mut r);
    Ok(GaussianBenchmark {
        embedding: u.clone(),
        process,
        rho0,
        rho1,
        x0,
        x1,
    })
}

pub fn gaussian_benchmark(d: usize, seed: u64) -> Result<GaussianBenchmark> {
    let u = random_embedding(d, derive_seed(seed, 0))?;
    gaussian_benchmark_with(&u, BENCHMARK_SAMPLES, seed)
}

#[derive(Debug, Clone)]
pub struct MixtureData {
    pub embedding: DMatrix<f64>,
    pub process: OUProcess,
    pub x0: Cloud,
    pub x1: Cloud,
}

/// Two-component mixtures at both ends with equal weights, embedded by the
/// same `U` and reference as [`gaussian_benchmark`] for this seed.
pub fn gaussian_mixture_data(d: usize, n: usize, seed: u64) -> Result<MixtureData> {
    let bench = gaussian_benchmark(d, seed)?;
    let u = bench.embedding.clone();
    let mut r = rng(derive_seed(seed, 2));
    let sample = |comps: [([f64; 2], f64); 2], r: &mut Rng| -> Cloud {
        (0..n)
            .map(|_| {
                let (mean, var) = comps[usize::from(r.random::<bool>())];
                let z = standard_normal(r, 2) * var.sqrt() + DVector::from_vec(mean.to_vec());
                &u * z
            })
            .collect()
    };
    let x0 = sample([([-0.5, -0.5], 0.01), ([0.5, 0.5], 0.0625)], &mut r);
    let x1 = sample([([-2.5, -2.5], 0.01), ([2.5, 2.5], 0.25)], &mut r);
    Ok(MixtureData {
        embedding: u,
        process: bench.process,
        x0,
        x1,
    })
}

/// Reference with drift matrix `gamma A`; `m` and `sigma` unchanged.
pub fn scale_drift(process: &OUProcess, gamma: f64) -> Result<OUProcess> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("drift scale must be nonnegative"));
    }
    process.with_drift(process.drift() * gamma, process.target().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{unconditional_moments, KernelCache};
    use crate::linalg::max_abs;

    #[test]
    fn grid_passes_through_requested_times() {
        let (g, rec) = grid_through(0.5, &[0.5, 1.0, 1.25], 0.1).unwrap();
        assert_eq!(rec[0], 0);
        for (&k, t) in rec.iter().zip([0.5, 1.0, 1.25]) {
            assert_eq!(g[k], t);
        }
        assert!(g.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.1 + 1e-12));
        assert_eq!(g.len(), 9);
        let (g, rec) = grid_through(0.0, &[0.0], 0.1).unwrap();
        assert_eq!((g.len(), rec), (2, vec![0]));
        assert!(grid_through(1.0, &[0.5], 0.1).is_err());
        assert!(grid_through(0.0, &[1.0, 1.0], 0.1).is_err());
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn trivial_integrations() {
        let grid = uniform_grid(0.0, 1.0, 10);
        let zero = DMatrix::zeros(2, 2);
        let tr = euler_maruyama(|_, x: &DVector<f64>| x * 0.0, &zero, &v(&[1.0, 2.0]), &grid, 1).unwrap();
        assert!(tr.states.iter().all(|s| s == &v(&[1.0, 2.0])));
        let tr = rk4(|_, _: &DVector<f64>| v(&[1.0, -2.0]), &v(&[0.0, 0.0]), &grid).unwrap();
        assert!((tr.states[10].clone() - v(&[1.0, -2.0])).norm() < 1e-12);
    }

    #[test]
    fn euler_decay() {
        let grid = uniform_grid(0.0, 1.0, 10_000);
        let tr = euler_maruyama(|_, x: &DVector<f64>| -x, &DMatrix::zeros(1, 1), &v(&[1.0]), &grid, 0).unwrap();
        let end = tr.states.last().unwrap()[0];
        assert!((end - (-1f64).exp()).abs() / (-1f64).exp() < 1e-3);
    }

    #[test]
    fn euler_nan_reports_step() {
        let grid = uniform_grid(0.0, 1.0, 10);
        let r = euler_maruyama(
            |t, x: &DVector<f64>| if t > 0.35 { x * f64::NAN } else { x * 0.0 },
            &DMatrix::zeros(1, 1),
            &v(&[1.0]),
            &grid,
            0,
        );
        assert!(matches!(r, Err(Error::NonFinite { step: 5 })));
    }

    #[test]
    fn euler_weak_error_halves() {
        let p = OUProcess::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -0.5]),
            v(&[0.5, 0.0]),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let c = KernelCache::new(&p, 1.0, 16).unwrap();
        let x0 = v(&[1.0, 1.0]);
        let exact = c.mean_from(&x0, 1.0).unwrap();
        let err = |steps: usize| {
            let tr = euler_maruyama(|_, x: &DVector<f64>| p.drift_at(x), p.diffusion(), &x0, &uniform_grid(0.0, 1.0, steps), 0)
                .unwrap();
            (tr.states.last().unwrap() - &exact).norm()
        };
        let ratio = err(200) / err(400);
        assert!((ratio - 2.0).abs() < 0.6, "ratio {ratio}");
    }

    #[test]
    fn ou_moments_by_monte_carlo() {
        let p = OUProcess::new(
            DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.5]),
            v(&[1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.2, 0.5]),
        )
        .unwrap();
        let c = KernelCache::new(&p, 1.0, 512).unwrap();
        let x0 = v(&[0.0, 1.0]);
        let n = 10_000;
        let grid = uniform_grid(0.0, 1.0, 1000);
        let out = euler_maruyama_ensemble(|_, x| p.drift_at(x), p.diffusion(), &vec![x0.clone(); n], &grid, &[1000], 3).unwrap();
        let law = unconditional_moments(&c, &x0, 1.0).unwrap();
        let mean = out[0].iter().fold(DVector::zeros(2), |a, x| a + x) / n as f64;
        for i in 0..2 {
            let se = (law.cov()[(i, i)] / n as f64).sqrt();
            // allow for the O(dt) discretisation bias as well
            assert!((mean[i] - law.mean()[i]).abs() < 4.0 * se + 2e-3);
        }
    }

    #[test]
    fn ensemble_is_thread_independent() {
        let grid = uniform_grid(0.0, 1.0, 50);
        let x0 = vec![v(&[0.0]); 64];
        let sigma = DMatrix::identity(1, 1);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| euler_maruyama_ensemble(|_, x: &DVector<f64>| -x, &sigma, &x0, &grid, &[25, 50], 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rk4_circle_period() {
        let grid = uniform_grid(0.0, 2.0 * std::f64::consts::PI, 6284);
        let tr = rk4(|_, x: &DVector<f64>| v(&[x[1], -x[0]]), &v(&[1.0, 0.0]), &grid).unwrap();
        assert!((tr.states.last().unwrap() - v(&[1.0, 0.0])).norm() < 1e-6);
    }

    #[test]
    fn repressilator_properties() {
        let p = RepressilatorParams::default();
        let times = uniform_grid(0.0, 10.0, 9);
        let a = repressilator_snapshots(&p, 20, &times, 1e-2, 4).unwrap();
        let b = repressilator_snapshots(&p, 20, &times, 1e-2, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for cloud in &a {
            for x in cloud {
                assert!(x.iter().all(|&v| v > -1.0 && v < p.beta / p.gamma + 1.0));
            }
        }
        let quiet = RepressilatorParams { sigma: 0.0, ..p };
        let c = repressilator_snapshots(&quiet, 50, &[0.0, 5.0], 1e-2, 1).unwrap();
        // without noise the spread only comes from the initial condition
        let spread = |cl: &Cloud| {
            let m = cl.iter().fold(DVector::zeros(3), |a, x| a + x) / cl.len() as f64;
            cl.iter().map(|x| (x - &m).norm()).fold(0.0, f64::max)
        };
        assert!(spread(&c[1]) < 10.0 * spread(&c[0]) + 1e-9);
    }

    #[test]
    fn repressilator_fixed_point_and_jacobian() {
        let p = RepressilatorParams::default();
        let xs = p.fixed_point();
        assert!((xs - 1.697).abs() < 1e-3);
        let x = DVector::from_element(3, xs);
        assert!(p.drift(&x).norm() < 1e-9);
        let j = p.jacobian(&x);
        let h = 1e-6;
        for c in 0..3 {
            let mut e = x.clone();
            e[c] += h;
            let fd = (p.drift(&e) - p.drift(&x)) / h;
            for r in 0..3 {
                assert!((fd[r] - j[(r, c)]).abs() < 1e-4);
            }
        }
        assert!(j[(0, 2)] < -2.0 && j[(1, 0)] < -2.0 && j[(2, 1)] < -2.0);
    }

    #[test]
    fn benchmark_construction() {
        let b = gaussian_benchmark_with(&DMatrix::identity(2, 2), 128, 0).unwrap();
        assert_eq!(b.process.drift(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.5, 0.0]));
        assert_eq!(b.x0.len(), 128);
        assert_eq!(b.rho0.mean(), &v(&[-2.5, -0.5]));
        assert!(max_abs(&(b.rho0.cov() - DMatrix::from_row_slice(2, 2, &[0.2, 0.005, 0.005, 0.2]))) < 1e-12);
        // the negative eigenvalue of the target block is clipped, the 3.1 one kept
        assert!(max_abs(&(b.rho1.cov() - DMatrix::from_row_slice(2, 2, &[1.65, -1.55, -1.55, 1.65]))) < 1e-12);
        for d in [2, 5, 10] {
            let b = gaussian_benchmark(d, 3).unwrap();
            let u = &b.embedding;
            assert!(max_abs(&(u.transpose() * u - DMatrix::identity(2, 2))) < 1e-12);
            assert!(crate::linalg::min_eigenvalue(b.rho0.cov()) >= 0.1 - 1e-9);
            assert!(crate::linalg::min_eigenvalue(b.rho1.cov()) >= 0.1 - 1e-9);
        }
        assert!(gaussian_benchmark(1, 0).is_err());
        let a = gaussian_benchmark(5, 7).unwrap();
        let b = gaussian_benchmark(5, 7).unwrap();
        assert_eq!(a.x0, b.x0);
    }

    #[test]
    fn mixture_data() {
        let n = 4000;
        let m = gaussian_mixture_data(10, n, 2).unwrap();
        let u = &m.embedding;
        let z: DVector<f64> = DVector::from_vec(vec![-0.5, -0.5]);
        assert!(((u * &z).norm() - z.norm()).abs() < 1e-12);
        // component sign of the projected first coordinate splits the mixture
        let left = m.x0.iter().filter(|x| (u.transpose() * *x)[0] < 0.0).count();
        let se = (n as f64 * 0.25).sqrt();
        assert!((left as f64 - n as f64 / 2.0).abs() < 4.0 * se);
        let again = gaussian_mixture_data(10, n, 2).unwrap();
        assert_eq!(m.x1, again.x1);
        let b = gaussian_benchmark(10, 2).unwrap();
        assert_eq!(&b.embedding, u);
    }

    #[test]
    fn drift_scaling() {
        let b = gaussian_benchmark(2, 0).unwrap();
        assert_eq!(scale_drift(&b.process, 1.0).unwrap(), b.process);
        let z = scale_drift(&b.process, 0.0).unwrap();
        assert!(z.drift_at(&v(&[3.0, -2.0])).norm() == 0.0);
        assert_eq!(z.target(), b.process.target());
        let big = scale_drift(&b.process, 50.0).unwrap();
        assert_eq!(big.drift(), &(b.process.drift() * 50.0));
    }
}
