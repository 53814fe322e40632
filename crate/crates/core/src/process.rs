//! Reference dynamics `dX = A (X - m) dt + sigma dB` and Gaussian laws.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, min_eigenvalue, symmetrize};

/// Multivariate Ornstein-Uhlenbeck process.
///
/// The diffusivity `D = sigma sigma^T / 2` is derived on construction and never
/// set independently.
#[derive(Debug, Clone, PartialEq)]
pub struct OUProcess {
    drift: DMatrix<f64>,
    target: DVector<f64>,
    diffusion: DMatrix<f64>,
    diffusivity: DMatrix<f64>,
}

impl OUProcess {
    pub fn new(drift: DMatrix<f64>, target: DVector<f64>, diffusion: DMatrix<f64>) -> Result<Self> {
        let d = target.len();
        if d == 0 {
            return Err(Error::invalid("process dimension must be positive"));
        }
        if drift.shape() != (d, d) || diffusion.shape() != (d, d) {
            return Err(Error::invalid(format!(
                "process shapes disagree: A {:?}, m {}, sigma {:?}",
                drift.shape(),
                d,
                diffusion.shape()
            )));
        }
        if drift.iter().chain(target.iter()).chain(diffusion.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("process parameters must be finite"));
        }
        let diffusivity = symmetrize(&(&diffusion * diffusion.transpose() * 0.5));
        Ok(Self {
            drift,
            target,
            diffusion,
            diffusivity,
        })
    }

    /// Standard Brownian motion scaled by `omega` (A = 0, m = 0, sigma = omega I).
    pub fn brownian(dim: usize, omega: f64) -> Result<Self> {
        Self::new(
            DMatrix::zeros(dim, dim),
            DVector::zeros(dim),
            DMatrix::identity(dim, dim) * omega,
        )
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.drift
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    pub fn diffusivity(&self) -> &DMatrix<f64> {
        &self.diffusivity
    }

    /// `sigma sigma^T`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        &self.diffusivity * 2.0
    }

    /// Reference drift field `A (x - m)`.
    pub fn drift_at(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.drift * (x - &self.target)
    }

    pub fn with_drift(&self, drift: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        Self::new(drift, target, self.diffusion.clone())
    }

    pub fn to_json(&self) -> ProcessJson {
        ProcessJson {
            dim: self.dim(),
            a: MatrixJson::Flat(row_major(&self.drift)),
            m: self.target.iter().cloned().collect(),
            sigma: MatrixJson::Flat(row_major(&self.diffusion)),
        }
    }

    pub fn from_json(json: &ProcessJson) -> Result<Self> {
        let d = json.dim;
        if json.m.len() != d {
            return Err(Error::Data(format!("process: m has {} entries, dim is {d}", json.m.len())));
        }
        Self::new(
            json.a.to_matrix(d, "A")?,
            DVector::from_vec(json.m.clone()),
            json.sigma.to_matrix(d, "sigma")?,
        )
    }
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().cloned().collect()
}

/// Matrix on the wire: a flat row-major array, or nested rows on input.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MatrixJson {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl MatrixJson {
    pub fn to_matrix(&self, d: usize, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixJson::Flat(v) => {
                if v.len() != d * d {
                    return Err(Error::Data(format!(
                        "{name}: expected {} entries, found {}",
                        d * d,
                        v.len()
                    )));
                }
                Ok(DMatrix::from_row_slice(d, d, v))
            }
            MatrixJson::Rows(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Data(format!("{name}: expected a {d}x{d} matrix")));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }
}

/// `{"dim": d, "A": [...], "m": [...], "sigma": [...]}` with row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProcessJson {
    pub dim: usize,
    #[serde(rename = "A")]
    pub a: MatrixJson,
    pub m: Vec<f64>,
    pub sigma: MatrixJson,
}

/// Gaussian law with a symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// Symmetrizes `cov` and rejects eigenvalues below `-1e-10`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::invalid(format!(
                "covariance shape {:?} does not match mean length {d}",
                cov.shape()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("gaussian parameters must be finite"));
        }
        let scale = max_abs(&cov).max(1.0);
        if max_abs(&(&cov - cov.transpose())) > 1e-8 * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let cov = symmetrize(&cov);
        if d > 0 {
            let min = min_eigenvalue(&cov);
            if min < -1e-10 * scale {
                return Err(Error::NotPsd { min_eig: min });
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Empirical fit with unbiased covariance plus `jitter * I`.
    pub fn fit(samples: &[DVector<f64>], jitter: f64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::invalid("need at least two samples to fit a Gaussian"));
        }
        let d = samples[0].len();
        let mean = samples.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for x in samples {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            cov[(i, i)] += jitter;
        }
        Self::new(mean, cov)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Degenerate("covariance not positive definite".into()))?;
        let diff = x - &self.mean;
        let sol = chol.solve(&diff);
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let d = self.dim() as f64;
        Ok(-0.5 * (diff.dot(&sol) + logdet + d * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn to_json(&self) -> GaussianJson {
        GaussianJson {
            mean: self.mean.iter().cloned().collect(),
            cov: MatrixJson::Flat(row_major(&self.cov)),
        }
    }

    pub fn from_json(json: &GaussianJson) -> Result<Self> {
        let d = json.mean.len();
        Self::new(DVector::from_vec(json.mean.clone()), json.cov.to_matrix(d, "cov")?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GaussianJson {
    pub mean: Vec<f64>,
    pub cov: MatrixJson,
}
