//! Dense matrix helpers: exponential, PSD square roots and inverses.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalue floor relative to the largest eigenvalue when inverting or
/// factoring nearly singular PSD matrices.
pub const EIG_CLAMP_REL: f64 = 1e-12;

/// Matrix exponential (nalgebra's scaling and squaring Padé implementation)
/// with shape and finiteness checks.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::invalid("expm of a non-square matrix"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("expm of a matrix with non-finite entries"));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    Ok(m.clone().exp())
}

/// Replace `m` by its symmetric part.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

fn rebuild(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    symmetrize(&(v * DMatrix::from_diagonal(&d) * v.transpose()))
}

/// Symmetric PSD square root.
///
/// Eigenvalues above `-1e-8 * ||M||` are clamped to zero; anything more
/// negative is rejected.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::invalid("sqrtm_psd of a non-square matrix"));
    }
    let scale = max_abs(m).max(1.0);
    if max_abs(&(m - m.transpose())) > 1e-8 * scale {
        return Err(Error::invalid("sqrtm_psd: matrix is not symmetric"));
    }
    let eig = sym_eigen(m);
    let nrm = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * nrm.max(f64::MIN_POSITIVE) && min < -1e-10 {
        return Err(Error::NotPsd { min_eig: min });
    }
    Ok(rebuild(&eig, |l| l.max(0.0).sqrt()))
}

/// Inverse of a symmetric PSD matrix with eigenvalues clamped at
/// `max(l, 1e-12 * l_max)`.
pub fn psd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if lmax <= 0.0 || !lmax.is_finite() {
        return Err(Error::Degenerate("inverting a zero or non-finite PSD matrix".into()));
    }
    let floor = EIG_CLAMP_REL * lmax;
    Ok(rebuild(&eig, |l| 1.0 / l.max(floor)))
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrtm_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(min > 1e-14 * lmax.max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(format!(
            "matrix not positive definite (min eigenvalue {min:.3e})"
        )));
    }
    Ok(rebuild(&eig, |l| 1.0 / l.sqrt()))
}

/// Symmetric factor R with R R = M for sampling; negative eigenvalues are
/// treated as zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    rebuild(&sym_eigen(m), |l| l.max(0.0).sqrt())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Condition number in the 2-norm from the singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_expm(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = m.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..terms {
            term = &term * m / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(expm(&z).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let e = expm(&m).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!(e[(0, 1)].abs() < 1e-16 && e[(1, 0)].abs() < 1e-16);
    }

    #[test]
    fn expm_rotation_matches_taylor() {
        for &theta in &[0.001, 0.1, 0.9, 2.0, 4.5, 7.0, 10.0] {
            let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]) * theta;
            let e = expm(&m).unwrap();
            let oracle = taylor_expm(&m, 60);
            assert!(rel_frobenius(&e, &oracle) < 1e-12, "theta {theta}");
            let exact = DMatrix::from_row_slice(
                2,
                2,
                &[theta.cos(), theta.sin(), -theta.sin(), theta.cos()],
            );
            assert!(rel_frobenius(&e, &exact) < 1e-12);
        }
    }

    #[test]
    fn expm_rejects_nan() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(expm(&m), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn expm_semigroup() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.3, 1.2, 0.1, -0.8, 0.2, 0.5, 0.3, -0.4, -1.0]);
        for &(s, t) in &[(0.3, 0.5), (1.0, 2.0), (2.5, 3.5)] {
            let lhs = expm(&(&a * s)).unwrap() * expm(&(&a * t)).unwrap();
            let rhs = expm(&(&a * (s + t))).unwrap();
            assert!(rel_frobenius(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn sqrtm_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!(rel_frobenius(&sqrtm_psd(&i).unwrap(), &i) < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14 && (r[(1, 1)] - 3.0).abs() < 1e-14);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(sqrtm_psd(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn psd_inverse_of_diag() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let inv = psd_inverse(&d).unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15 && (inv[(1, 1)] - 2.0).abs() < 1e-15);
    }
}
