//! Dense reference implementations for small systems: the Kalman filter
//! and the left- and right-multiplied ensemble transforms. Test use only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseKfState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

fn symmetrise(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("{what} is singular")))
}

/// `x <- M x`, `P <- M P Mᵀ + Q`.
pub fn kf_forecast(state: &DenseKfState, m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DenseKfState> {
    let n = state.x.len();
    if m.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::Shape(format!("M and Q must be {n} x {n}")));
    }
    Ok(DenseKfState {
        x: m * &state.x,
        p: symmetrise(&(m * &state.p * m.transpose() + q)),
    })
}

/// `K = P Hᵀ (H P Hᵀ + R)⁻¹`.
pub fn kalman_gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = h * p * h.transpose() + r;
    let sinv = s
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
    Ok(p * h.transpose() * sinv)
}

/// Analysis step; `P` is symmetrised afterwards.
pub fn kf_analysis(state: &DenseKfState, h: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> Result<DenseKfState> {
    let n = state.x.len();
    let p = y.len();
    if h.shape() != (p, n) || r.shape() != (p, p) {
        return Err(Error::Shape(format!("H must be {p} x {n} and R {p} x {p}")));
    }
    let k = kalman_gain(&state.p, h, r)?;
    let x = &state.x + &k * (y - h * &state.x);
    let pa = (DMatrix::identity(n, n) - &k * h) * &state.p;
    Ok(DenseKfState { x, p: symmetrise(&pa) })
}

/// Symmetric function of a symmetric matrix through its eigendecomposition.
pub fn sym_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let e = symmetrise(a).symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    symmetrise(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

/// Eigendecomposition `X = V L V⁻¹` of a matrix with real eigenvalues.
/// Eigenvalues within `tol` are clustered; each cluster's eigenvectors
/// span the numerical null space of `X - λI`.
fn real_eigen(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = x.nrows();
    let scale = x.amax().max(1.0);
    let ev = x
        .clone()
        .try_schur(1e-13, 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?
        .eigenvalues()
        .ok_or_else(|| Error::Numerical("matrix has complex eigenvalues".into()))?;
    let mut vals: Vec<f64> = ev.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    let tol = 1e-7 * scale;
    let mut clusters: Vec<Vec<f64>> = Vec::new();
    for v in vals {
        match clusters.last_mut() {
            Some(c) if (v - c[c.len() - 1]).abs() <= tol => c.push(v),
            _ => clusters.push(vec![v]),
        }
    }
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut lambdas: Vec<f64> = Vec::with_capacity(n);
    for c in &clusters {
        let lam = c.iter().sum::<f64>() / c.len() as f64;
        let shifted = x - DMatrix::identity(n, n) * lam;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.expect("requested V");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        let null_tol = 1e-6 * scale;
        for &k in order.iter().take(c.len()) {
            if svd.singular_values[k] > null_tol {
                return Err(Error::Numerical(format!(
                    "matrix is not diagonalisable (eigenvalue {lam} lacks eigenvectors)"
                )));
            }
            cols.push(vt.row(k).transpose());
            lambdas.push(lam);
        }
    }
    Ok((DMatrix::from_columns(&cols), DVector::from_vec(lambdas)))
}

/// `V f(L) V⁻¹` for a diagonalisable matrix with real eigenvalues.
pub fn matrix_fn(x: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let (v, l) = real_eigen(x)?;
    let vinv = inverse(&v, "eigenvector matrix")?;
    Ok(&v * DMatrix::from_diagonal(&l.map(f)) * vinv)
}

/// Positive square root of a matrix with non-negative real eigenvalues.
pub fn sqrtm(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    matrix_fn(x, |l| l.max(0.0).sqrt())
}

/// Denman–Beavers iteration for the principal square root; an independent
/// cross-check of [`sqrtm`].
pub fn sqrtm_db(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let mut y = x.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = inverse(&y, "Denman-Beavers iterate")?;
        let zi = inverse(&z, "Denman-Beavers iterate")?;
        let y1 = (&y + zi) * 0.5;
        let z1 = (&z + yi) * 0.5;
        let delta = (&y1 - &y).amax();
        y = y1;
        z = z1;
        if delta < 1e-15 * y.amax().max(1.0) {
            break;
        }
    }
    Ok(y)
}

/// `T_L = (I - K H)^{1/2}`.
pub fn etm_left_sqrt(k: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    sqrtm(&(DMatrix::identity(n, n) - k * h))
}

/// `T_L = (I + P Hᵀ R⁻¹ H)^{-1/2}`.
pub fn etm_left_inv_sqrt(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let rinv = inverse(r, "R")?;
    matrix_fn(&(DMatrix::identity(n, n) + p * h.transpose() * rinv * h), |l| 1.0 / l.sqrt())
}

/// `T_R = [I - (HA)ᵀ (HPHᵀ + R)⁻¹ HA / (m-1)]^{1/2}`.
pub fn etm_right_sqrt(ha: &DMatrix<f64>, hpht: &DMatrix<f64>, r: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let minv = inverse(&(hpht + r), "HPHᵀ + R")?;
    let a = DMatrix::identity(m, m) - ha.transpose() * minv * ha / (m as f64 - 1.0);
    Ok(sym_fn(&a, |l| l.max(0.0).sqrt()))
}

/// `T_R = [I + (HA)ᵀ R⁻¹ HA / (m-1)]^{-1/2}`.
pub fn etm_etkf(ha: &DMatrix<f64>, r: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let rinv = inverse(r, "R")?;
    let a = DMatrix::identity(m, m) + ha.transpose() * rinv * ha / (m as f64 - 1.0);
    Ok(sym_fn(&a, |l| 1.0 / l.sqrt()))
}

/// `T_R = I - (HA)ᵀ M^{-1/2} (M^{1/2} + R^{1/2})⁻¹ HA / (m-1)`, `M = HPHᵀ + R`.
/// Symmetric only when `M` and `R` commute; see [`standardised`].
pub fn etm_andrews(ha: &DMatrix<f64>, hpht: &DMatrix<f64>, r: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let mm = hpht + r;
    let m_isqrt = sym_fn(&mm, |l| 1.0 / l.sqrt());
    let m_sqrt = sym_fn(&mm, f64::sqrt);
    let r_sqrt = sym_fn(r, f64::sqrt);
    let inner = inverse(&(m_sqrt + r_sqrt), "M^{1/2} + R^{1/2}")?;
    Ok(DMatrix::identity(m, m) - ha.transpose() * m_isqrt * inner * ha / (m as f64 - 1.0))
}

/// Rescales `HA` by `R^{-1/2}` so that the observation error becomes `I`;
/// returns `(R^{-1/2} HA, R^{-1/2} HA (HA)ᵀ R^{-1/2} / (m-1), I)`.
pub fn standardised(ha: &DMatrix<f64>, r: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let p = ha.nrows();
    let m = ha.ncols() as f64;
    let hs = sym_fn(r, |l| 1.0 / l.sqrt()) * ha;
    let hpht = &hs * hs.transpose() / (m - 1.0);
    (hs, hpht, DMatrix::identity(p, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_forecast() {
        let s = DenseKfState {
            x: DVector::from_vec(vec![1.0, 2.0]),
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let f = kf_forecast(&s, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(f, s);
        let g = kf_forecast(&s, &DMatrix::identity(2, 2), &(DMatrix::identity(2, 2) * 0.3)).unwrap();
        assert!((g.p[(0, 0)] - 2.3).abs() < 1e-15 && (g.p[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_analysis() {
        let s = DenseKfState {
            x: DVector::from_vec(vec![0.0]),
            p: DMatrix::from_element(1, 1, 1.0),
        };
        let a = kf_analysis(&s, &DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0), &DVector::from_vec(vec![2.0]))
            .unwrap();
        assert!((a.x[0] - 1.0).abs() < 1e-15);
        assert!((a.p[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_and_perfect_observations() {
        let s = DenseKfState {
            x: DVector::from_vec(vec![1.0, -1.0]),
            p: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
        };
        let h = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![3.0, 4.0]);
        let a = kf_analysis(&s, &h, &(DMatrix::identity(2, 2) * 1e12), &y).unwrap();
        assert!((&a.x - &s.x).amax() < 1e-9 && (&a.p - &s.p).amax() < 1e-9);
        let b = kf_analysis(&s, &h, &(DMatrix::identity(2, 2) * 1e-12), &y).unwrap();
        assert!((&b.x - &y).amax() < 1e-6);
    }

    #[test]
    fn nonsymmetric_sqrt_matches_iteration() {
        let x = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 3.0, 1.0, 0.0, 0.0, 1.5]);
        let a = sqrtm(&x).unwrap();
        let b = sqrtm_db(&x).unwrap();
        assert!((&a * &a - &x).amax() < 1e-12);
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn repeated_eigenvalue() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 4.0]);
        assert!((sqrtm(&x).unwrap() - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 2.0]))).amax() < 1e-14);
    }

    #[test]
    fn jordan_block_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(sqrtm(&x).is_err());
    }
}
