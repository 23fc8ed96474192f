//! Ensemble container: columns are members.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest state size for which [`Ensemble::covariance`] materialises `P`.
pub const MAX_DENSE_N: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    e: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(e: DMatrix<f64>) -> Result<Self> {
        if e.ncols() < 2 {
            return Err(Error::InvalidArgument(format!("ensemble size {} < 2", e.ncols())));
        }
        Ok(Ensemble { e })
    }

    pub fn from_mean_anomalies(x: &DVector<f64>, a: &DMatrix<f64>) -> Result<Self> {
        if x.len() != a.nrows() {
            return Err(Error::Shape("mean and anomalies differ in state size".into()));
        }
        let mut e = a.clone();
        for mut c in e.column_iter_mut() {
            c += x;
        }
        Self::new(e)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.e
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn m(&self) -> usize {
        self.e.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.e.column_mean()
    }

    pub fn anomalies(&self) -> DMatrix<f64> {
        self.mean_and_anomalies().1
    }

    pub fn mean_and_anomalies(&self) -> (DVector<f64>, DMatrix<f64>) {
        let x = self.mean();
        let mut a = self.e.clone();
        for mut c in a.column_iter_mut() {
            c -= &x;
        }
        (x, a)
    }

    /// `P = A Aᵀ / (m - 1)`; only for `n <= MAX_DENSE_N`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.n() > MAX_DENSE_N {
            return Err(Error::InvalidArgument(format!(
                "dense covariance limited to n <= {MAX_DENSE_N}, got {}",
                self.n()
            )));
        }
        Ok(covariance(&self.anomalies()))
    }

    /// `E X5`.
    pub fn apply_x5(&self, x5: &DMatrix<f64>) -> Result<Ensemble> {
        let m = self.m();
        if x5.nrows() != m || x5.ncols() != m {
            return Err(Error::Shape(format!("X5 must be {m} x {m}")));
        }
        Ensemble::new(&self.e * x5)
    }

    /// `x 1ᵀ + A Up`, with `Up` orthogonal and `Up 1 = 1`.
    pub fn redraw(&self, up: &DMatrix<f64>) -> Result<Ensemble> {
        let m = self.m();
        if up.nrows() != m || up.ncols() != m {
            return Err(Error::Shape(format!("Up must be {m} x {m}")));
        }
        let tol = 1e-8;
        let orth = (up * up.transpose() - DMatrix::<f64>::identity(m, m)).amax();
        if orth > tol {
            return Err(Error::InvalidArgument(format!("Up is not orthogonal (max deviation {orth:e})")));
        }
        let ones = DVector::from_element(m, 1.0);
        let mp = (up * &ones - &ones).amax();
        if mp > tol {
            return Err(Error::InvalidArgument(format!("Up does not preserve the mean (max deviation {mp:e})")));
        }
        let (x, a) = self.mean_and_anomalies();
        Ensemble::from_mean_anomalies(&x, &(a * up))
    }

    /// Element-wise standard deviation with `1/(m-1)` normalisation.
    pub fn spread(&self) -> DVector<f64> {
        spread(&self.anomalies())
    }
}

pub fn covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.ncols() as f64;
    a * a.transpose() / (m - 1.0)
}

/// `x + A w`.
pub fn apply_w(x: &DVector<f64>, a: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != x.len() || a.ncols() != w.len() {
        return Err(Error::Shape("apply_w: shapes do not conform".into()));
    }
    Ok(x + a * w)
}

pub fn spread(a: &DMatrix<f64>) -> DVector<f64> {
    let m = a.ncols() as f64;
    DVector::from_iterator(
        a.nrows(),
        a.row_iter().map(|r| (r.iter().map(|v| v * v).sum::<f64>() / (m - 1.0)).sqrt()),
    )
}

/// Element-wise spread of member values in a flat slice.
pub fn spread_of(values: &[f64]) -> f64 {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
}

/// Random orthogonal `m x m` matrix fixing `1`: `H diag(1, Q) H` with `H`
/// the Householder reflection mapping `e1` to `1/√m`.
pub fn mean_preserving_rotation<R: rand::Rng>(m: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut v = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    v[0] -= 1.0;
    let h = if v.norm() < 1e-14 {
        DMatrix::identity(m, m)
    } else {
        let v = v.normalize();
        DMatrix::identity(m, m) - 2.0 * &v * v.transpose()
    };
    let g = DMatrix::from_fn(m - 1, m - 1, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let mut d = DMatrix::zeros(m, m);
    d[(0, 0)] = 1.0;
    d.view_mut((1, 1), (m - 1, m - 1)).copy_from(&q);
    &h * d * &h
}
