//! Toy forecast models for twin experiments.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` on a ring, RK4.
    Lorenz96,
    /// One-cell cyclic shift per step.
    LinAdv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_cycle: usize,
    /// Additive Gaussian noise std applied once per cycle; 0 for a perfect model.
    pub q_std: f64,
}

impl ModelSpec {
    pub fn lorenz96(n: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Lorenz96,
            n,
            forcing: 8.0,
            dt: 0.05,
            steps_per_cycle: 1,
            q_std: 0.0,
        }
    }

    pub fn linadv(n: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinAdv,
            n,
            forcing: 0.0,
            dt: 1.0,
            steps_per_cycle: 1,
            q_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("model dt must be positive".into()));
        }
        if self.kind == ModelKind::Lorenz96 && self.n < 4 {
            return Err(Error::InvalidArgument("Lorenz-96 needs n >= 4".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("model state must be non-empty".into()));
        }
        if !(self.q_std >= 0.0) {
            return Err(Error::InvalidArgument("model noise std must be non-negative".into()));
        }
        Ok(())
    }

    /// Linear propagator of one cycle; `None` for nonlinear models.
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        match self.kind {
            ModelKind::LinAdv => {
                let n = self.n;
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    m[(i, (i + n - 1) % n)] = 1.0;
                }
                Some(m.pow(self.steps_per_cycle as u32))
            }
            ModelKind::Lorenz96 => None,
        }
    }
}

fn l96_rhs(x: &[f64], f: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let xp1 = x[(i + 1) % n];
        let xm1 = x[(i + n - 1) % n];
        let xm2 = x[(i + n - 2) % n];
        out[i] = (xp1 - xm2) * xm1 - x[i] + f;
    }
}

fn rk4(x: &[f64], f: f64, dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    l96_rhs(x, f, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    l96_rhs(&tmp, f, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    l96_rhs(&tmp, f, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    l96_rhs(&tmp, f, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// One model time step.
pub fn step(spec: &ModelSpec, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != spec.n {
        return Err(Error::Shape(format!("state has {} elements, model expects {}", state.len(), spec.n)));
    }
    let out = match spec.kind {
        ModelKind::Lorenz96 => rk4(state, spec.forcing, spec.dt),
        ModelKind::LinAdv => {
            let n = spec.n;
            (0..n).map(|i| state[(i + n - 1) % n]).collect()
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelBlowUp(1));
    }
    Ok(out)
}

/// Advances a state by `cycles` cycles without noise.
pub fn run(spec: &ModelSpec, state: &[f64], cycles: usize) -> Result<Vec<f64>> {
    let mut x = state.to_vec();
    for c in 0..cycles * spec.steps_per_cycle {
        x = step(spec, &x).map_err(|e| match e {
            Error::ModelBlowUp(_) => Error::ModelBlowUp(c + 1),
            e => e,
        })?;
    }
    Ok(x)
}

/// Deterministic per-member generator: stream `member` of `seed`.
pub fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

/// Propagates each column independently. With `q_std > 0`, noise for member
/// `j` is drawn from [`member_rng`]`(seed, j)`.
pub fn propagate_ensemble(spec: &ModelSpec, e: &DMatrix<f64>, cycles: usize, seed: u64) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if e.nrows() != spec.n {
        return Err(Error::Shape(format!("ensemble has {} rows, model expects {}", e.nrows(), spec.n)));
    }
    if e.ncols() < 2 {
        return Err(Error::InvalidArgument("ensemble needs at least 2 members".into()));
    }
    let cols: Vec<Vec<f64>> = (0..e.ncols())
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let mut rng = member_rng(seed, j);
            let mut x: Vec<f64> = e.column(j).iter().copied().collect();
            for _ in 0..cycles {
                x = run(spec, &x, 1)?;
                if spec.q_std > 0.0 {
                    for v in &mut x {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += spec.q_std * z;
                    }
                }
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(spec.n, cols.len(), |i, j| cols[j][i]))
}

/// Propagates a single state with the same noise convention as member 0.
pub fn propagate_state(spec: &ModelSpec, x: &DVector<f64>, cycles: usize, seed: u64) -> Result<DVector<f64>> {
    let mut rng = member_rng(seed, 0);
    let mut v: Vec<f64> = x.iter().copied().collect();
    for _ in 0..cycles {
        v = run(spec, &v, 1)?;
        if spec.q_std > 0.0 {
            for e in &mut v {
                let z: f64 = StandardNormal.sample(&mut rng);
                *e += spec.q_std * z;
            }
        }
    }
    Ok(DVector::from_vec(v))
}
