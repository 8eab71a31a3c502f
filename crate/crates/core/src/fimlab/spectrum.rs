use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::matrix::ReversedFIM;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use rand_distr::{Distribution, StandardNormal};

/// Largest matrix handled by the dense eigensolver.
pub const DENSE_LIMIT: usize = 4096;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMethod {
    DenseSymmetric,
    PowerIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub m_lambda: f64,
    pub s_lambda: f64,
    pub lambda_max: f64,
    /// Descending, when requested and the dense path ran.
    pub eigenvalues: Option<Vec<f64>>,
    pub method: EigenMethod,
    pub iterations: usize,
    pub n_params: usize,
}

impl SpectrumStats {
    /// `s/m <= lambda_max <= sqrt(P s)` with relative slack `tol`.
    pub fn moment_sandwich_holds(&self, tol: f64) -> bool {
        if self.m_lambda <= 0.0 {
            return self.lambda_max.abs() <= tol;
        }
        let lo = self.s_lambda / self.m_lambda;
        let hi = (self.n_params as f64 * self.s_lambda).sqrt();
        lo <= self.lambda_max * (1.0 + tol) && self.lambda_max <= hi * (1.0 + tol)
    }
}

/// Eigenvalue statistics of a reversed FIM. Traces are normalized by the
/// parameter count, since `F` and `F*` share their nonzero spectrum.
pub fn spectrum(f: &ReversedFIM, keep_all: bool) -> Result<SpectrumStats> {
    let m = &f.matrix;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let p = f.n_params as f64;
    let trace = m.trace();
    let sq = m.norm_squared();
    let mut out = SpectrumStats {
        m_lambda: trace / p,
        s_lambda: sq / p,
        lambda_max: 0.0,
        eigenvalues: None,
        method: EigenMethod::DenseSymmetric,
        iterations: 0,
        n_params: f.n_params,
    };
    if f.dim() <= DENSE_LIMIT {
        let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        out.lambda_max = ev[0];
        if keep_all {
            out.eigenvalues = Some(ev);
        }
    } else {
        let (lam, iters) = power_iteration(m, f.seed.unwrap_or(0))?;
        out.lambda_max = lam;
        out.method = EigenMethod::PowerIteration;
        out.iterations = iters;
    }
    Ok(out)
}

/// Dominant eigenvalue of a PSD matrix.
pub fn power_iteration(m: &DMatrix<f64>, seed: u64) -> Result<(f64, usize)> {
    let n = m.nrows();
    let mut r = rng::stream(seed, Purpose::Probe, 0);
    let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
    v.normalize_mut();
    let mut lam = 0.0;
    for it in 1..=POWER_MAX_ITER {
        let w = m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok((0.0, it));
        }
        v = w / norm;
        if it > 1 && (next - lam).abs() <= POWER_TOL * next.abs() {
            return Ok((next, it));
        }
        lam = next;
    }
    Err(Error::Numerical(format!(
        "power iteration did not converge in {POWER_MAX_ITER} iterations"
    )))
}

/// Eigenvalues above `tol * max` in magnitude, descending.
pub fn nonzero_eigenvalues(m: &DMatrix<f64>, tol: f64) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let top = ev.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    ev.into_iter().filter(|x| x.abs() > tol * top).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fimlab::matrix::reversed_fim;
    use crate::meanfield::{Activation, NetSpec, NormMode};
    use crate::netlab::{init_params, jacobian_of, Batch};
    use proptest::prelude::*;

    fn wrap(m: DMatrix<f64>, p: usize) -> ReversedFIM {
        ReversedFIM {
            matrix: m,
            mode: NormMode::None,
            outputs: 1,
            batch: 0,
            n_params: p,
            width: None,
            seed: None,
        }
    }

    #[test]
    fn identity_and_rank_one() {
        let s = spectrum(&wrap(DMatrix::identity(5, 5), 5), true).unwrap();
        assert_eq!((s.m_lambda, s.lambda_max, s.s_lambda), (1.0, 1.0, 1.0));
        let v = DVector::from_column_slice(&[2.0, 1.0, 1.0, 1.0]);
        let s = spectrum(&wrap(&v * v.transpose(), 10), false).unwrap();
        assert!((s.m_lambda - 0.7).abs() < 1e-12);
        assert!((s.lambda_max - 7.0).abs() < 1e-12);
        assert!((s.s_lambda - 4.9).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_agrees_with_dense() {
        let a = DMatrix::from_fn(40, 30, |i, j| ((i * 13 + j * 7) % 11) as f64 / 11.0 - 0.4);
        let m = a.transpose() * a;
        let (lam, _) = power_iteration(&m, 1).unwrap();
        let dense = spectrum(&wrap(m, 30), false).unwrap().lambda_max;
        assert!((lam - dense).abs() < 1e-8 * dense);
    }

    #[test]
    fn dual_spectrum() {
        let spec = NetSpec::uniform(3, 2, Activation::Tanh, 1.5, 0.2);
        let p = init_params(&spec, 4, 2).unwrap();
        let b = Batch::for_params(&p, 3, 2);
        let jac = jacobian_of(&p, &b, NormMode::None).unwrap();
        let f = &jac.r * jac.r.transpose();
        let fs = reversed_fim(&jac).unwrap().matrix;
        let a = nonzero_eigenvalues(&f, 1e-10);
        let b_ = nonzero_eigenvalues(&fs, 1e-10);
        assert_eq!(a.len(), b_.len());
        for (x, y) in a.iter().zip(&b_) {
            assert!((x - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn moment_sandwich(seed in 0u64..1000, rows in 2usize..12, cols in 1usize..8) {
            let mut r = rng::stream(seed, Purpose::Probe, 1);
            let a = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r));
            let s = spectrum(&wrap(a.transpose() * &a, rows), false).unwrap();
            prop_assert!(s.moment_sandwich_holds(1e-12));
        }
    }
}
