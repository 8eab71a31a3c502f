use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::matrix::ReversedFIM;
use crate::error::{Error, Result};
use crate::gaussq::QuadratureGrid;
use crate::meanfield::{NetSpec, NormMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Cosines of the principal angles, descending.
    pub cosines: Vec<f64>,
    /// Cosine between the i-th top eigenvector of `F` and its projection
    /// onto the span of the mean gradients.
    pub per_vector: Vec<f64>,
    pub width: Option<usize>,
    pub mode: NormMode,
}

/// Inverse square root of a symmetric positive definite matrix.
fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m.clone());
    if e.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numerical("Gram matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// Principal angles between the top-C eigenvectors of `F` and the span of
/// the mean gradients `E[grad f_k]`.
///
/// Both families live in parameter space as `R w`, with `w` a top
/// eigenvector of `F*`, and `R nu_k`, with `nu_k` the block-constant vector
/// `1/sqrt(T)` on block `k`. Every inner product `<R a, R b>` equals
/// `a^T F* b`, so the angles follow from `F*` alone.
pub fn top_eigvec_alignment(spec: &NetSpec, f: &ReversedFIM) -> Result<AlignmentReport> {
    if !spec.is_non_centered(&QuadratureGrid::default()) {
        return Err(Error::CenteredNetwork(
            "mean gradients are not the top eigenvectors of a centered network".into(),
        ));
    }
    let (c, t) = (f.outputs, f.batch);
    if f.dim() != c * t {
        return Err(Error::InvalidArgument("matrix does not match C x T".into()));
    }
    let fm = &f.matrix;
    let e = SymmetricEigen::new(fm.clone());
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let mut w = DMatrix::zeros(c * t, c);
    for (j, &i) in order.iter().take(c).enumerate() {
        w.set_column(j, &e.eigenvectors.column(i));
    }
    let mut nu = DMatrix::zeros(c * t, c);
    let v = 1.0 / (t as f64).sqrt();
    for k in 0..c {
        nu.view_mut((k * t, k), (t, 1)).fill(v);
    }
    let fw = fm * &w;
    let fnu = fm * &nu;
    let g_ww = w.transpose() * &fw;
    let g_nn = nu.transpose() * &fnu;
    let g_wn = w.transpose() * &fnu;
    let whitened = inv_sqrt(&g_ww)? * &g_wn * inv_sqrt(&g_nn)?;
    let mut cosines: Vec<f64> = whitened
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    let per_vector = whitened
        .row_iter()
        .map(|r| r.norm().clamp(0.0, 1.0))
        .collect();
    Ok(AlignmentReport {
        cosines,
        per_vector,
        width: f.width,
        mode: f.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fimlab::matrix::{reversed_fim, reversed_fim_of};
    use crate::meanfield::Activation;
    use crate::netlab::{init_params, Batch, JacobianBlock};

    #[test]
    fn identical_columns_align_exactly() {
        let (c, t, p) = (2, 3, 7);
        let mut r = DMatrix::zeros(p, c * t);
        for k in 0..c {
            for s in 0..t {
                r[(k, k * t + s)] = 1.0 + k as f64;
            }
        }
        let jac = JacobianBlock {
            r,
            outputs: c,
            batch: t,
            mode: NormMode::None,
        };
        let f = reversed_fim(&jac).unwrap();
        let spec = NetSpec::uniform(3, c, Activation::Relu, 2.0, 0.0);
        let rep = top_eigvec_alignment(&spec, &f).unwrap();
        assert_eq!(rep.cosines.len(), c);
        for cos in rep.cosines.iter().chain(&rep.per_vector) {
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_relu_net_aligns() {
        let spec = NetSpec::uniform(3, 1, Activation::Relu, 2.0, 0.0);
        let p = init_params(&spec, 512, 1).unwrap();
        let b = Batch::for_params(&p, 50, 1);
        let f = reversed_fim_of(&p, &b, NormMode::None).unwrap();
        let rep = top_eigvec_alignment(&spec, &f).unwrap();
        assert!(rep.cosines[0] > 0.9, "{:?}", rep.cosines);
    }

    #[test]
    fn centered_network_refused() {
        let spec = NetSpec::uniform(3, 1, Activation::Tanh, 2.0, 0.0);
        let p = init_params(&spec, 16, 1).unwrap();
        let b = Batch::for_params(&p, 5, 1);
        let f = reversed_fim_of(&p, &b, NormMode::None).unwrap();
        assert!(matches!(
            top_eigvec_alignment(&spec, &f),
            Err(Error::CenteredNetwork(_))
        ));
    }
}
