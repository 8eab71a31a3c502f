use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::meanfield::NetSpec;
use crate::netlab::{forward, init_params, jacobian_of, loss, Batch};

const MAX_PARAMS: usize = 2000;

/// Largest deviation between the loss Hessian and the FIM `R R^T`, relative
/// to the largest FIM entry. Labels are the network's own outputs shifted by
/// `label_shift`, so a zero shift puts the network at a zero-residual point.
///
/// The Hessian uses loss values only: the four-point central difference
/// `[E(++) - E(+-) - E(-+) + E(--)] / (4 eps^2)` with `eps = 1e-4`.
pub fn hessian_fim_consistency(
    spec: &NetSpec,
    m: usize,
    t: usize,
    seed: u64,
    label_shift: f64,
) -> Result<f64> {
    let params = init_params(spec, m, seed)?;
    let n = params.n_params();
    if n > MAX_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "finite-difference Hessian limited to {MAX_PARAMS} parameters, net has {n}"
        )));
    }
    let mode = spec.norm_mode;
    let batch = Batch::for_params(&params, t, seed);
    let labels = forward(&params, &batch, mode)?.output.add_scalar(label_shift);
    let jac = jacobian_of(&params, &batch, mode)?;
    let fim = &jac.r * jac.r.transpose();
    let eps = 1e-4;
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut p = params.clone();
            let mut row = vec![0.0; n];
            for (j, slot) in row.iter_mut().enumerate().skip(i) {
                let mut eval = |si: f64, sj: f64| -> Result<f64> {
                    let (bi, bj) = (*p.slot_mut(i), *p.slot_mut(j));
                    *p.slot_mut(i) = bi + si * eps;
                    *p.slot_mut(j) += sj * eps;
                    let v = loss(&p, &batch, &labels, mode);
                    *p.slot_mut(i) = bi;
                    *p.slot_mut(j) = bj;
                    v
                };
                let v = eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?;
                *slot = v / (4.0 * eps * eps);
            }
            Ok(row)
        })
        .collect();
    let mut h = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate().skip(i) {
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let scale = fim.amax();
    Ok((h - fim).amax() / scale)
}
