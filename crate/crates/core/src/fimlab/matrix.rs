use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::meanfield::NormMode;
use crate::netlab::{forward, reversed_fim_direct, Batch, JacobianBlock, Params};

/// `F* = R^T R`, of size `CT x CT`, with the metadata needed to turn traces
/// into eigenvalue statistics.
#[derive(Debug, Clone)]
pub struct ReversedFIM {
    pub matrix: DMatrix<f64>,
    pub mode: NormMode,
    pub outputs: usize,
    pub batch: usize,
    /// Parameter count `P`.
    pub n_params: usize,
    pub width: Option<usize>,
    pub seed: Option<u64>,
}

impl ReversedFIM {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn reversed_fim(jac: &JacobianBlock) -> Result<ReversedFIM> {
    if jac.r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("Jacobian has non-finite entries".into()));
    }
    Ok(ReversedFIM {
        matrix: symmetrize(jac.r.transpose() * &jac.r),
        mode: jac.mode,
        outputs: jac.outputs,
        batch: jac.batch,
        n_params: jac.r.nrows(),
        width: None,
        seed: None,
    })
}

/// Reversed FIM of a network on a batch, built without materializing `R`.
pub fn reversed_fim_of(params: &Params, batch: &Batch, mode: NormMode) -> Result<ReversedFIM> {
    let tr = forward(params, batch, mode)?;
    let m = reversed_fim_direct(params, &tr)?;
    Ok(ReversedFIM {
        matrix: m,
        mode,
        outputs: tr.output.nrows(),
        batch: tr.batch_size(),
        n_params: params.n_params(),
        width: Some(params.widths[1]),
        seed: Some(params.seed),
    })
}

fn check_dims(f: &ReversedFIM, c: usize, t: usize) -> Result<()> {
    if f.dim() != c * t || f.matrix.ncols() != c * t {
        return Err(Error::InvalidArgument(format!(
            "matrix of size {} does not split into {c} blocks of {t}",
            f.dim()
        )));
    }
    Ok(())
}

/// Center every length-`t` block of `v` in place.
fn center_blocks(m: &mut DMatrix<f64>, c: usize, t: usize, along_rows: bool) {
    for k in 0..c {
        if along_rows {
            for j in 0..m.ncols() {
                let mut blk = m.view_mut((k * t, j), (t, 1));
                let mean = blk.mean();
                blk.add_scalar_mut(-mean);
            }
        } else {
            for i in 0..m.nrows() {
                let mut blk = m.view_mut((i, k * t), (1, t));
                let mean = blk.mean();
                blk.add_scalar_mut(-mean);
            }
        }
    }
}

/// `(I_C (x) G) F* (I_C (x) G)` with `G = I_T - 1 1^T / T`.
pub fn project_mean_subtraction(f: &ReversedFIM, c: usize, t: usize) -> Result<ReversedFIM> {
    check_dims(f, c, t)?;
    let mut m = f.matrix.clone();
    center_blocks(&mut m, c, t, true);
    center_blocks(&mut m, c, t, false);
    let mut out = f.clone();
    out.matrix = symmetrize(m);
    out.mode = NormMode::BnLastMeansub;
    Ok(out)
}

/// Result of applying the last-layer variance projector `Q` to a
/// mean-subtracted reversed FIM.
#[derive(Debug, Clone)]
pub struct VarianceProjected {
    /// The non-symmetric product `Q F*_mBN`.
    pub product: DMatrix<f64>,
    /// `Q^{1/2} F*_mBN Q^{1/2}`, similar to the product and symmetric.
    pub symmetric: ReversedFIM,
}

/// Block `k` of `Q` is `(1/sigma_k^2)(I - u u^T / (T sigma_k^2))` for the
/// centered readout row `u = ubar_k`. That matrix is `1/sigma_k^2` times an
/// orthogonal projector, so its square root is the projector over `sigma_k`.
pub fn apply_variance_projector(
    f_meansub: &ReversedFIM,
    ubar: &DMatrix<f64>,
    c: usize,
    t: usize,
) -> Result<VarianceProjected> {
    check_dims(f_meansub, c, t)?;
    if ubar.shape() != (c, t) {
        return Err(Error::InvalidArgument("centered readout must be C x T".into()));
    }
    let n = c * t;
    let mut q = DMatrix::zeros(n, n);
    let mut q_half = DMatrix::zeros(n, n);
    for k in 0..c {
        let u = ubar.row(k).transpose();
        let var = u.norm_squared() / t as f64;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::DegenerateNormalization {
                layer: 0,
                index: k,
            });
        }
        let proj = DMatrix::identity(t, t) - (&u * u.transpose()) / (t as f64 * var);
        q.view_mut((k * t, k * t), (t, t)).copy_from(&(&proj / var));
        q_half.view_mut((k * t, k * t), (t, t)).copy_from(&(&proj / var.sqrt()));
    }
    let product = &q * &f_meansub.matrix;
    let sym = &q_half * &f_meansub.matrix * &q_half;
    let mut symmetric = f_meansub.clone();
    symmetric.matrix = symmetrize(sym);
    symmetric.mode = NormMode::BnLastFull;
    Ok(VarianceProjected { product, symmetric })
}
