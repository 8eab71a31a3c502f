use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::forward::{forward, ForwardTrace};
use super::params::{push_row_major, Batch, Params};
use crate::error::{Error, Result};
use crate::meanfield::NormMode;

/// Backward through a standardization along rows: each row of `v` is a
/// cotangent for the standardized row `n` with scale `sd`.
fn norm_rows_vjp(v: &DMatrix<f64>, n: &DMatrix<f64>, sd: &[f64]) -> DMatrix<f64> {
    let t = v.ncols() as f64;
    let mut out = v.clone();
    for i in 0..v.nrows() {
        let vr = v.row(i);
        let nr = n.row(i);
        let mean = vr.mean();
        let dot = vr.dot(&nr) / t;
        let inv = 1.0 / sd[i];
        for j in 0..v.ncols() {
            out[(i, j)] = inv * (v[(i, j)] - mean - n[(i, j)] * dot);
        }
    }
    out
}

/// Same along columns (layer norm).
fn norm_cols_vjp(v: &DMatrix<f64>, n: &DMatrix<f64>, sd: &[f64]) -> DMatrix<f64> {
    let m = v.nrows() as f64;
    let mut out = v.clone();
    for j in 0..v.ncols() {
        let vc = v.column(j);
        let nc = n.column(j);
        let mean = vc.mean();
        let dot = vc.dot(&nc) / m;
        let inv = 1.0 / sd[j];
        for i in 0..v.nrows() {
            out[(i, j)] = inv * (v[(i, j)] - mean - n[(i, j)] * dot);
        }
    }
    out
}

/// Pull a cotangent on the outputs `f` back to the readout pre-activations
/// `u^L`.
pub fn output_vjp(params: &Params, trace: &ForwardTrace, g: &DMatrix<f64>) -> DMatrix<f64> {
    let depth = trace.depth();
    match trace.mode {
        NormMode::None | NormMode::BnMiddle => g.clone(),
        NormMode::BnLastMeansub => {
            let mut out = g.clone();
            for (k, mut row) in out.row_iter_mut().enumerate() {
                let mean = row.mean();
                row.add_scalar_mut(-mean);
                row *= params.gamma[k];
            }
            out
        }
        NormMode::BnLastFull => {
            let n = trace.normed[depth - 1].as_ref().expect("normalized readout");
            let sd = &trace.stats[depth - 1].as_ref().expect("readout stats").sd;
            let mut scaled = g.clone();
            for (k, mut row) in scaled.row_iter_mut().enumerate() {
                row *= params.gamma[k];
            }
            norm_rows_vjp(&scaled, n, sd)
        }
        NormMode::Layernorm => {
            let n = trace.normed[depth - 1].as_ref().expect("normalized readout");
            let sd = &trace.stats[depth - 1].as_ref().expect("readout stats").sd;
            norm_cols_vjp(g, n, sd)
        }
    }
}

/// Pull a cotangent on `u^L` back through the hidden layers. Returns the
/// cotangents on every `u^l`, `l = 1..=L`, at index `l - 1`.
pub fn hidden_vjp(params: &Params, trace: &ForwardTrace, g_last: DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let depth = trace.depth();
    let mut sens = vec![DMatrix::zeros(0, 0); depth];
    sens[depth - 1] = g_last;
    for l in (1..depth).rev() {
        let dh = params.weights[l].transpose() * &sens[l];
        let act = params.spec.activations[l - 1];
        let z = trace.act_input(l);
        let dn = dh.zip_map(z, |d, x| d * act.deriv(x));
        sens[l - 1] = match trace.mode {
            NormMode::BnMiddle => {
                let st = trace.stats[l - 1].as_ref().expect("batch stats");
                norm_rows_vjp(&dn, trace.normed[l - 1].as_ref().unwrap(), &st.sd)
            }
            NormMode::Layernorm => {
                let st = trace.stats[l - 1].as_ref().expect("layer stats");
                norm_cols_vjp(&dn, trace.normed[l - 1].as_ref().unwrap(), &st.sd)
            }
            _ => dn,
        };
    }
    sens
}

/// Cotangents on every `u^l` for a cotangent `g` on the outputs.
pub fn vjp(params: &Params, trace: &ForwardTrace, g: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    hidden_vjp(params, trace, output_vjp(params, trace, g))
}

/// Per-layer `(dW^l, db^l)`.
pub type Grads = Vec<(DMatrix<f64>, DVector<f64>)>;

/// Parameter gradients from the pre-activation cotangents.
pub fn param_grads(trace: &ForwardTrace, sens: &[DMatrix<f64>]) -> Grads {
    sens.iter()
        .enumerate()
        .map(|(i, s)| {
            let dw = s * trace.acts[i].transpose();
            let db = s.column_sum();
            (dw, db)
        })
        .collect()
}

fn flatten_grads(grads: &[(DMatrix<f64>, DVector<f64>)], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for (w, b) in grads {
        push_row_major(&mut out, w);
        out.extend(b.iter());
    }
    out
}

/// The `P x CT` matrix `R` whose column `k T + t` is the gradient of
/// `f_k(t)` divided by `sqrt(T)`.
#[derive(Debug, Clone)]
pub struct JacobianBlock {
    pub r: DMatrix<f64>,
    pub outputs: usize,
    pub batch: usize,
    pub mode: NormMode,
}

impl JacobianBlock {
    pub fn column_index(&self, k: usize, t: usize) -> usize {
        k * self.batch + t
    }
}

fn unit_seed(c: usize, t: usize, k: usize, s: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(c, t);
    g[(k, s)] = 1.0;
    g
}

/// Exact per-output gradients. Columns are independent backward passes and
/// run in parallel; each is computed the same way regardless of scheduling.
pub fn jacobian(params: &Params, trace: &ForwardTrace) -> Result<JacobianBlock> {
    let c = trace.output.nrows();
    let t = trace.batch_size();
    let p = params.n_params();
    let scale = 1.0 / (t as f64).sqrt();
    let cols: Vec<Vec<f64>> = (0..c * t)
        .into_par_iter()
        .map(|idx| {
            let g = unit_seed(c, t, idx / t, idx % t);
            let sens = vjp(params, trace, &g);
            let mut v = flatten_grads(&param_grads(trace, &sens), p);
            v.iter_mut().for_each(|x| *x *= scale);
            v
        })
        .collect();
    let mut r = DMatrix::zeros(p, c * t);
    for (j, col) in cols.iter().enumerate() {
        r.column_mut(j).copy_from_slice(col);
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite Jacobian entry".into()));
    }
    Ok(JacobianBlock {
        r,
        outputs: c,
        batch: t,
        mode: trace.mode,
    })
}

pub fn jacobian_of(params: &Params, batch: &Batch, mode: NormMode) -> Result<JacobianBlock> {
    let tr = forward(params, batch, mode)?;
    jacobian(params, &tr)
}

/// `H^T H + 1 1^T` for the activations feeding layer `l`.
fn input_kernel(trace: &ForwardTrace, l: usize) -> DMatrix<f64> {
    let h = &trace.acts[l - 1];
    let mut k = h.transpose() * h;
    k.add_scalar_mut(1.0);
    k
}

/// Output-normalization Jacobian `A` with `A[(a, s), (k, t)] = d f_k(t) / d u_a(s)`,
/// both indices k-major.
pub fn output_jacobian(params: &Params, trace: &ForwardTrace) -> DMatrix<f64> {
    let c = trace.output.nrows();
    let t = trace.batch_size();
    let mut a = DMatrix::zeros(c * t, c * t);
    for k in 0..c {
        for s in 0..t {
            let g = output_vjp(params, trace, &unit_seed(c, t, k, s));
            let col = k * t + s;
            for a_ in 0..c {
                for s_ in 0..t {
                    a[(a_ * t + s_, col)] = g[(a_, s_)];
                }
            }
        }
    }
    a
}

/// `R^T R` computed without forming `R`.
///
/// When hidden layers act on each sample separately the sensitivity of
/// `u^L_k(t)` to `u^l(t)` is one column of a single batched backward pass,
/// and the Gram entries factor into a product of two `T x T` kernels. Batch
/// norm in the hidden layers couples samples, so there each output column
/// gets its own backward pass.
pub fn reversed_fim_direct(params: &Params, trace: &ForwardTrace) -> Result<DMatrix<f64>> {
    let c = trace.output.nrows();
    let t = trace.batch_size();
    let depth = trace.depth();
    let kernels: Vec<DMatrix<f64>> = (1..=depth).map(|l| input_kernel(trace, l)).collect();
    let tf = t as f64;
    let mut fstar = if trace.mode == NormMode::BnMiddle {
        let sens: Vec<Vec<DMatrix<f64>>> = (0..c * t)
            .into_par_iter()
            .map(|idx| vjp(params, trace, &unit_seed(c, t, idx / t, idx % t)))
            .collect();
        let mut f = DMatrix::zeros(c * t, c * t);
        for l in 0..depth {
            let rows = sens[0][l].len();
            let mut z = DMatrix::zeros(rows, c * t);
            let mut y = DMatrix::zeros(rows, c * t);
            for (j, s) in sens.iter().enumerate() {
                z.column_mut(j).copy_from_slice(s[l].as_slice());
                let sk = &s[l] * &kernels[l];
                y.column_mut(j).copy_from_slice(sk.as_slice());
            }
            f += z.transpose() * y;
        }
        f / tf
    } else {
        // per-unit seeds on u^L, every sample at once
        let deltas: Vec<Vec<DMatrix<f64>>> = (0..c)
            .into_par_iter()
            .map(|k| {
                let mut g = DMatrix::zeros(c, t);
                g.row_mut(k).fill(1.0);
                hidden_vjp(params, trace, g)
            })
            .collect();
        let mut fu = DMatrix::zeros(c * t, c * t);
        for k in 0..c {
            for k2 in 0..c {
                let mut block = DMatrix::zeros(t, t);
                for l in 0..depth {
                    let g = deltas[k][l].transpose() * &deltas[k2][l];
                    block += g.component_mul(&kernels[l]);
                }
                fu.view_mut((k * t, k2 * t), (t, t)).copy_from(&block);
            }
        }
        fu /= tf;
        if trace.mode == NormMode::None {
            fu
        } else {
            let a = output_jacobian(params, trace);
            a.transpose() * fu * a
        }
    };
    let sym = (&fstar + fstar.transpose()) * 0.5;
    fstar = sym;
    if fstar.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite reversed FIM entry".into()));
    }
    Ok(fstar)
}

/// Squared loss `(1/2T) sum (y - f)^2` and its parameter gradients.
pub fn loss_and_grad(
    params: &Params,
    batch: &Batch,
    labels: &DMatrix<f64>,
    mode: NormMode,
) -> Result<(f64, Grads)> {
    let tr = forward(params, batch, mode)?;
    let t = tr.batch_size() as f64;
    let resid = &tr.output - labels;
    let loss = resid.norm_squared() / (2.0 * t);
    let g = resid / t;
    let sens = vjp(params, &tr, &g);
    Ok((loss, param_grads(&tr, &sens)))
}

pub fn loss(params: &Params, batch: &Batch, labels: &DMatrix<f64>, mode: NormMode) -> Result<f64> {
    let f = forward(params, batch, mode)?.output;
    Ok((f - labels).norm_squared() / (2.0 * batch.len() as f64))
}

/// Per-layer backward order parameters of a single network, read off the
/// sensitivities of output unit 0. Index `l` holds layer `l`; index 0 is
/// unused and left at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalBackward {
    pub qtilde_t: Vec<f64>,
    pub qtilde_st: Vec<f64>,
}

pub fn empirical_backward_order_params(params: &Params, batch: &Batch) -> Result<EmpiricalBackward> {
    let tr = forward(params, batch, NormMode::None)?;
    let c = tr.output.nrows();
    let t = tr.batch_size();
    if t < 2 {
        return Err(Error::InvalidArgument("need at least two samples for overlaps".into()));
    }
    let mut g = DMatrix::zeros(c, t);
    g.row_mut(0).fill(1.0);
    let sens = hidden_vjp(params, &tr, g);
    let depth = tr.depth();
    let tf = t as f64;
    let mut out = EmpiricalBackward {
        qtilde_t: vec![0.0; depth + 1],
        qtilde_st: vec![0.0; depth + 1],
    };
    for l in 1..=depth {
        let d = &sens[l - 1];
        let own = d.norm_squared();
        let total = d.column_sum().norm_squared();
        out.qtilde_t[l] = own / tf;
        out.qtilde_st[l] = (total - own) / (tf * (tf - 1.0));
    }
    Ok(out)
}

/// Largest relative deviation between the analytic Jacobian and central
/// differences of step `epsilon`. Entries are compared on the scale
/// `max(|analytic|, |numeric|, 1e-3 * max |analytic|)` so that entries that
/// vanish analytically do not blow up the ratio.
pub fn finite_diff_check(params: &Params, batch: &Batch, mode: NormMode, epsilon: f64) -> Result<f64> {
    let jac = jacobian_of(params, batch, mode)?;
    let sqrt_t = (batch.len() as f64).sqrt();
    let floor = 1e-3 * jac.r.amax() * sqrt_t;
    let n = params.n_params();
    let errs: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut p = params.clone();
            let base = *p.slot_mut(i);
            *p.slot_mut(i) = base + epsilon;
            let fp = forward(&p, batch, mode)?.output;
            *p.slot_mut(i) = base - epsilon;
            let fm = forward(&p, batch, mode)?.output;
            let num = (fp - fm) / (2.0 * epsilon);
            let mut worst: f64 = 0.0;
            for k in 0..num.nrows() {
                for t in 0..num.ncols() {
                    let ana = jac.r[(i, jac.column_index(k, t))] * sqrt_t;
                    let nv = num[(k, t)];
                    let scale = ana.abs().max(nv.abs()).max(floor);
                    if scale > 0.0 {
                        worst = worst.max((ana - nv).abs() / scale);
                    }
                }
            }
            Ok(worst)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for e in errs {
        worst = worst.max(e?);
    }
    Ok(worst)
}
