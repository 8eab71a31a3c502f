use nalgebra::DMatrix;

use super::params::{Batch, Params};
use crate::error::{Error, Result};
use crate::meanfield::{Activation, NormMode};

/// Mean and standard deviation of one normalized layer: per unit for batch
/// norm, per sample for layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Everything the backward pass needs. Layer `l` lives at index `l - 1` of
/// `pre`, `normed` and `stats`; `acts[l]` is `h^l` with `acts[0]` the input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: NormMode,
    pub pre: Vec<DMatrix<f64>>,
    /// Standardized pre-activations. For the last layer under mean
    /// subtraction this holds the centered readout `u - mu`.
    pub normed: Vec<Option<DMatrix<f64>>>,
    pub stats: Vec<Option<NormStats>>,
    pub acts: Vec<DMatrix<f64>>,
    /// `C x T` outputs `f_k(t)`.
    pub output: DMatrix<f64>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn batch_size(&self) -> usize {
        self.output.ncols()
    }

    /// Activation used by hidden layer `l`, evaluated at the matrix the
    /// activation consumed.
    pub fn act_input(&self, l: usize) -> &DMatrix<f64> {
        self.normed[l - 1].as_ref().unwrap_or(&self.pre[l - 1])
    }

    /// `(1/M_l) sum_i h_i(t)^2` averaged over samples, and the same for
    /// distinct sample pairs.
    pub fn activity(&self, l: usize) -> (f64, f64) {
        let h = &self.acts[l];
        let (m, t) = (h.nrows() as f64, h.ncols() as f64);
        let g = h.transpose() * h;
        let diag: f64 = g.diagonal().sum();
        let off = g.sum() - diag;
        (diag / (m * t), off / (m * t * (t - 1.0)))
    }

    /// Centered readout `u^L_k(t) - mu_k` (batch mean over samples).
    pub fn centered_readout(&self) -> DMatrix<f64> {
        let u = &self.pre[self.depth() - 1];
        let mut out = u.clone();
        for mut row in out.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        out
    }
}

fn map_act(act: Activation, u: &DMatrix<f64>) -> DMatrix<f64> {
    u.map(|x| act.eval(x))
}

/// Standardize each row over its columns (batch norm).
fn standardize_rows(u: &DMatrix<f64>, eps: f64, layer: usize) -> Result<(DMatrix<f64>, NormStats)> {
    let (rows, cols) = u.shape();
    let mut out = DMatrix::zeros(rows, cols);
    let mut mean = Vec::with_capacity(rows);
    let mut sd = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = u.row(i);
        let mu = row.mean();
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let s = (var + eps).sqrt();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateNormalization { layer, index: i });
        }
        for j in 0..cols {
            out[(i, j)] = (u[(i, j)] - mu) / s;
        }
        mean.push(mu);
        sd.push(s);
    }
    Ok((out, NormStats { mean, sd }))
}

/// Standardize each column over its rows (layer norm).
fn standardize_cols(u: &DMatrix<f64>, eps: f64, layer: usize) -> Result<(DMatrix<f64>, NormStats)> {
    let (rows, cols) = u.shape();
    let mut out = DMatrix::zeros(rows, cols);
    let mut mean = Vec::with_capacity(cols);
    let mut sd = Vec::with_capacity(cols);
    for j in 0..cols {
        let col = u.column(j);
        let mu = col.mean();
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows as f64;
        let s = (var + eps).sqrt();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateNormalization { layer, index: j });
        }
        for i in 0..rows {
            out[(i, j)] = (u[(i, j)] - mu) / s;
        }
        mean.push(mu);
        sd.push(s);
    }
    Ok((out, NormStats { mean, sd }))
}

fn affine(params: &Params, l: usize, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut u = &params.weights[l - 1] * h;
    let b = &params.biases[l - 1];
    for mut col in u.column_iter_mut() {
        col += b;
    }
    u
}

/// Forward pass of `params` on `batch` under `mode`.
pub fn forward(params: &Params, batch: &Batch, mode: NormMode) -> Result<ForwardTrace> {
    let depth = params.depth();
    let t = batch.len();
    if batch.x.nrows() != params.widths[0] {
        return Err(Error::InvalidArgument(format!(
            "input width {} does not match network width {}",
            batch.x.nrows(),
            params.widths[0]
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch_norm = matches!(
        mode,
        NormMode::BnMiddle | NormMode::BnLastMeansub | NormMode::BnLastFull
    );
    if batch_norm && t < 2 {
        return Err(Error::InvalidArgument("batch norm needs at least two samples".into()));
    }
    if mode == NormMode::Layernorm && params.widths[1..].iter().any(|&w| w < 2) {
        return Err(Error::InvalidArgument("layer norm needs at least two units per layer".into()));
    }
    let eps = params.norm_eps;
    let mut pre = Vec::with_capacity(depth);
    let mut normed = Vec::with_capacity(depth);
    let mut stats = Vec::with_capacity(depth);
    let mut acts = Vec::with_capacity(depth);
    acts.push(batch.x.clone());
    for l in 1..depth {
        let u = affine(params, l, &acts[l - 1]);
        let act = params.spec.activations[l - 1];
        let (n, s) = match mode {
            NormMode::BnMiddle => {
                let (n, s) = standardize_rows(&u, eps, l)?;
                (Some(n), Some(s))
            }
            NormMode::Layernorm => {
                let (n, s) = standardize_cols(&u, eps, l)?;
                (Some(n), Some(s))
            }
            _ => (None, None),
        };
        let h = map_act(act, n.as_ref().unwrap_or(&u));
        pre.push(u);
        normed.push(n);
        stats.push(s);
        acts.push(h);
    }
    let u = affine(params, depth, &acts[depth - 1]);
    let (output, n, s) = match mode {
        NormMode::None | NormMode::BnMiddle => (u.clone(), None, None),
        NormMode::BnLastMeansub => {
            let mut c = u.clone();
            let mut mean = Vec::with_capacity(c.nrows());
            let mut sd = Vec::with_capacity(c.nrows());
            for mut row in c.row_iter_mut() {
                let mu = row.mean();
                row.add_scalar_mut(-mu);
                mean.push(mu);
                sd.push((row.norm_squared() / t as f64).sqrt());
            }
            let mut f = c.clone();
            for (k, mut row) in f.row_iter_mut().enumerate() {
                row *= params.gamma[k];
            }
            (f, Some(c), Some(NormStats { mean, sd }))
        }
        NormMode::BnLastFull => {
            let (n, s) = standardize_rows(&u, eps, depth)?;
            let mut f = n.clone();
            for (k, mut row) in f.row_iter_mut().enumerate() {
                row *= params.gamma[k];
            }
            (f, Some(n), Some(s))
        }
        NormMode::Layernorm => {
            let (n, s) = standardize_cols(&u, eps, depth)?;
            (n.clone(), Some(n), Some(s))
        }
    };
    pre.push(u);
    normed.push(n);
    stats.push(s);
    Ok(ForwardTrace {
        mode,
        pre,
        normed,
        stats,
        acts,
        output,
    })
}

/// Outputs only, for callers that do not need the trace.
pub fn outputs(params: &Params, batch: &Batch, mode: NormMode) -> Result<DMatrix<f64>> {
    forward(params, batch, mode).map(|tr| tr.output)
}
