use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::NetSpec;
use crate::rng::{self, Purpose};

/// Layer widths `M_0..=M_L` for base width `m`. Ratios that do not give an
/// integer width are rounded to the nearest width of at least 1; the second
/// value reports whether that happened.
pub fn layer_widths(spec: &NetSpec, m: usize) -> Result<(Vec<usize>, bool)> {
    if m == 0 {
        return Err(Error::InvalidArgument("width M must be at least 1".into()));
    }
    let mut rounded = false;
    let mut widths = Vec::with_capacity(spec.depth + 1);
    for l in 0..spec.depth {
        let exact = spec.ratio(l) * m as f64;
        let w = (exact.round() as usize).max(1);
        if (w as f64 - exact).abs() > 1e-9 {
            rounded = true;
        }
        widths.push(w);
    }
    widths.push(spec.outputs);
    Ok((widths, rounded))
}

/// Weights and biases of one random network. `weights[l - 1]` is `W^l` with
/// shape `M_l x M_{l-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub spec: NetSpec,
    pub widths: Vec<usize>,
    pub widths_rounded: bool,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// Output scales of the last-layer batch norm; 1 unless changed by hand.
    pub gamma: Vec<f64>,
    /// Added to every normalization variance before the square root.
    pub norm_eps: f64,
    pub seed: u64,
}

/// Draw a network from the Gaussian ensemble of `spec` at base width `m`.
pub fn init_params(spec: &NetSpec, m: usize, seed: u64) -> Result<Params> {
    spec.validate()?;
    let (widths, widths_rounded) = layer_widths(spec, m)?;
    let mut weights = Vec::with_capacity(spec.depth);
    let mut biases = Vec::with_capacity(spec.depth);
    let sb = spec.sigma_b2.sqrt();
    for l in 1..=spec.depth {
        let (rows, cols) = (widths[l], widths[l - 1]);
        let sd = (spec.sigma_w2 / cols as f64).sqrt();
        let mut r = rng::stream(seed, Purpose::Weights, l as u64);
        // row-major draw order, matching the flat parameter layout
        let mut w = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let z: f64 = StandardNormal.sample(&mut r);
                w[(i, j)] = sd * z;
            }
        }
        let b = if sb == 0.0 {
            DVector::zeros(rows)
        } else {
            let mut r = rng::stream(seed, Purpose::Biases, l as u64);
            DVector::from_fn(rows, |_, _| {
                let z: f64 = StandardNormal.sample(&mut r);
                sb * z
            })
        };
        weights.push(w);
        biases.push(b);
    }
    Ok(Params {
        spec: spec.clone(),
        gamma: vec![1.0; spec.outputs],
        widths,
        widths_rounded,
        weights,
        biases,
        norm_eps: 0.0,
        seed,
    })
}

impl Params {
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Total parameter count `P`.
    pub fn n_params(&self) -> usize {
        (1..self.widths.len())
            .map(|l| self.widths[l] * self.widths[l - 1] + self.widths[l])
            .sum()
    }

    /// Offset of the first entry of `W^l` in the flat layout.
    pub fn layer_offset(&self, l: usize) -> usize {
        (1..l)
            .map(|k| self.widths[k] * self.widths[k - 1] + self.widths[k])
            .sum()
    }

    /// Flat layout: for each layer, `W^l` row-major followed by `b^l`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            push_row_major(&mut out, w);
            out.extend(b.iter());
        }
        out
    }

    pub fn slot_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in 0..self.weights.len() {
            let (rows, cols) = self.weights[l].shape();
            if idx < rows * cols {
                return &mut self.weights[l][(idx / cols, idx % cols)];
            }
            idx -= rows * cols;
            if idx < rows {
                return &mut self.biases[l][idx];
            }
            idx -= rows;
        }
        panic!("parameter index out of range");
    }
}

pub(crate) fn push_row_major(out: &mut Vec<f64>, w: &DMatrix<f64>) {
    for i in 0..w.nrows() {
        out.extend(w.row(i).iter());
    }
}

/// Input samples stored column-wise: `x` is `M_0 x T`, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub seed: u64,
}

impl Batch {
    pub fn gaussian(m0: usize, t: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, Purpose::Inputs, 0);
        let mut x = DMatrix::zeros(m0, t);
        for s in 0..t {
            for i in 0..m0 {
                x[(i, s)] = StandardNormal.sample(&mut r);
            }
        }
        Batch { x, seed }
    }

    pub fn for_params(params: &Params, t: usize, seed: u64) -> Self {
        Self::gaussian(params.widths[0], t, seed)
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// Summary of a sample, used to report the empirical variance of a weight or
/// input draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

pub fn moments<'a>(xs: impl IntoIterator<Item = &'a f64>) -> SampleMoments {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for &x in xs {
        n += 1;
        s += x;
        s2 += x * x;
    }
    let mean = s / n as f64;
    SampleMoments {
        mean,
        variance: s2 / n as f64 - mean * mean,
        count: n,
    }
}
