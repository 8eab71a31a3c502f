//! Gaussian expectations by quadrature.
//!
//! Two rules live side by side in a [`QuadratureGrid`]:
//!
//! * a Gauss–Hermite rule normalized to the standard normal measure, used for
//!   smooth integrands (`expect1`, `expect2`);
//! * a Gauss–Legendre panel rule of the same order, used on a truncated line
//!   split at the breakpoints of piecewise-smooth integrands such as ReLU
//!   (`expect1_piecewise`, `expect2_piecewise`). A single Hermite rule
//!   converges only algebraically across a kink.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Default node count for both 1-D and tensor 2-D rules.
pub const DEFAULT_ORDER: usize = 101;

/// Half-width of the truncated line used by the panel rule. The standard
/// normal density at 13 is below 1e-36.
const TRUNCATION: f64 = 13.0;

/// Node count of each Gauss-Legendre panel and the widest panel allowed.
/// Activations like tanh have poles about one unit off the real axis, so
/// panels must stay short for geometric convergence.
const PANEL_ORDER: usize = 24;
const MAX_PANEL_WIDTH: f64 = 1.0;

/// Correlations closer than this to +-1 are treated as exactly correlated.
const CORRELATION_SNAP: f64 = 1e-9;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    /// Hermite abscissae, sorted ascending.
    pub nodes: Vec<f64>,
    /// Hermite weights for the standard normal measure; they sum to one.
    pub weights: Vec<f64>,
    pub order: usize,
    panel_nodes: Vec<f64>,
    panel_weights: Vec<f64>,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        build_grid(DEFAULT_ORDER).expect("default order is valid")
    }
}

pub fn build_grid(order: usize) -> Result<QuadratureGrid> {
    if order < 2 {
        return Err(Error::InvalidArgument(format!(
            "quadrature order must be at least 2, got {order}"
        )));
    }
    let (nodes, weights) = hermite_rule(order)?;
    let (panel_nodes, panel_weights) = legendre_rule(PANEL_ORDER);
    Ok(QuadratureGrid {
        nodes,
        weights,
        order,
        panel_nodes,
        panel_weights,
    })
}

/// Orthonormal probabilists' Hermite polynomials p_0..p_{n} at `x`.
/// Returns (p_{n-1}, p_n, sum_{k<n} p_k^2).
fn hermite_eval(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur, sumsq)
}

fn hermite_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    // Golub-Welsch eigenvalues as starting points, then Newton polish on the
    // three-term recurrence; weights from the Christoffel function.
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guesses.sort_by(|a, b| a.total_cmp(b));

    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &x0 in &guesses {
        let mut x = x0;
        for _ in 0..100 {
            let (pm1, pn, _) = hermite_eval(n, x);
            let dp = (n as f64).sqrt() * pm1;
            let step = pn / dp;
            x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, _, sumsq) = hermite_eval(n, x);
        if !x.is_finite() || !sumsq.is_finite() || sumsq <= 0.0 {
            return Err(Error::Numerical(format!(
                "Gauss-Hermite construction failed at order {n}"
            )));
        }
        nodes.push(x);
        weights.push(1.0 / sumsq);
    }

    // exact mirror symmetry
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((nodes, weights))
}

fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let step = pn / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn check_variance(q: f64) -> Result<()> {
    if q > 0.0 && q.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("variance must be positive, got {q}")))
    }
}

/// `E[f(sqrt(q) u)]` for standard normal `u`, by the Hermite rule.
pub fn expect1<F: Fn(f64) -> f64>(f: F, q: f64, grid: &QuadratureGrid) -> Result<f64> {
    check_variance(q)?;
    let s = q.sqrt();
    Ok(mirrored_sum(grid, |x| f(s * x)))
}

/// Hermite sum taken over mirrored node pairs so odd integrands cancel
/// exactly.
fn mirrored_sum<F: Fn(f64) -> f64>(grid: &QuadratureGrid, f: F) -> f64 {
    let n = grid.order;
    let mut total = 0.0;
    for i in 0..n / 2 {
        let x = grid.nodes[n - 1 - i];
        total += grid.weights[i] * (f(x) + f(-x));
    }
    if n % 2 == 1 {
        total += grid.weights[n / 2] * f(0.0);
    }
    total
}

/// Integral of `g(u) * density(u)` over the truncated line split at `cuts`.
fn panel_integral<G: Fn(f64) -> f64>(g: G, cuts: &mut Vec<f64>, grid: &QuadratureGrid) -> f64 {
    cuts.retain(|c| c.is_finite() && c.abs() < TRUNCATION);
    cuts.push(-TRUNCATION);
    cuts.push(TRUNCATION);
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut total = 0.0;
    for win in cuts.windows(2) {
        let pieces = ((win[1] - win[0]) / MAX_PANEL_WIDTH).ceil().max(1.0) as usize;
        let width = (win[1] - win[0]) / pieces as f64;
        for p in 0..pieces {
            let a = win[0] + p as f64 * width;
            let half = 0.5 * width;
            let mid = a + half;
            let mut piece = 0.0;
            for (&x, &w) in grid.panel_nodes.iter().zip(&grid.panel_weights) {
                let u = mid + half * x;
                piece += w * (-0.5 * u * u).exp() * g(u);
            }
            total += half * piece;
        }
    }
    total * INV_SQRT_2PI
}

/// `E[f(sqrt(q) u)]` for an integrand that is smooth except at `breaks`.
pub fn expect1_piecewise<F: Fn(f64) -> f64>(
    f: F,
    breaks: &[f64],
    q: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    check_variance(q)?;
    let s = q.sqrt();
    let mut cuts: Vec<f64> = breaks.iter().map(|b| b / s).collect();
    Ok(panel_integral(|u| f(s * u), &mut cuts, grid))
}

fn correlation(a: f64, b: f64) -> Result<f64> {
    check_variance(a)?;
    if !b.is_finite() || b.abs() > a * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "covariance {b} exceeds variance {a} in magnitude"
        )));
    }
    Ok((b / a).clamp(-1.0, 1.0))
}

/// Two-point expectation `E[f(sqrt(a) x) g(sqrt(a)(c x + sqrt(1-c^2) y))]`
/// with `c = b / a`, by the tensor Hermite rule.
pub fn expect2<F, G>(f: F, g: G, a: f64, b: f64, grid: &QuadratureGrid) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let c = correlation(a, b)?;
    if c > 1.0 - CORRELATION_SNAP {
        return expect1(|u| f(u) * g(u), a, grid);
    }
    if c < -1.0 + CORRELATION_SNAP {
        return expect1(|u| f(u) * g(-u), a, grid);
    }
    let sa = a.sqrt();
    let s = (1.0 - c * c).sqrt();
    let mut total = 0.0;
    for (&x, &wx) in grid.nodes.iter().zip(&grid.weights) {
        let fx = f(sa * x);
        if fx == 0.0 {
            continue;
        }
        let inner = mirrored_sum(grid, |y| g(sa * (c * x + s * y)));
        total += wx * fx * inner;
    }
    Ok(total)
}

/// Breakpoint-aware version of [`expect2`]. `f_breaks` and `g_breaks` are
/// the non-smooth points of `f` and `g` in their own argument.
pub fn expect2_piecewise<F, G>(
    f: F,
    f_breaks: &[f64],
    g: G,
    g_breaks: &[f64],
    a: f64,
    b: f64,
    grid: &QuadratureGrid,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let c = correlation(a, b)?;
    let mut joint: Vec<f64> = f_breaks.to_vec();
    if c > 1.0 - CORRELATION_SNAP {
        joint.extend_from_slice(g_breaks);
        return expect1_piecewise(|u| f(u) * g(u), &joint, a, grid);
    }
    if c < -1.0 + CORRELATION_SNAP {
        joint.extend(g_breaks.iter().map(|v| -v));
        return expect1_piecewise(|u| f(u) * g(-u), &joint, a, grid);
    }
    let sa = a.sqrt();
    let s = (1.0 - c * c).sqrt();
    let mut outer_cuts: Vec<f64> = f_breaks.iter().map(|v| v / sa).collect();
    Ok(panel_integral(
        |x| {
            let fx = f(sa * x);
            if fx == 0.0 {
                return 0.0;
            }
            let mut inner_cuts: Vec<f64> =
                g_breaks.iter().map(|v| (v / sa - c * x) / s).collect();
            fx * panel_integral(|y| g(sa * (c * x + s * y)), &mut inner_cuts, grid)
        },
        &mut outer_cuts,
        grid,
    ))
}
