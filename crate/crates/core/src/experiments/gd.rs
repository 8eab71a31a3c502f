use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::meanfield::{NetSpec, NormMode};
use crate::netlab::{forward, init_params, loss_and_grad, Batch, Params};

/// Loss trajectory of one full-batch gradient-descent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `E(theta)` before each step, plus the loss after the last step.
    pub losses: Vec<f64>,
    /// Set when the loss crossed the threshold or stopped being finite.
    pub diverged: bool,
    pub steps_run: usize,
}

impl Trajectory {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

/// Run `steps` of `theta <- theta - eta grad E`. A loss above `threshold` or
/// a non-finite loss ends the run early; that is reported, not raised.
pub fn gd_train(
    params: &mut Params,
    batch: &Batch,
    labels: &DMatrix<f64>,
    mode: NormMode,
    eta: f64,
    steps: usize,
    threshold: f64,
) -> Result<Trajectory> {
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = match loss_and_grad(params, batch, labels, mode) {
            Ok(v) => v,
            // a blown-up network can collapse a normalization variance
            Err(e) if step > 0 && is_numeric(&e) => {
                losses.push(f64::INFINITY);
                return Ok(Trajectory {
                    losses,
                    diverged: true,
                    steps_run: step,
                });
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        if !loss.is_finite() || loss > threshold {
            return Ok(Trajectory {
                losses,
                diverged: true,
                steps_run: step,
            });
        }
        if eta == 0.0 {
            continue;
        }
        for (l, (dw, db)) in grads.into_iter().enumerate() {
            params.weights[l].zip_apply(&dw, |w, d| *w -= eta * d);
            params.biases[l].axpy(-eta, &db, 1.0);
        }
    }
    let last = match crate::netlab::loss(params, batch, labels, mode) {
        Ok(v) => v,
        Err(e) if is_numeric(&e) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    losses.push(last);
    let diverged = !last.is_finite() || last > threshold;
    Ok(Trajectory {
        losses,
        diverged,
        steps_run: steps,
    })
}

fn is_numeric(e: &crate::Error) -> bool {
    matches!(
        e,
        crate::Error::DegenerateNormalization { .. } | crate::Error::Numerical(_)
    )
}

/// Outputs of an independently drawn teacher of the same architecture on
/// `batch`.
pub fn make_teacher_labels(
    spec: &NetSpec,
    m: usize,
    batch: &Batch,
    teacher_seed: u64,
) -> Result<DMatrix<f64>> {
    let teacher = init_params(spec, m, teacher_seed)?;
    Ok(forward(&teacher, batch, spec.norm_mode)?.output)
}
