//! Per-batch task coefficients: fixed, gradient-balanced and loss-balanced.
//!
//! The balanced strategies give each task `w_t = 1 − v_t / Σ v`, where `v_t`
//! is the task's loss (loss-balanced) or the L2 norm of its gradient at a
//! shared reference layer (gradient-balanced). A task that dominates the
//! batch is turned down; weights are plain numbers and never carry gradient.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{Task, TaskLosses};
use crate::tensor::Scalar;

/// Below this denominator the balanced strategies fall back to unit weights.
pub const DEGENERATE_TOTAL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Fixed,
    GradientBalanced,
    LossBalanced,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::GradientBalanced => "gb",
            Strategy::LossBalanced => "lb",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Strategy::Fixed),
            "gb" => Ok(Strategy::GradientBalanced),
            "lb" => Ok(Strategy::LossBalanced),
            other => Err(Error::Config(format!(
                "unknown weighting `{other}` (expected fixed, gb or lb)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    weights: [f64; 3],
    strategy: Strategy,
    reference_layer: Option<String>,
}

impl TaskWeights {
    pub fn weight(&self, task: Task) -> f64 {
        self.weights[task.index()]
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.weights
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn reference_layer(&self) -> Option<&str> {
        self.reference_layer.as_deref()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self
            .weights
            .iter()
            .find(|w| !(**w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config(format!(
                "task weight {w} must be finite and non-negative"
            )));
        }
        Ok(())
    }
}

/// Constant coefficients `(w_p, w_e, w_t)`.
pub fn fixed_weights(w: [f64; 3]) -> Result<TaskWeights> {
    let weights = TaskWeights {
        weights: w,
        strategy: Strategy::Fixed,
        reference_layer: None,
    };
    weights.validate()?;
    Ok(weights)
}

/// `w_t = 1 − v_t / Σ v` for non-negative `values`.
///
/// The last weight is taken as `(T − 1) − Σ_{t<T} w_t` so the weights sum to
/// `T − 1` exactly in floating point; it differs from the direct formula by at
/// most one rounding. A single task, or a total below [`DEGENERATE_TOTAL`],
/// gets unit weights.
pub fn balance(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if values.len() < 2 || !(total >= DEGENERATE_TOTAL) {
        return vec![1.0; values.len()];
    }
    let t = values.len();
    let mut out: Vec<f64> = values[..t - 1].iter().map(|v| 1.0 - v / total).collect();
    let partial: f64 = out.iter().sum();
    out.push(((t - 1) as f64 - partial).clamp(0.0, 1.0));
    out
}

fn balanced(
    values: &TaskLosses<f64>,
    strategy: Strategy,
    reference_layer: Option<String>,
) -> TaskWeights {
    let (tasks, v): (Vec<Task>, Vec<f64>) = values.iter().unzip();
    let mut weights = [0.0; 3];
    for (task, w) in tasks.into_iter().zip(balance(&v)) {
        weights[task.index()] = w;
    }
    TaskWeights {
        weights,
        strategy,
        reference_layer,
    }
}

/// Loss-balanced weights from the current batch losses.
pub fn lb_weights(losses: &TaskLosses<f64>) -> TaskWeights {
    balanced(losses, Strategy::LossBalanced, None)
}

/// Gradient-balanced weights from per-task gradient norms at `reference_layer`.
pub fn gb_weights(norms: &TaskLosses<f64>, reference_layer: &str) -> TaskWeights {
    balanced(
        norms,
        Strategy::GradientBalanced,
        Some(reference_layer.to_string()),
    )
}

/// L2 norm of `∂L_t/∂θ_ref` for every enabled task, one backward sweep each.
pub fn task_gradient_norms<T: Scalar>(
    tape: &Tape<T>,
    losses: &TaskLosses<Var>,
    reference: Var,
) -> Result<TaskLosses<f64>> {
    losses.try_map(|_, l| {
        let grads = tape.backward_wrt(l, &[reference])?;
        Ok(grads.get(reference).map_or(0.0, |g| g.sum_sq_f64().sqrt()))
    })
}
