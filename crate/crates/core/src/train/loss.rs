//! Per-sample training losses.

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};
use crate::model::Task;
use crate::ops;
use crate::tape::Var;

pub fn check_label(label: f64, task: Task) -> Result<()> {
    if !label.is_finite() {
        return Err(Error::Data(format!("label {label} is not finite")));
    }
    if task == Task::Classification && label != 0.0 && label != 1.0 {
        return Err(Error::Data(format!("classification label {label} is not 0 or 1")));
    }
    Ok(())
}

/// Squared error for regression, logistic loss on the logit for
/// classification.
pub fn loss(pred: f64, label: f64, task: Task) -> Result<f64> {
    check_label(label, task)?;
    Ok(match task {
        Task::Regression => (pred - label) * (pred - label),
        Task::Classification => ops::logistic_loss(pred, label),
    })
}

/// Differentiable counterpart of [`loss`] on a 1×1 prediction node.
pub fn loss_node<'t, T: Scalar>(pred: Var<'t, T>, label: f64, task: Task) -> Result<Var<'t, T>> {
    check_label(label, task)?;
    if pred.shape() != (1, 1) {
        return Err(Error::shape("loss", pred.shape(), (1, 1)));
    }
    match task {
        Task::Regression => {
            let r = pred.shift(T::of(-label));
            r.mul(r)
        }
        Task::Classification => pred.logistic_loss(FeatureMatrix::filled(1, 1, T::of(label))),
    }
}
