//! Central finite-difference oracle for tape gradients.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::tape::{reverse_grad, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − central| / (|central| + 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` receives a tape and one node per entry of `params` and must return a
/// scalar node. Anything else it needs (frozen weights, data) is captured by
/// the closure and enters the tape as constants.
pub fn finite_diff_check<T, F>(f: F, params: &IndexMap<String, Tensor<T>>, epsilon: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &IndexMap<String, NodeId>) -> Result<NodeId>,
{
    let eval = |values: &IndexMap<String, Tensor<T>>, grads: bool| -> Result<(f64, Option<crate::tape::Gradients<T>>)> {
        let mut tape = Tape::new();
        let mut nodes = IndexMap::new();
        for (name, v) in values {
            nodes.insert(name.clone(), tape.param(name, Arc::new(v.clone()))?);
        }
        let out = f(&mut tape, &nodes)?;
        let value = tape.value(out).data().first().copied().map(Scalar::to_f64).unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(LabError::Input(format!("objective returned non-finite value {value}")));
        }
        let g = if grads { Some(reverse_grad(&tape, out)?) } else { None };
        Ok((value, g))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("requested gradients");

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    let mut probe = params.clone();
    for (name, base) in params {
        let grad = analytic.get(name).ok_or_else(|| LabError::Internal(format!("no gradient for {name}")))?;
        for i in 0..base.numel() {
            let x0 = base.data()[i];
            probe[name].data_mut()[i] = T::from_f64(x0.to_f64() + epsilon);
            let (plus, _) = eval(&probe, false)?;
            probe[name].data_mut()[i] = T::from_f64(x0.to_f64() - epsilon);
            let (minus, _) = eval(&probe, false)?;
            probe[name].data_mut()[i] = x0;

            let central = (plus - minus) / (2.0 * epsilon);
            let err = (grad.data()[i].to_f64() - central).abs() / (central.abs() + 1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
