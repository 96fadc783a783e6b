//! Central finite-difference gradient checking.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Binds every entry of `point` as a parameter on `tape`.
pub fn bind_point(tape: &mut Tape, point: &BTreeMap<String, Tensor>) -> BTreeMap<String, NodeId> {
    point
        .iter()
        .map(|(name, value)| (name.clone(), tape.parameter(name, value.clone())))
        .collect()
}

/// Evaluates the scalar function built by `f` at `point`.
pub fn evaluate<F>(f: &F, point: &BTreeMap<String, Tensor>) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let vars = bind_point(&mut tape, point);
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(tape.value(out).shape().into()))
}

/// Maximum over coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`,
/// with the analytic gradient taken from the tape.
pub fn gradient_check<F>(f: F, point: &BTreeMap<String, Tensor>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let vars = bind_point(&mut tape, point);
    let out = f(&mut tape, &vars)?;
    let analytic = tape.backprop(out)?;
    compare_gradients(|p| evaluate(&f, p), &analytic, point, epsilon)
}

/// Same error measure as [`gradient_check`] for an externally supplied gradient.
pub fn compare_gradients<V>(
    value: V,
    analytic: &BTreeMap<String, Tensor>,
    point: &BTreeMap<String, Tensor>,
    epsilon: f64,
) -> Result<f64>
where
    V: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument {
            op: "gradient_check",
            reason: "epsilon must be positive".into(),
        });
    }
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for (name, base) in point {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        for i in 0..base.len() {
            let x = base.data()[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("same keys").data_mut()[i] = v;
                let y = value(&probe)?;
                if !y.is_finite() {
                    return Err(Error::NonFiniteProbe {
                        name: name.clone(),
                        index: i,
                    });
                }
                Ok(y)
            };
            let plus = at(x + epsilon)?;
            let minus = at(x - epsilon)?;
            at(x)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let err = libm::fabs(a - numeric) / f64::max(1e-8, libm::fabs(a) + libm::fabs(numeric));
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
