//! Central finite-difference gradient checks in double precision.

use super::param::Module;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn finite_scalar(v: f64) -> Result<f64, TensorError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite {
            op: "grad_check",
            node: 0,
        })
    }
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let eval = |p: &Tensor<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let y = f(tape.leaf(p.clone()))?;
        tape.check_finite()?;
        finite_scalar(y.item())
    };
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(x)?;
    tape.check_finite()?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check of a scalar loss with respect to every parameter of a
/// module. `max_coords` limits the check to an evenly strided subset.
pub fn grad_check_module<M, F>(
    model: &mut M,
    loss: F,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64, TensorError>
where
    M: Module<f64>,
    F: for<'t> Fn(&M, &'t Tape<f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let analytic: Vec<f64> = {
        let tape = Tape::new();
        let y = loss(model, &tape)?;
        tape.check_finite()?;
        let grads = tape.backward(y)?;
        let mut flat = Vec::new();
        model.visit("", &mut |_, p| match grads.param(p) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(p.value.len())),
        });
        flat
    };
    let total = analytic.len();
    let stride = match max_coords {
        Some(m) if m > 0 && m < total => total.div_ceil(m),
        _ => 1,
    };
    let eval = |model: &M| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let y = loss(model, &tape)?;
        tape.check_finite()?;
        finite_scalar(y.item())
    };
    let mut worst = 0.0f64;
    for coord in (0..total).step_by(stride) {
        let original = set_coord(model, coord, None);
        set_coord(model, coord, Some(original + eps));
        let up = eval(model)?;
        set_coord(model, coord, Some(original - eps));
        let down = eval(model)?;
        set_coord(model, coord, Some(original));
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[coord], numeric));
    }
    Ok(worst)
}

/// Read the flat coordinate and optionally overwrite it; returns the old value.
fn set_coord<M: Module<f64>>(model: &mut M, coord: usize, value: Option<f64>) -> f64 {
    let mut offset = 0;
    let mut old = f64::NAN;
    model.visit_mut("", &mut |_, p| {
        let n = p.value.len();
        if coord >= offset && coord < offset + n {
            let slot = &mut p.value.data_mut()[coord - offset];
            old = *slot;
            if let Some(v) = value {
                *slot = v;
            }
        }
        offset += n;
    });
    old
}
