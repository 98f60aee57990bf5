use serde::Serialize;

use super::Tensor4D;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    /// `max_i |analytic_i - numeric_i| / max(1e-12, |numeric_i|)`
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Numerical derivative scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// `(4·D(h/2) - D(h)) / 3` over central differences `D`, cancelling the
    /// `h²` term. Lets a wide step resolve small components without the
    /// truncation error of a plain central difference.
    Richardson,
}

/// Compares the gradient reported by `f` at `point` with central differences
/// of step `step` along every coordinate.
pub fn finite_difference_check<F>(f: F, point: &Tensor4D, step: f64) -> Result<FdReport>
where
    F: Fn(&Tensor4D) -> Result<(f64, Tensor4D)>,
{
    finite_difference_check_filtered(f, point, step, FdScheme::Central, |_, _, _| true)
}

/// As [`finite_difference_check`] with a choice of scheme; coordinates for
/// which `include(i, x_plus, x_minus)` is false are skipped. Used to leave
/// out coordinates whose widest stencil straddles a kink.
pub fn finite_difference_check_filtered<F, P>(
    f: F,
    point: &Tensor4D,
    step: f64,
    scheme: FdScheme,
    include: P,
) -> Result<FdReport>
where
    F: Fn(&Tensor4D) -> Result<(f64, Tensor4D)>,
    P: Fn(usize, &Tensor4D, &Tensor4D) -> bool,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {step} must be positive")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(0));
    }
    point.same_shape(&analytic, "reported gradient")?;
    let mut report = FdReport { max_rel_error: 0.0, worst_coordinate: None, checked: 0, skipped: 0 };
    let mut plus = point.clone();
    let mut minus = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        plus.data_mut()[i] = x + step;
        minus.data_mut()[i] = x - step;
        if include(i, &plus, &minus) {
            let numeric = match scheme {
                FdScheme::Central => central(&f, &mut plus, &mut minus, i, x, step)?,
                FdScheme::Richardson => {
                    let wide = central(&f, &mut plus, &mut minus, i, x, step)?;
                    let narrow = central(&f, &mut plus, &mut minus, i, x, step / 2.0)?;
                    (4.0 * narrow - wide) / 3.0
                }
            };
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-12);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_coordinate = Some(i);
            }
            report.checked += 1;
        } else {
            report.skipped += 1;
        }
        plus.data_mut()[i] = x;
        minus.data_mut()[i] = x;
    }
    Ok(report)
}

fn central<F>(f: &F, plus: &mut Tensor4D, minus: &mut Tensor4D, i: usize, x: f64, h: f64) -> Result<f64>
where
    F: Fn(&Tensor4D) -> Result<(f64, Tensor4D)>,
{
    plus.data_mut()[i] = x + h;
    minus.data_mut()[i] = x - h;
    let fp = f(plus)?.0;
    let fm = f(minus)?.0;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite(i));
    }
    Ok((fp - fm) / (2.0 * h))
}
