//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records primitives as they are evaluated; [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] for every leaf
//! created with [`Tape::leaf`]. Values created with [`Tape::constant`] or
//! [`Tape::detach`] are cut from the graph.
//!
//! ```
//! use apg_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod tape;
mod tensor;

pub use tape::{CustomOp, Gradients, Tape, Var, SQRT_EPS};
pub use tensor::Tensor;

use crate::error::Result;

/// Relative error used by every gradient check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central finite-difference derivative of `f` along one coordinate.
///
/// `order` 2 is the classic `(f(x+h) − f(x−h)) / 2h`; `order` 4 adds the
/// `±2h` points, cutting truncation error to O(h⁴) so a wider `h` can be
/// used where gradients are small relative to the function's roundoff.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], k: usize, h: f64, order: u8) -> Result<f64> {
    let mut at = |delta: f64| {
        let mut p = x.to_vec();
        p[k] += delta;
        f(&p)
    };
    match order {
        2 => Ok((at(h)? - at(-h)?) / (2.0 * h)),
        4 => Ok((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)),
        _ => panic!("unsupported stencil order {order}"),
    }
}

fn grad_check_order<F>(f: F, input: &Tensor, h: f64, order: u8) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(x, input.shape());

    let eval = |v: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(input.rows(), input.cols(), v.to_vec()));
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for k in 0..input.len() {
        let numeric = central_difference(eval, input.data(), k, h, order)?;
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    Ok(worst)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences, one coordinate at a time. Returns the largest
/// [`relative_error`] over all coordinates.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_order(f, input, h, 2)
}

/// [`grad_check`] with the fourth-order central stencil.
pub fn grad_check4<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_order(f, input, h, 4)
}
