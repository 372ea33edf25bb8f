//! Central finite-difference verification of tape gradients.
//!
//! Runs in double precision by construction; single-precision finite
//! differences are too noisy to verify anything.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error of `analytic` against the central difference of `f` at
/// `x`, maximized over the given coordinate indices:
/// `|analytic - fd| / max(1, |analytic|)`.
pub fn max_rel_error_vs_fd(
    analytic: &[f64],
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
    coords: &[usize],
) -> f64 {
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let x0 = buf[i];
        buf[i] = x0 + step;
        let fp = f(&buf);
        buf[i] = x0 - step;
        let fm = f(&buf);
        buf[i] = x0;
        let fd = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Check the tape gradient of a scalar-valued tensor function against
/// central differences over every coordinate of `x`. Returns the max
/// relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let loss = f(&mut tape, xv)?;
        let grads = tape.backward(loss)?;
        grads.get_or_zeros(xv, x.shape()).into_data()
    };

    let shape = x.shape().to_vec();
    let mut eval = |data: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(shape.clone(), data.to_vec()).expect("shape"), false);
        let loss = f(&mut tape, xv).expect("forward eval in finite differences");
        tape.value(loss).item().expect("scalar loss")
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    Ok(max_rel_error_vs_fd(&analytic, &mut eval, x.data(), step, &coords))
}
