use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Gradients smaller than this are compared absolutely: at such magnitudes a
/// difference quotient is mostly rounding noise.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Step reductions tried when a kink falls inside the stencil.
const REFINEMENTS: [f64; 2] = [0.1, 0.01];

/// Fourth-order central difference at step `h`, with the mismatch between
/// the second-order left and right one-sided differences, which is large when
/// the function is not smooth on `[x - 2h, x + 2h]`.
fn stencil<F>(
    value: &F,
    probe: &mut [Tensor],
    k: usize,
    i: usize,
    f0: f64,
    h: f64,
) -> Result<(f64, f64)>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let x0 = probe[k].data()[i];
    let mut at = |d: f64| {
        probe[k].data_mut()[i] = x0 + d;
        let v = value(probe);
        probe[k].data_mut()[i] = x0;
        v
    };
    let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
    let central = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
    let left = (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * h);
    let right = (-3.0 * f0 + 4.0 * p1 - p2) / (2.0 * h);
    if !central.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference",
            node: i,
        });
    }
    Ok((central, (left - right).abs()))
}

/// Maximum relative disagreement between `analytic` and finite differences of
/// `value` around `inputs`, per coordinate
/// `|analytic − fd| / max(|analytic|, |fd|, GRAD_FLOOR)`.
///
/// `fd` is a fourth-order central difference at step `eps`. Where the one-sided
/// differences show a kink inside that stencil, smaller steps are tried and
/// the one whose sides agree best is used.
pub fn compare_with_finite_differences<F>(
    value: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != inputs.len() {
        return Err(Error::shape("gradcheck", "one gradient per input expected"));
    }
    let f0 = value(inputs)?;
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        if !grad.same_shape(&inputs[k]) {
            return Err(Error::shape("gradcheck", format!("gradient {k} shape")));
        }
        for i in 0..inputs[k].len() {
            let (mut fd, mut kink) = stencil(&value, &mut probe, k, i, f0, eps)?;
            if kink > 1e-3 * fd.abs().max(GRAD_FLOOR) {
                for r in REFINEMENTS {
                    let (c, j) = stencil(&value, &mut probe, k, i, f0, eps * r)?;
                    if j < kink {
                        (fd, kink) = (c, j);
                    }
                }
            }
            let a = grad.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Checks the tape's reverse pass for a scalar function of `inputs`.
///
/// `f` receives a fresh tape and one differentiable leaf per input and must
/// return a scalar node.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
    let value = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    compare_with_finite_differences(value, inputs, &analytic, eps)
}
