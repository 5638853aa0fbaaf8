//! Minimal reverse-mode differentiable dense-array engine.
//!
//! Provides exactly the primitives the model and losses need: convolution,
//! the usual elementwise maps, reductions, a grid softmax, gather, and a
//! finite-difference gradient checker. Everything computes in [`Real`]
//! (64-bit by default) and is deterministic: identical inputs produce
//! bit-identical outputs.

mod ops;
mod tape;
mod tensor;

pub use ops::{broadcast_shapes, ConvDims};
pub use tape::{Tape, Var};
pub use tensor::{linear_index, strides, Real, Tensor};

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// One plain SGD update: `p <- p - lr * grad(p)`, then zero the gradients.
/// Every parameter must have a populated gradient.
pub fn sgd_step<'a, I>(params: I, lr: Real) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    for p in params {
        let n = p.numel();
        let grad = p
            .grad()
            .ok_or_else(|| Error::MissingGrad("sgd_step before backward".into()))?;
        debug_assert_eq!(grad.len(), n);
        let grad = grad.to_vec();
        let data = p.data_mut();
        for i in 0..n {
            data[i] -= lr * grad[i];
        }
        p.zero_grad();
    }
    Ok(())
}

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences, returning the maximum relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: Real) -> Result<Real>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, &vars[0]), &[x.clone()], eps)
}

/// [`grad_check`] over several independent inputs at once.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: Real) -> Result<Real>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid("grad_check eps must be positive".into()));
    }

    let analytic: Vec<Vec<Real>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
            .collect::<Result<_>>()?;
        let y = f(&tape, &vars)?;
        tape.backward(&y)?;
        vars.iter()
            .map(|v| tape.grad_of(v).map(|t| t.data().to_vec()))
            .collect::<Result<_>>()?
    };

    let eval = |inputs: &[Tensor]| -> Result<Real> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|x| tape.leaf(x))
            .collect::<Result<_>>()?;
        f(&tape, &vars)?.scalar_value()
    };

    let mut worst: Real = 0.0;
    let mut probe = xs.to_vec();
    for (pi, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let base = x.data()[i];
            probe[pi].data_mut()[i] = base + eps;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[i] = base - eps;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[i] = base;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
