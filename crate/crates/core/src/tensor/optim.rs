use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Plain SGD: `w -= lr * grad`, then clears the gradient. Tensors without a
/// gradient accumulator are left untouched.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) {
    for p in params {
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (w, g) in p.data_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        p.zero_grad();
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Applies inverted dropout while training; identity otherwise. A zero rate
/// records nothing and draws nothing from `rng`.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), rate, rng)?;
    tape.mul_const(x, mask)
}
