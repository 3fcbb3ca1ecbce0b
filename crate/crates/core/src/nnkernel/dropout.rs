use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{shape_err, KernelError, Scalar, Tensor};

/// Counter-based key for a dropout mask: the same key always yields the same mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u32,
    pub step: u64,
}

impl DropoutKey {
    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((self.layer as u64) << 40) ^ self.step);
        rng
    }
}

/// Inverted dropout. At train time keeps each element with probability
/// `1 - rate` and scales survivors by `1 / (1 - rate)`; identity otherwise.
/// Returns the output and the per-element multiplier used (for backward).
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    key: DropoutKey,
    train: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>), KernelError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(shape_err(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = key.rng();
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        for (v, &m) in g.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
    g
}
