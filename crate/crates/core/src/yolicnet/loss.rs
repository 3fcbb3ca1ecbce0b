use crate::nnkernel::{KernelError, Scalar, Tensor};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the logs.
pub const BCE_CLAMP: f64 = 1e-7;

fn check<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<(usize, usize), KernelError> {
    if probs.shape() != targets.shape() {
        return Err(KernelError::Shape(format!(
            "loss: probs {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    probs.dims2()
}

/// Mean binary cross-entropy over all `B * C` outputs.
pub fn bce_loss_value<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<f64, KernelError> {
    let (b, c) = check(probs, targets)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| {
            let p = p.to_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y.to_f64();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / (b * c) as f64)
}

/// Loss and its gradient with respect to the logits, `(p - y) / (C * B)`.
/// `probs` must be the sigmoid of those logits.
pub fn bce_loss<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>), KernelError> {
    let loss = bce_loss_value(probs, targets)?;
    let (b, c) = probs.dims2()?;
    let scale = T::one() / T::from_usize(b * c);
    let grad = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| (p - y) * scale)
        .collect();
    Ok((loss, Tensor::from_vec(&[b, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(bce_loss_value(&y, &y).unwrap() <= 1e-6);
    }

    #[test]
    fn half_against_one_is_ln2() {
        let p = Tensor::<f64>::full(&[1, 1], 0.5);
        let y = Tensor::<f64>::full(&[1, 1], 1.0);
        assert!((bce_loss_value(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_fails() {
        let p = Tensor::<f64>::full(&[2, 3], 0.5);
        let y = Tensor::<f64>::full(&[3, 2], 1.0);
        assert!(bce_loss(&p, &y).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::from_vec(&[2, 12], (0..24).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let y = Tensor::from_vec(&[2, 12], (0..24).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect()).unwrap();
        let (_, g) = bce_loss(&sigmoid(&logits), &y).unwrap();
        let h = 1e-6;
        for i in 0..24 {
            let mut up = logits.clone();
            up.data_mut()[i] += h;
            let mut down = logits.clone();
            down.data_mut()[i] -= h;
            let n = (bce_loss_value(&sigmoid(&up), &y).unwrap() - bce_loss_value(&sigmoid(&down), &y).unwrap())
                / (2.0 * h);
            let a = g.data()[i];
            assert!((a - n).abs() / (a.abs() + n.abs()) < 1e-6, "{a} vs {n}");
        }
    }
}
