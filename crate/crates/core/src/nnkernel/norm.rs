use super::{check_finite, shape_err, KernelError, KernelGrad, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// What the backward pass of a training-mode batch norm needs.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

fn check_params<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize), KernelError> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(format!(
            "batchnorm: {c} channels but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok((n, c, h * w))
}

/// Training-mode batch normalization over `(N, H, W)` per channel.
///
/// Normalizes with the biased batch variance and folds the unbiased variance
/// into the running estimate with momentum [`BN_MOMENTUM`].
pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> Result<(Tensor<T>, BnCache<T>), KernelError> {
    let (n, c, plane) = check_params(x, gamma, beta)?;
    let count = n * plane;
    if count == 0 {
        return Err(KernelError::EmptyBatch);
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(shape_err("batchnorm: running stats length mismatch"));
    }
    let eps = T::from_f64(BN_EPS);
    let mom = T::from_f64(BN_MOMENTUM);
    let cnt = T::from_usize(count);
    let mut out = Tensor::zeros(x.shape());
    let mut x_hat = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    let xd = x.data();
    for ch in 0..c {
        let mut sum = T::zero();
        for b in 0..n {
            let s = (b * c + ch) * plane;
            sum += xd[s..s + plane].iter().copied().sum::<T>();
        }
        let mean = sum / cnt;
        let mut sq = T::zero();
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for &v in &xd[s..s + plane] {
                sq += (v - mean) * (v - mean);
            }
        }
        let var = sq / cnt;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                let xh = (xd[i] - mean) * istd;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
        let unbiased = if count > 1 {
            sq / T::from_usize(count - 1)
        } else {
            var
        };
        running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean;
        running_var[ch] = (T::one() - mom) * running_var[ch] + mom * unbiased;
    }
    check_finite(&out, "batchnorm2d_train");
    Ok((out, BnCache { x_hat, inv_std }))
}

/// Inference-mode batch normalization using running statistics.
pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>, KernelError> {
    let (n, c, plane) = check_params(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(shape_err("batchnorm: running stats length mismatch"));
    }
    let eps = T::from_f64(BN_EPS);
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                out.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    check_finite(&out, "batchnorm2d_eval");
    Ok(out)
}

/// Backward of [`batchnorm2d_train`]; `grad_params` is `[gamma, beta]`.
pub fn batchnorm2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> Result<KernelGrad<T>, KernelError> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(shape_err("batchnorm backward: gradient shape mismatch"));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let cnt = T::from_usize(n * plane);
    let g = grad_out.data();
    let xh = cache.x_hat.data();
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                sg += g[i];
                sgx += g[i] * xh[i];
            }
        }
        ggamma[ch] = sgx;
        gbeta[ch] = sg;
        let k = gamma[ch] * cache.inv_std[ch] / cnt;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                gx.data_mut()[i] = k * (cnt * g[i] - sg - xh[i] * sgx);
            }
        }
    }
    check_finite(&gx, "batchnorm2d_backward");
    Ok(KernelGrad {
        grad_input: gx,
        grad_params: vec![Tensor::from_vec(&[c], ggamma)?, Tensor::from_vec(&[c], gbeta)?],
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn normalized_input_passes_through() {
        // two samples per channel at +-1: mean 0, biased var 1
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let (y, _) = batchnorm2d_train(&x, &[1.0], &[0.0], &mut rm, &mut rv).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[3, 2, 2, 2], 4.0);
        let (mut rm, mut rv) = (vec![0.0f64; 2], vec![1.0f64; 2]);
        let (y, _) = batchnorm2d_train(&x, &[2.0, 2.0], &[0.5, -0.5], &mut rm, &mut rv).unwrap();
        for b in 0..3 {
            for i in 0..4 {
                assert!((y.data()[b * 8 + i] - 0.5).abs() < 1e-9);
                assert!((y.data()[b * 8 + 4 + i] + 0.5).abs() < 1e-9);
            }
        }
        // running stats moved 10% of the way
        assert!((rm[0] - 0.4).abs() < 1e-12);
        assert!((rv[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_fails() {
        let x = Tensor::<f64>::zeros(&[0, 2, 2, 2]);
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        assert!(matches!(
            batchnorm2d_train(&x, &[1.0; 2], &[0.0; 2], &mut rm, &mut rv),
            Err(KernelError::EmptyBatch)
        ));
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 3.0);
        let y = batchnorm2d_eval(&x, &[2.0], &[1.0], &[1.0], &[4.0 - BN_EPS]).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[2, 3, 4, 4], 40);
        let gamma = random(&[3], 41);
        let beta = random(&[3], 42);
        let run = |x: &Tensor<f64>, gm: &[f64], bt: &[f64]| {
            let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
            batchnorm2d_train(x, gm, bt, &mut rm, &mut rv).unwrap()
        };
        let (y, cache) = run(&x, gamma.data(), beta.data());
        let pw = random(y.shape(), 43);
        let g = batchnorm2d_backward(&pw, &cache, gamma.data()).unwrap();
        let nx = numeric_grad(&x, 1e-5, |x| probe(&run(x, gamma.data(), beta.data()).0, &pw));
        let ng = numeric_grad(&gamma, 1e-5, |gm| probe(&run(&x, gm.data(), beta.data()).0, &pw));
        let nb = numeric_grad(&beta, 1e-5, |bt| probe(&run(&x, gamma.data(), bt.data()).0, &pw));
        // relative error with a plain |a|+|n| denominator, tighter than the suite's
        for (a, n) in g.grad_input.data().iter().zip(&nx) {
            assert!((a - n).abs() / (a.abs() + n.abs()).max(1e-8) < 1e-5, "{a} vs {n}");
        }
        assert!(max_rel_err(g.grad_params[0].data(), &ng) < 1e-5);
        assert!(max_rel_err(g.grad_params[1].data(), &nb) < 1e-5);
    }
}
