use super::{check_finite, shape_err, KernelError, KernelGrad, Scalar, Tensor};

/// `y = x W^T + b` with `x: (N, in)`, `W: (out, in)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>, KernelError> {
    let (n, fin) = x.dims2()?;
    let (fout, win) = weight.dims2()?;
    if win != fin || bias.len() != fout {
        return Err(shape_err(format!(
            "linear: x {:?}, weight {:?}, bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let mut y = Tensor::zeros(&[n, fout]);
    for row in y.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias);
    }
    T::gemm(n, fin, fout, T::one(), x.data(), fin as isize, 1, weight.data(), 1, fin as isize, T::one(), y.data_mut(), fout as isize, 1);
    check_finite(&y, "linear");
    Ok(y)
}

/// `grad_params` is `[weight, bias]`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<KernelGrad<T>, KernelError> {
    let (n, fin) = x.dims2()?;
    let (fout, _) = weight.dims2()?;
    if grad_out.shape() != [n, fout] {
        return Err(shape_err("linear backward: gradient shape mismatch"));
    }
    let mut gx = Tensor::zeros(&[n, fin]);
    T::gemm(n, fout, fin, T::one(), grad_out.data(), fout as isize, 1, weight.data(), fin as isize, 1, T::zero(), gx.data_mut(), fin as isize, 1);
    let mut gw = Tensor::zeros(&[fout, fin]);
    T::gemm(fout, n, fin, T::one(), grad_out.data(), 1, fout as isize, x.data(), fin as isize, 1, T::zero(), gw.data_mut(), fin as isize, 1);
    let mut gb = vec![T::zero(); fout];
    for row in grad_out.data().chunks_exact(fout) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(KernelGrad {
        grad_input: gx,
        grad_params: vec![gw, Tensor::from_vec(&[fout], gb)?],
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn small_example() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = linear(&x, &w, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[3, 5], 70);
        let w = random(&[4, 5], 71);
        let b = random(&[4], 72);
        let pw = random(&[3, 4], 73);
        let g = linear_backward(&x, &w, &pw).unwrap();
        let nx = numeric_grad(&x, 1e-5, |x| probe(&linear(x, &w, b.data()).unwrap(), &pw));
        let nw = numeric_grad(&w, 1e-5, |w| probe(&linear(&x, w, b.data()).unwrap(), &pw));
        let nb = numeric_grad(&b, 1e-5, |b| probe(&linear(&x, &w, b.data()).unwrap(), &pw));
        assert!(max_rel_err(g.grad_input.data(), &nx) < 1e-4);
        assert!(max_rel_err(g.grad_params[0].data(), &nw) < 1e-4);
        assert!(max_rel_err(g.grad_params[1].data(), &nb) < 1e-4);
    }
}
