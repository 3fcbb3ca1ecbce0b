use super::{shape_err, KernelError, Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// `out` is the forward output; the gradient passes where it is positive.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    if out.shape() != grad_out.shape() {
        return Err(shape_err("relu backward: shape mismatch"));
    }
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    y
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `out` is the sigmoid output.
pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    if out.shape() != grad_out.shape() {
        return Err(shape_err("sigmoid backward: shape mismatch"));
    }
    let mut g = grad_out.clone();
    for (gv, &s) in g.data_mut().iter_mut().zip(out.data()) {
        *gv *= s * (T::one() - s);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = sigmoid(&Tensor::<f32>::zeros(&[1, 3]));
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let y = sigmoid(&Tensor::from_vec(&[1, 2], vec![-1000.0f64, 1000.0]).unwrap());
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[3, 7], 60);
        let pw = random(&[3, 7], 61);
        let y = relu(&x);
        let g = relu_backward(&y, &pw).unwrap();
        let n = numeric_grad(&x, 1e-5, |x| probe(&relu(x), &pw));
        assert!(max_rel_err(g.data(), &n) < 1e-4);

        let s = sigmoid(&x);
        let g = sigmoid_backward(&s, &pw).unwrap();
        let n = numeric_grad(&x, 1e-5, |x| probe(&sigmoid(x), &pw));
        assert!(max_rel_err(g.data(), &n) < 1e-4);
    }
}
