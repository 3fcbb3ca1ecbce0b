use super::{check_finite, conv::conv_output_size, shape_err, KernelError, Scalar, Tensor};

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// every output element, the flat index of the winning input element.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>), KernelError> {
    let (n, c, h, w) = x.dims4()?;
    if padding * 2 > kernel {
        return Err(shape_err("maxpool: padding larger than half the window"));
    }
    let oh = conv_output_size(h, kernel, stride, padding)?;
    let ow = conv_output_size(w, kernel, stride, padding)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = base;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                let o = (nc * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    check_finite(&out, "maxpool2d");
    Ok((out, arg))
}

/// Routes each output gradient to the input element that won the max.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>, KernelError> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err("maxpool backward: argmax length mismatch"));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

/// Mean over the spatial plane: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_usize(plane);
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, KernelError> {
    let (n, c) = grad_out.dims2()?;
    let [xn, xc, h, w] = input_shape[..] else {
        return Err(shape_err("global_avg_pool backward: expected 4-d input shape"));
    };
    if (xn, xc) != (n, c) {
        return Err(shape_err("global_avg_pool backward: shape mismatch"));
    }
    let plane = h * w;
    let inv = T::one() / T::from_usize(plane);
    let mut gx = Tensor::zeros(input_shape);
    for (p, &g) in gx.data_mut().chunks_exact_mut(plane).zip(grad_out.data()) {
        p.fill(g * inv);
    }
    Ok(gx)
}
