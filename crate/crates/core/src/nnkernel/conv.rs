use rayon::prelude::*;

use super::{check_finite, shape_err, sum_ordered, KernelError, KernelGrad, Scalar, Tensor};

/// Output side of a convolution/pool window: `floor((n + 2p - k) / s) + 1`.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, KernelError> {
    if stride == 0 {
        return Err(shape_err("stride must be >= 1"));
    }
    if n + 2 * padding < kernel {
        return Err(shape_err(format!(
            "window {kernel} larger than padded input {}",
            n + 2 * padding
        )));
    }
    Ok((n + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xrow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Geometry), KernelError> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(shape_err(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if kh != kw {
        return Err(shape_err("conv2d: only square kernels are supported"));
    }
    let oh = conv_output_size(h, kh, stride, padding)?;
    let ow = conv_output_size(w, kw, stride, padding)?;
    Ok((
        n,
        cout,
        Geometry {
            cin,
            h,
            w,
            k: kh,
            stride,
            pad: padding,
            oh,
            ow,
        },
    ))
}

/// Standard cross-correlation. `weight` is `(Cout, Cin, k, k)`, zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, KernelError> {
    let (n, cout, g) = conv_geometry(x, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape_err(format!("conv2d: bias has {} entries, need {cout}", b.len())));
        }
    }
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let kdim = g.col_rows();
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    out.data_mut()
        .par_chunks_mut(cout * plane)
        .zip(x.data().par_chunks(in_len))
        .for_each(|(o, xn)| {
            let owned;
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                let mut c = vec![T::zero(); kdim * plane];
                im2col(xn, &g, &mut c);
                owned = c;
                &owned
            };
            if let Some(b) = bias {
                for (co, row) in o.chunks_exact_mut(plane).enumerate() {
                    row.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                cout,
                kdim,
                plane,
                T::one(),
                weight.data(),
                kdim as isize,
                1,
                cols,
                plane as isize,
                1,
                beta,
                o,
                plane as isize,
                1,
            );
        });
    check_finite(&out, "conv2d");
    Ok(out)
}

/// Backward of [`conv2d`]. `grad_params` is `[weight]` or `[weight, bias]`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    with_bias: bool,
) -> Result<KernelGrad<T>, KernelError> {
    let (n, cout, g) = conv_geometry(x, weight, stride, padding)?;
    if grad_out.shape() != [n, cout, g.oh, g.ow] {
        return Err(shape_err(format!(
            "conv2d backward: grad has shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, g.oh, g.ow]
        )));
    }
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let kdim = g.col_rows();
    let mut grad_input = Tensor::zeros(x.shape());
    let partial_w: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(in_len)
        .zip(x.data().par_chunks(in_len))
        .zip(grad_out.data().par_chunks(cout * plane))
        .map(|((gx, xn), gon)| {
            let mut gw = vec![T::zero(); cout * kdim];
            if g.is_pointwise() {
                // gW = gout * x^T ; gx = W^T * gout
                T::gemm(cout, plane, kdim, T::one(), gon, plane as isize, 1, xn, 1, plane as isize, T::zero(), &mut gw, kdim as isize, 1);
                T::gemm(kdim, cout, plane, T::one(), weight.data(), 1, kdim as isize, gon, plane as isize, 1, T::zero(), gx, plane as isize, 1);
            } else {
                let mut cols = vec![T::zero(); kdim * plane];
                im2col(xn, &g, &mut cols);
                T::gemm(cout, plane, kdim, T::one(), gon, plane as isize, 1, &cols, 1, plane as isize, T::zero(), &mut gw, kdim as isize, 1);
                T::gemm(kdim, cout, plane, T::one(), weight.data(), 1, kdim as isize, gon, plane as isize, 1, T::zero(), &mut cols, plane as isize, 1);
                col2im(&cols, &g, gx);
            }
            gw
        })
        .collect();
    let gw = Tensor::from_vec(weight.shape(), sum_ordered(partial_w, cout * kdim))?;
    let mut grad_params = vec![gw];
    if with_bias {
        let mut gb = vec![T::zero(); cout];
        for gon in grad_out.data().chunks_exact(cout * plane) {
            for (co, row) in gon.chunks_exact(plane).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        grad_params.push(Tensor::from_vec(&[cout], gb)?);
    }
    check_finite(&grad_input, "conv2d_backward");
    Ok(KernelGrad {
        grad_input,
        grad_params,
    })
}

fn dw_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, Geometry), KernelError> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 || kh != kw {
        return Err(shape_err(format!(
            "depthwise: weight {:?} does not fit {c} channels",
            weight.shape()
        )));
    }
    let oh = conv_output_size(h, kh, stride, padding)?;
    let ow = conv_output_size(w, kw, stride, padding)?;
    Ok((
        n,
        Geometry {
            cin: c,
            h,
            w,
            k: kh,
            stride,
            pad: padding,
            oh,
            ow,
        },
    ))
}

/// Depthwise convolution (`groups == channels`), weight `(C, 1, k, k)`, no bias.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, KernelError> {
    let (n, g) = dw_geometry(x, weight, stride, padding)?;
    let (c, k) = (g.cin, g.k);
    let mut out = Tensor::zeros(&[n, c, g.oh, g.ow]);
    let in_plane = g.h * g.w;
    let out_plane = g.out_plane();
    out.data_mut()
        .par_chunks_mut(out_plane)
        .zip(x.data().par_chunks(in_plane))
        .enumerate()
        .for_each(|(idx, (o, xc))| {
            let ch = idx % c;
            let wk = &weight.data()[ch * k * k..(ch + 1) * k * k];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += wk[ky * k + kx] * xc[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    o[oy * g.ow + ox] = acc;
                }
            }
        });
    check_finite(&out, "depthwise_conv2d");
    Ok(out)
}

/// Backward of [`depthwise_conv2d`]; `grad_params` is `[weight]`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<KernelGrad<T>, KernelError> {
    let (n, g) = dw_geometry(x, weight, stride, padding)?;
    let (c, k) = (g.cin, g.k);
    if grad_out.shape() != [n, c, g.oh, g.ow] {
        return Err(shape_err(format!(
            "depthwise backward: grad has shape {:?}",
            grad_out.shape()
        )));
    }
    let in_plane = g.h * g.w;
    let out_plane = g.out_plane();
    let mut grad_input = Tensor::zeros(x.shape());
    let partial: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(c * in_plane)
        .zip(x.data().par_chunks(c * in_plane))
        .zip(grad_out.data().par_chunks(c * out_plane))
        .map(|((gx, xn), gon)| {
            let mut gw = vec![T::zero(); c * k * k];
            for ch in 0..c {
                let xc = &xn[ch * in_plane..(ch + 1) * in_plane];
                let gxc = &mut gx[ch * in_plane..(ch + 1) * in_plane];
                let goc = &gon[ch * out_plane..(ch + 1) * out_plane];
                let wk = &weight.data()[ch * k * k..(ch + 1) * k * k];
                let gwk = &mut gw[ch * k * k..(ch + 1) * k * k];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = goc[oy * g.ow + ox];
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    let xi = iy as usize * g.w + ix as usize;
                                    gwk[ky * k + kx] += go * xc[xi];
                                    gxc[xi] += go * wk[ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
            gw
        })
        .collect();
    let gw = Tensor::from_vec(weight.shape(), sum_ordered(partial, c * k * k))?;
    check_finite(&grad_input, "depthwise_conv2d_backward");
    Ok(KernelGrad {
        grad_input,
        grad_params: vec![gw],
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b_ in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                            * x.data()[((b_ * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b_ * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = random(&[2, 3, 4, 5], 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &w, Some(&[0.0; 3]), 1, 0).unwrap(), x);
    }

    #[test]
    fn summation_kernel() {
        let x = random(&[1, 1, 3, 3], 2);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let s: f64 = x.data().iter().sum();
        assert!((y.data()[0] - s).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_reference() {
        let x = random(&[2, 3, 5, 5], 3);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
            let w = random(&[4, 3, k, k], 4);
            let b = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            let diff = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "k={k} s={s} p={p}: {diff}");
        }
    }

    #[test]
    fn shape_errors() {
        let x = random(&[1, 3, 5, 5], 1);
        let w = random(&[2, 4, 3, 3], 1);
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
        let w = random(&[2, 3, 7, 7], 1);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let w = random(&[2, 3, 3, 3], 1);
        assert!(conv2d(&x, &w, None, 0, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = random(&[2, 3, 5, 5], 10);
            let w = random(&[4, 3, k, k], 11);
            let b = random(&[4], 12);
            let y = conv2d(&x, &w, Some(b.data()), s, p).unwrap();
            let probe_w = random(y.shape(), 13);
            let g = conv2d_backward(&x, &w, &probe_w, s, p, true).unwrap();
            let nx = numeric_grad(&x, 1e-5, |x| probe(&conv2d(x, &w, Some(b.data()), s, p).unwrap(), &probe_w));
            let nw = numeric_grad(&w, 1e-5, |w| probe(&conv2d(&x, w, Some(b.data()), s, p).unwrap(), &probe_w));
            let nb = numeric_grad(&b, 1e-5, |b| probe(&conv2d(&x, &w, Some(b.data()), s, p).unwrap(), &probe_w));
            assert!(max_rel_err(g.grad_input.data(), &nx) < 1e-4);
            assert!(max_rel_err(g.grad_params[0].data(), &nw) < 1e-4);
            assert!(max_rel_err(g.grad_params[1].data(), &nb) < 1e-4);
        }
    }

    #[test]
    fn depthwise_identity_and_grouped_equivalence() {
        let x = random(&[2, 3, 6, 6], 20);
        let mut id = Tensor::zeros(&[3, 1, 3, 3]);
        for c in 0..3 {
            id.data_mut()[c * 9 + 4] = 1.0;
        }
        assert_eq!(depthwise_conv2d(&x, &id, 1, 1).unwrap(), x);

        let w = random(&[3, 1, 3, 3], 21);
        for s in [1, 2] {
            let dw = depthwise_conv2d(&x, &w, s, 1).unwrap();
            // block-diagonal dense expansion
            let mut dense = Tensor::zeros(&[3, 3, 3, 3]);
            for c in 0..3 {
                for t in 0..9 {
                    dense.data_mut()[(c * 3 + c) * 9 + t] = w.data()[c * 9 + t];
                }
            }
            let full = conv2d(&x, &dense, None, s, 1).unwrap();
            let diff = dw
                .data()
                .iter()
                .zip(full.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn depthwise_stride_two_halves_224() {
        let x = Tensor::<f32>::zeros(&[1, 2, 224, 224]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert_eq!(depthwise_conv2d(&x, &w, 2, 1).unwrap().shape(), &[1, 2, 112, 112]);
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        for s in [1, 2] {
            let x = random(&[2, 3, 5, 5], 30);
            let w = random(&[3, 1, 3, 3], 31);
            let y = depthwise_conv2d(&x, &w, s, 1).unwrap();
            let pw = random(y.shape(), 32);
            let g = depthwise_conv2d_backward(&x, &w, &pw, s, 1).unwrap();
            let nx = numeric_grad(&x, 1e-5, |x| probe(&depthwise_conv2d(x, &w, s, 1).unwrap(), &pw));
            let nw = numeric_grad(&w, 1e-5, |w| probe(&depthwise_conv2d(&x, w, s, 1).unwrap(), &pw));
            assert!(max_rel_err(g.grad_input.data(), &nx) < 1e-4);
            assert!(max_rel_err(g.grad_params[0].data(), &nw) < 1e-4);
        }
    }
}
