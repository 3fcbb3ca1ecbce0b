use super::{shape_err, KernelError, Scalar, Tensor};

/// Source channel for each output channel of a shuffle with `groups` groups.
fn shuffle_sources(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    // input (g, j) = g * per + j lands at output j * groups + g
    let mut src = vec![0; channels];
    for g in 0..groups {
        for j in 0..per {
            src[j * groups + g] = g * per + j;
        }
    }
    src
}

fn gather_channels<T: Scalar>(x: &Tensor<T>, src: &[usize]) -> Result<Tensor<T>, KernelError> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for (dst, &s) in src.iter().enumerate() {
            let from = (b * c + s) * plane;
            let to = (b * c + dst) * plane;
            out.data_mut()[to..to + plane].copy_from_slice(&x.data()[from..from + plane]);
        }
    }
    Ok(out)
}

fn check_groups(c: usize, groups: usize) -> Result<(), KernelError> {
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(KernelError::Divisibility {
            channels: c,
            groups,
        });
    }
    Ok(())
}

/// Transposes the channel axis viewed as a `groups x (C / groups)` grid.
pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>, KernelError> {
    let (_, c, _, _) = x.dims4()?;
    check_groups(c, groups)?;
    gather_channels(x, &shuffle_sources(c, groups))
}

/// Backward of [`channel_shuffle`]: the inverse permutation.
pub fn channel_shuffle_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>, KernelError> {
    let (_, c, _, _) = grad_out.dims4()?;
    check_groups(c, groups)?;
    let src = shuffle_sources(c, groups);
    let mut inv = vec![0; c];
    for (dst, &s) in src.iter().enumerate() {
        inv[s] = dst;
    }
    gather_channels(grad_out, &inv)
}

/// Splits along channels into `[0, at)` and `[at, C)`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>), KernelError> {
    let (n, c, h, w) = x.dims4()?;
    if at > c {
        return Err(shape_err(format!("cannot split {c} channels at {at}")));
    }
    let plane = h * w;
    let mut a = Tensor::zeros(&[n, at, h, w]);
    let mut b = Tensor::zeros(&[n, c - at, h, w]);
    for s in 0..n {
        let base = s * c * plane;
        a.data_mut()[s * at * plane..(s + 1) * at * plane]
            .copy_from_slice(&x.data()[base..base + at * plane]);
        b.data_mut()[s * (c - at) * plane..(s + 1) * (c - at) * plane]
            .copy_from_slice(&x.data()[base + at * plane..base + c * plane]);
    }
    Ok((a, b))
}

/// Concatenates two tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err(format!(
            "concat: {:?} and {:?} differ outside channels",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let c = ca + cb;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        let base = s * c * plane;
        out.data_mut()[base..base + ca * plane]
            .copy_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        out.data_mut()[base + ca * plane..base + c * plane]
            .copy_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Ok(out)
}
