//! Building blocks: convolution + batch norm (+ ReLU) and ShuffleNet V2 units.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nnkernel::{
    batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, channel_shuffle, channel_shuffle_backward,
    concat_channels, conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, relu,
    relu_backward, split_channels, BnCache, KernelError, Scalar, Tensor,
};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub(crate) fn new(name: String, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name, value, grad }
    }

    fn uniform(name: String, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Self::new(name, Tensor::from_vec(shape, data).expect("length matches shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// A named non-trainable tensor (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.bn.gamma"), Tensor::full(&[c], T::one())),
            beta: Param::new(format!("{prefix}.bn.beta"), Tensor::zeros(&[c])),
            running_mean: Buffer {
                name: format!("{prefix}.bn.running_mean"),
                value: Tensor::zeros(&[c]),
            },
            running_var: Buffer {
                name: format!("{prefix}.bn.running_var"),
                value: Tensor::full(&[c], T::one()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Dense,
    Depthwise,
}

#[derive(Debug, Clone)]
struct ConvBnCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    output: Tensor<T>,
}

/// Convolution followed by optional batch norm and optional ReLU. After
/// batch-norm folding the norm is gone and the convolution carries a bias.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn<T> {
    pub name: String,
    pub kind: ConvKind,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub out_channels: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub bn: Option<BatchNorm<T>>,
    cache: Option<ConvBnCache<T>>,
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let shape = y.shape().to_vec();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let shape = g.shape();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks_exact(plane).enumerate() {
        out[i % c] += chunk.iter().copied().sum::<T>();
    }
    out
}

fn accumulate<T: Scalar>(p: &mut Param<T>, g: &Tensor<T>) -> Result<(), KernelError> {
    p.grad.add_assign(g)
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (shape, fan_in) = match kind {
            ConvKind::Dense => (vec![cout, cin, kernel, kernel], cin * kernel * kernel),
            ConvKind::Depthwise => {
                assert_eq!(cin, cout, "depthwise keeps channel count");
                (vec![cout, 1, kernel, kernel], kernel * kernel)
            }
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Param::uniform(format!("{name}.weight"), &shape, bound, rng);
        let bn = BatchNorm::new(&name, cout);
        Self {
            name,
            kind,
            stride,
            padding: kernel / 2,
            relu,
            out_channels: cout,
            weight,
            bias: None,
            bn: Some(bn),
            cache: None,
        }
    }

    fn conv(&self, x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        match self.kind {
            ConvKind::Dense => conv2d(
                x,
                &self.weight.value,
                self.bias.as_ref().map(|b| b.value.data()),
                self.stride,
                self.padding,
            ),
            ConvKind::Depthwise => {
                let mut y = depthwise_conv2d(x, &self.weight.value, self.stride, self.padding)?;
                if let Some(b) = &self.bias {
                    add_channel_bias(&mut y, b.value.data());
                }
                Ok(y)
            }
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        let mut y = self.conv(x)?;
        if let Some(bn) = &self.bn {
            y = batchnorm2d_eval(
                &y,
                bn.gamma.value.data(),
                bn.beta.value.data(),
                bn.running_mean.value.data(),
                bn.running_var.value.data(),
            )?;
        }
        Ok(if self.relu { relu(&y) } else { y })
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        let mut y = self.conv(x)?;
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (out, cache) = batchnorm2d_train(
                &y,
                bn.gamma.value.data(),
                bn.beta.value.data(),
                bn.running_mean.value.data_mut(),
                bn.running_var.value.data_mut(),
            )?;
            y = out;
            bn_cache = Some(cache);
        }
        if self.relu {
            y = relu(&y);
        }
        self.cache = Some(ConvBnCache {
            input: x.clone(),
            bn: bn_cache,
            output: if self.relu { y.clone() } else { Tensor::zeros(&[0]) },
        });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| KernelError::Shape(format!("{}: backward without forward", self.name)))?;
        let mut g = if self.relu {
            relu_backward(&cache.output, grad)?
        } else {
            grad.clone()
        };
        if let (Some(bn), Some(bc)) = (&mut self.bn, &cache.bn) {
            let kg = batchnorm2d_backward(&g, bc, bn.gamma.value.data())?;
            accumulate(&mut bn.gamma, &kg.grad_params[0])?;
            accumulate(&mut bn.beta, &kg.grad_params[1])?;
            g = kg.grad_input;
        }
        if let Some(b) = &mut self.bias {
            let sums = Tensor::from_vec(&[self.out_channels], channel_sums(&g))?;
            accumulate(b, &sums)?;
        }
        let kg = match self.kind {
            ConvKind::Dense => conv2d_backward(&cache.input, &self.weight.value, &g, self.stride, self.padding, false)?,
            ConvKind::Depthwise => {
                depthwise_conv2d_backward(&cache.input, &self.weight.value, &g, self.stride, self.padding)?
            }
        };
        accumulate(&mut self.weight, &kg.grad_params[0])?;
        Ok(kg.grad_input)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    /// Every persisted tensor in build order: weight, bias, gamma, beta, running mean, running var.
    pub fn state(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut v = vec![(self.weight.name.as_str(), &self.weight.value)];
        if let Some(b) = &self.bias {
            v.push((b.name.as_str(), &b.value));
        }
        if let Some(bn) = &self.bn {
            v.push((bn.gamma.name.as_str(), &bn.gamma.value));
            v.push((bn.beta.name.as_str(), &bn.beta.value));
            v.push((bn.running_mean.name.as_str(), &bn.running_mean.value));
            v.push((bn.running_var.name.as_str(), &bn.running_var.value));
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut v = vec![(self.weight.name.as_str(), &mut self.weight.value)];
        if let Some(b) = &mut self.bias {
            v.push((b.name.as_str(), &mut b.value));
        }
        if let Some(bn) = &mut self.bn {
            v.push((bn.gamma.name.as_str(), &mut bn.gamma.value));
            v.push((bn.beta.name.as_str(), &mut bn.beta.value));
            v.push((bn.running_mean.name.as_str(), &mut bn.running_mean.value));
            v.push((bn.running_var.name.as_str(), &mut bn.running_var.value));
        }
        v
    }

    /// Folds the running-statistics batch norm into the convolution weights
    /// and a per-channel bias.
    pub fn folded(&self) -> Self {
        let mut out = self.clone();
        out.cache = None;
        let Some(bn) = &self.bn else {
            return out;
        };
        let eps = T::from_f64(crate::nnkernel::BN_EPS);
        let per_out = self.weight.value.len() / self.out_channels;
        let mut bias = vec![T::zero(); self.out_channels];
        let prior = self.bias.as_ref().map(|b| b.value.data().to_vec());
        for c in 0..self.out_channels {
            let scale = bn.gamma.value.data()[c] / (bn.running_var.value.data()[c] + eps).sqrt();
            for w in &mut out.weight.value.data_mut()[c * per_out..(c + 1) * per_out] {
                *w *= scale;
            }
            let b0 = prior.as_ref().map_or(T::zero(), |p| p[c]);
            bias[c] = bn.beta.value.data()[c] + (b0 - bn.running_mean.value.data()[c]) * scale;
        }
        out.bn = None;
        out.bias = Some(Param::new(
            format!("{}.bias", self.name),
            Tensor::from_vec(&[self.out_channels], bias).expect("bias length"),
        ));
        out
    }
}

fn seq_infer<T: Scalar>(layers: &[ConvBn<T>], x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    let mut y = x.clone();
    for l in layers {
        y = l.infer(&y)?;
    }
    Ok(y)
}

fn seq_train<T: Scalar>(layers: &mut [ConvBn<T>], x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    let mut y = x.clone();
    for l in layers {
        y = l.forward_train(&y)?;
    }
    Ok(y)
}

fn seq_backward<T: Scalar>(layers: &mut [ConvBn<T>], g: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    let mut g = g.clone();
    for l in layers.iter_mut().rev() {
        g = l.backward(&g)?;
    }
    Ok(g)
}

/// ShuffleNet V2 unit. With stride 1 the input is split in half, one half
/// passes through and the other goes through 1x1 -> 3x3 dw -> 1x1; with
/// stride 2 both branches see the full input and downsample. Outputs are
/// concatenated and channel-shuffled with two groups.
#[derive(Debug, Clone)]
pub(crate) struct ShuffleUnit<T> {
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch1: Vec<ConvBn<T>>,
    pub branch2: Vec<ConvBn<T>>,
}

impl<T: Scalar> ShuffleUnit<T> {
    pub fn new(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let half = cout / 2;
        let mut branch1 = Vec::new();
        if stride > 1 {
            branch1.push(ConvBn::new(format!("{prefix}.branch1.0"), ConvKind::Depthwise, cin, cin, 3, stride, false, rng));
            branch1.push(ConvBn::new(format!("{prefix}.branch1.1"), ConvKind::Dense, cin, half, 1, 1, true, rng));
        }
        let b2_in = if stride > 1 { cin } else { half };
        let branch2 = vec![
            ConvBn::new(format!("{prefix}.branch2.0"), ConvKind::Dense, b2_in, half, 1, 1, true, rng),
            ConvBn::new(format!("{prefix}.branch2.1"), ConvKind::Depthwise, half, half, 3, stride, false, rng),
            ConvBn::new(format!("{prefix}.branch2.2"), ConvKind::Dense, half, half, 1, 1, true, rng),
        ];
        Self {
            stride,
            in_channels: cin,
            out_channels: cout,
            branch1,
            branch2,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        self.branch1.iter().chain(&self.branch2)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        self.branch1.iter_mut().chain(self.branch2.iter_mut())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        let y = if self.stride == 1 {
            let (x1, x2) = split_channels(x, self.in_channels / 2)?;
            concat_channels(&x1, &seq_infer(&self.branch2, &x2)?)?
        } else {
            concat_channels(&seq_infer(&self.branch1, x)?, &seq_infer(&self.branch2, x)?)?
        };
        channel_shuffle(&y, 2)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        let y = if self.stride == 1 {
            let (x1, x2) = split_channels(x, self.in_channels / 2)?;
            concat_channels(&x1, &seq_train(&mut self.branch2, &x2)?)?
        } else {
            let a = seq_train(&mut self.branch1, x)?;
            concat_channels(&a, &seq_train(&mut self.branch2, x)?)?
        };
        channel_shuffle(&y, 2)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        let g = channel_shuffle_backward(grad, 2)?;
        let (g1, g2) = split_channels(&g, self.out_channels / 2)?;
        if self.stride == 1 {
            let gx2 = seq_backward(&mut self.branch2, &g2)?;
            concat_channels(&g1, &gx2)
        } else {
            let mut gx = seq_backward(&mut self.branch1, &g1)?;
            gx.add_assign(&seq_backward(&mut self.branch2, &g2)?)?;
            Ok(gx)
        }
    }

    pub fn folded(&self) -> Self {
        Self {
            branch1: self.branch1.iter().map(ConvBn::folded).collect(),
            branch2: self.branch2.iter().map(ConvBn::folded).collect(),
            ..self.clone()
        }
    }
}
