//! The classification network: a ShuffleNet V2 backbone followed by global
//! average pooling, dropout and a fully connected multi-label head with
//! `N * (M + 1)` sigmoid outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeom::CellConfig;
use crate::labelkit::LabelError;
use crate::nnkernel::{
    dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward, maxpool2d,
    maxpool2d_backward, sigmoid, DropoutKey, KernelError, Scalar, Tensor,
};

mod layers;
mod loss;
mod train;
mod weights;

pub use layers::{Buffer, ConvKind, Param};
use layers::{ConvBn, ShuffleUnit};
pub use loss::{bce_loss, bce_loss_value, BCE_CLAMP};
pub use train::{lr_at_epoch, train, Adam, Sample, TrainConfig, TrainReport};
pub use weights::{load_weights, save_weights, WeightsHeader, WEIGHTS_MAGIC};

/// Layer id of the head dropout in [`DropoutKey`].
const DROPOUT_LAYER: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input must be (B, 3, {expected}, {expected}), got {found:?}")]
    InputSize { expected: usize, found: Vec<usize> },
    #[error("model has {expected} outputs but the data has {found}")]
    OutputMismatch { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("weights file truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthPreset {
    Table1,
    Tiny,
}

impl WidthPreset {
    pub fn name(self) -> &'static str {
        match self {
            WidthPreset::Table1 => "table1",
            WidthPreset::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "table1" => Some(Self::Table1),
            "tiny" => Some(Self::Tiny),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub preset: WidthPreset,
    pub input_size: usize,
    pub stage_repeats: Vec<usize>,
    /// Stem, three stages, final pointwise conv.
    pub stage_channels: Vec<usize>,
    pub dropout_rate: f64,
    pub n_outputs: usize,
}

pub const DEFAULT_INPUT_SIZE: usize = 224;
pub const DEFAULT_DROPOUT: f64 = 0.2;

impl ModelSpec {
    pub fn table1(n_outputs: usize) -> Self {
        Self {
            preset: WidthPreset::Table1,
            input_size: DEFAULT_INPUT_SIZE,
            stage_repeats: vec![4, 8, 4],
            stage_channels: vec![24, 116, 232, 464, 1024],
            dropout_rate: DEFAULT_DROPOUT,
            n_outputs,
        }
    }

    pub fn tiny(n_outputs: usize, input_size: usize) -> Self {
        Self {
            preset: WidthPreset::Tiny,
            input_size,
            stage_repeats: vec![1, 1, 1],
            stage_channels: vec![8, 16, 32, 64, 128],
            dropout_rate: DEFAULT_DROPOUT,
            n_outputs,
        }
    }

    pub fn from_preset(preset: WidthPreset, n_outputs: usize, input_size: usize) -> Self {
        match preset {
            WidthPreset::Table1 => Self {
                input_size,
                ..Self::table1(n_outputs)
            },
            WidthPreset::Tiny => Self::tiny(n_outputs, input_size),
        }
    }

    /// Spec bound to a cell configuration, so that `C = N * (M + 1)`.
    pub fn for_config(preset: WidthPreset, cfg: &CellConfig, input_size: usize) -> Self {
        Self::from_preset(preset, cfg.n_outputs(), input_size)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input size {} is not a positive multiple of 32", self.input_size));
        }
        if self.stage_repeats.len() != 3 || self.stage_repeats.contains(&0) {
            return bad(format!("need three nonzero stage repeats, got {:?}", self.stage_repeats));
        }
        if self.stage_channels.len() != 5 || self.stage_channels.contains(&0) {
            return bad(format!("need five nonzero channel counts, got {:?}", self.stage_channels));
        }
        if let Some(c) = self.stage_channels[1..4].iter().find(|&&c| c % 2 != 0) {
            return bad(format!("stage channels must be even, got {c}"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.n_outputs == 0 {
            return bad("no outputs".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    stem_shape: Vec<usize>,
    pool_arg: Vec<usize>,
    features_shape: Vec<usize>,
    drop_mask: Option<Vec<T>>,
    fc_input: Tensor<T>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct YolicModel<T> {
    spec: ModelSpec,
    seed: u64,
    stem: ConvBn<T>,
    units: Vec<ShuffleUnit<T>>,
    conv5: ConvBn<T>,
    fc_weight: Param<T>,
    fc_bias: Param<T>,
    step: u64,
    cache: Option<HeadCache<T>>,
}

fn convs_mut<'a, T: Scalar>(
    stem: &'a mut ConvBn<T>,
    units: &'a mut [ShuffleUnit<T>],
    conv5: &'a mut ConvBn<T>,
) -> impl Iterator<Item = &'a mut ConvBn<T>> {
    std::iter::once(stem)
        .chain(units.iter_mut().flat_map(|u| u.layers_mut()))
        .chain(std::iter::once(conv5))
}

/// Builds a freshly initialized model. Convolutions are He-uniform, batch
/// norms start at identity, the head bias at zero.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<YolicModel<T>, NetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = &spec.stage_channels;
    let stem = ConvBn::new("stem".into(), ConvKind::Dense, 3, ch[0], 3, 2, true, &mut rng);
    let mut units = Vec::new();
    let mut cin = ch[0];
    for (s, (&reps, &cout)) in spec.stage_repeats.iter().zip(&ch[1..4]).enumerate() {
        for r in 0..reps {
            let stride = if r == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.{r}", s + 2);
            units.push(ShuffleUnit::new(&prefix, cin, cout, stride, &mut rng));
            cin = cout;
        }
    }
    let conv5 = ConvBn::new("conv5".into(), ConvKind::Dense, cin, ch[4], 1, 1, true, &mut rng);
    let bound = 1.0 / (ch[4] as f64).sqrt();
    let fc_data = {
        use rand::Rng;
        (0..spec.n_outputs * ch[4])
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect()
    };
    let fc_weight = Param::new("fc.weight".into(), Tensor::from_vec(&[spec.n_outputs, ch[4]], fc_data)?);
    let fc_bias = Param::new("fc.bias".into(), Tensor::zeros(&[spec.n_outputs]));
    Ok(YolicModel {
        spec: spec.clone(),
        seed,
        stem,
        units,
        conv5,
        fc_weight,
        fc_bias,
        step: 0,
        cache: None,
    })
}

impl<T: Scalar> YolicModel<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_outputs(&self) -> usize {
        self.spec.n_outputs
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NetError> {
        let s = self.spec.input_size;
        match x.shape() {
            [b, 3, h, w] if *b > 0 && *h == s && *w == s => Ok(()),
            other => Err(NetError::InputSize {
                expected: s,
                found: other.to_vec(),
            }),
        }
    }

    fn conv_layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        std::iter::once(&self.stem)
            .chain(self.units.iter().flat_map(|u| u.layers()))
            .chain(std::iter::once(&self.conv5))
    }


    /// Evaluation-mode forward that also records the activation shape after
    /// each stage: stem, maxpool, stage2..4, conv5, pooled features, logits.
    pub fn trace_shapes(&self, x: &Tensor<T>) -> Result<Vec<(String, Vec<usize>)>, NetError> {
        let mut trace = Vec::new();
        self.infer_logits(x, Some(&mut trace))?;
        Ok(trace)
    }

    fn infer_logits(
        &self,
        x: &Tensor<T>,
        mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Tensor<T>, NetError> {
        self.check_input(x)?;
        let mut record = |name: &str, t: &Tensor<T>| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name.to_string(), t.shape().to_vec()));
            }
        };
        let y = self.stem.infer(x)?;
        record("stem", &y);
        let (mut y, _) = maxpool2d(&y, 3, 2, 1)?;
        record("maxpool", &y);
        let mut i = 0;
        for (s, &reps) in self.spec.stage_repeats.iter().enumerate() {
            for _ in 0..reps {
                y = self.units[i].infer(&y)?;
                i += 1;
            }
            record(&format!("stage{}", s + 2), &y);
        }
        let y = self.conv5.infer(&y)?;
        record("conv5", &y);
        let f = global_avg_pool(&y)?;
        record("pool", &f);
        let logits = linear(&f, &self.fc_weight.value, self.fc_bias.value.data())?;
        record("fc", &logits);
        Ok(logits)
    }

    /// Inference-mode logits and probabilities; the model is not modified.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Forward<T>, NetError> {
        let logits = self.infer_logits(x, None)?;
        let probs = sigmoid(&logits);
        Ok(Forward { logits, probs })
    }

    /// Forward pass. In training mode batch statistics are used (and the
    /// running estimates updated), dropout is active and activations are
    /// kept for [`YolicModel::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Forward<T>, NetError> {
        if mode == Mode::Eval {
            self.cache = None;
            return self.infer(x);
        }
        self.check_input(x)?;
        self.step += 1;
        let y = self.stem.forward_train(x)?;
        let stem_shape = y.shape().to_vec();
        let (mut y, pool_arg) = maxpool2d(&y, 3, 2, 1)?;
        for u in &mut self.units {
            y = u.forward_train(&y)?;
        }
        let y = self.conv5.forward_train(&y)?;
        let features_shape = y.shape().to_vec();
        let f = global_avg_pool(&y)?;
        let key = DropoutKey {
            seed: self.seed,
            layer: DROPOUT_LAYER,
            step: self.step,
        };
        let (f, drop_mask) = dropout(&f, self.spec.dropout_rate, key, true)?;
        let logits = linear(&f, &self.fc_weight.value, self.fc_bias.value.data())?;
        self.cache = Some(HeadCache {
            stem_shape,
            pool_arg,
            features_shape,
            drop_mask,
            fc_input: f,
        });
        let probs = sigmoid(&logits);
        Ok(Forward { logits, probs })
    }

    /// Accumulates parameter gradients from the gradient of the loss with
    /// respect to the logits of the last training-mode forward.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<(), NetError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NetError::Kernel(KernelError::Shape("backward without a training forward".into())))?;
        let kg = linear_backward(&cache.fc_input, &self.fc_weight.value, grad_logits)?;
        self.fc_weight.grad.add_assign(&kg.grad_params[0])?;
        self.fc_bias.grad.add_assign(&kg.grad_params[1])?;
        let g = dropout_backward(&kg.grad_input, cache.drop_mask.as_deref());
        let g = global_avg_pool_backward(&g, &cache.features_shape)?;
        let mut g = self.conv5.backward(&g)?;
        for u in self.units.iter_mut().rev() {
            g = u.backward(&g)?;
        }
        let g = maxpool2d_backward(&g, &cache.pool_arg, &cache.stem_shape)?;
        self.stem.backward(&g)?;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.conv_layers().flat_map(|l| l.params()).collect();
        v.push(&self.fc_weight);
        v.push(&self.fc_bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for l in convs_mut(&mut self.stem, &mut self.units, &mut self.conv5) {
            v.extend(l.params_mut());
        }
        v.push(&mut self.fc_weight);
        v.push(&mut self.fc_bias);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every persisted tensor (parameters and running statistics) in build order.
    pub fn state(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut v: Vec<(&str, &Tensor<T>)> = self.conv_layers().flat_map(|l| l.state()).collect();
        v.push((self.fc_weight.name.as_str(), &self.fc_weight.value));
        v.push((self.fc_bias.name.as_str(), &self.fc_bias.value));
        v
    }

    pub fn state_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for l in convs_mut(&mut self.stem, &mut self.units, &mut self.conv5) {
            v.extend(l.state_mut());
        }
        v.push((self.fc_weight.name.as_str(), &mut self.fc_weight.value));
        v.push((self.fc_bias.name.as_str(), &mut self.fc_bias.value));
        v
    }

    /// Number of trainable scalars, by walking the parameter tensors.
    pub fn n_trainable(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Copy with every batch norm folded into its convolution. Inference
    /// outputs match the original up to rounding.
    pub fn fold_batchnorm(&self) -> Self {
        Self {
            stem: self.stem.folded(),
            units: self.units.iter().map(ShuffleUnit::folded).collect(),
            conv5: self.conv5.folded(),
            cache: None,
            ..self.clone()
        }
    }

    /// Applies `f` to every weight tensor of a convolution or the head.
    /// Biases, batch-norm parameters and running statistics are untouched.
    pub fn map_weights(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for l in convs_mut(&mut self.stem, &mut self.units, &mut self.conv5) {
            f(&l.weight.name, &mut l.weight.value);
        }
        f(&self.fc_weight.name, &mut self.fc_weight.value);
    }

    pub fn cast<U: Scalar>(&self) -> YolicModel<U> {
        let mut out: YolicModel<U> = build_model(&self.spec, self.seed).expect("spec already validated");
        if self.stem.bn.is_none() {
            out = out.fold_batchnorm();
        }
        for ((_, dst), (_, src)) in out.state_mut().into_iter().zip(self.state()) {
            *dst = src.cast();
        }
        out.step = self.step;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use rand::Rng;

    fn input<T: Scalar>(b: usize, s: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * s * s;
        Tensor::from_vec(&[b, 3, s, s], (0..n).map(|_| T::from_f64(rng.random())).collect()).unwrap()
    }

    #[test]
    fn table1_head_shape() {
        let m: YolicModel<f32> = build_model(&ModelSpec::table1(1248), 0).unwrap();
        assert_eq!(m.fc_weight.value.shape(), &[1248, 1024]);
    }

    #[test]
    fn shipped_configs_set_output_width() {
        for (name, c) in [("outdoor104", 1248), ("indoor30", 210), ("cityscapes256", 1024)] {
            let cfg = preset(name).unwrap().unwrap();
            let spec = ModelSpec::for_config(WidthPreset::Tiny, &cfg, 64);
            let m: YolicModel<f32> = build_model(&spec, 1).unwrap();
            let out = m.infer(&input(1, 64, 2)).unwrap();
            assert_eq!(out.logits.shape(), &[1, c], "{name}");
        }
    }

    #[test]
    fn tiny_forward_is_finite() {
        let m: YolicModel<f32> = build_model(&ModelSpec::tiny(12, 64), 3).unwrap();
        let out = m.infer(&input(2, 64, 4)).unwrap();
        assert_eq!(out.logits.shape(), &[2, 12]);
        assert!(out.logits.all_finite());
        assert!(out.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::tiny(12, 64);
        let a: YolicModel<f32> = build_model(&spec, 9).unwrap();
        let b: YolicModel<f32> = build_model(&spec, 9).unwrap();
        let c: YolicModel<f32> = build_model(&spec, 10).unwrap();
        let bits = |m: &YolicModel<f32>| -> Vec<u32> {
            m.state().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn init_follows_rules() {
        let m: YolicModel<f64> = build_model(&ModelSpec::tiny(6, 32), 5).unwrap();
        for l in m.conv_layers() {
            let fan_in: usize = l.weight.value.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(l.weight.value.data().iter().all(|w| w.abs() <= bound));
            let bn = l.bn.as_ref().unwrap();
            assert!(bn.gamma.value.data().iter().all(|&g| g == 1.0));
            assert!(bn.beta.value.data().iter().all(|&b| b == 0.0));
        }
        assert!(m.fc_bias.value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m: YolicModel<f32> = build_model(&ModelSpec::tiny(7, 32), 0).unwrap();
        m.fc_weight.value.fill(0.0);
        let out = m.infer(&input(3, 32, 1)).unwrap();
        assert!(out.probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let m: YolicModel<f32> = build_model(&ModelSpec::tiny(4, 64), 0).unwrap();
        assert!(matches!(
            m.infer(&input(1, 32, 0)),
            Err(NetError::InputSize { expected: 64, .. })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = ModelSpec::tiny(4, 64);
        s.input_size = 100;
        assert!(build_model::<f32>(&s, 0).is_err());
        let mut s = ModelSpec::tiny(4, 64);
        s.stage_channels[2] = 33;
        assert!(build_model::<f32>(&s, 0).is_err());
        let mut s = ModelSpec::tiny(4, 64);
        s.n_outputs = 0;
        assert!(build_model::<f32>(&s, 0).is_err());
    }

    #[test]
    fn tiny_shape_trace() {
        let m: YolicModel<f32> = build_model(&ModelSpec::tiny(5, 64), 0).unwrap();
        let trace = m.trace_shapes(&input(1, 64, 0)).unwrap();
        let shapes: Vec<Vec<usize>> = trace.into_iter().map(|(_, s)| s).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 8, 32, 32],
                vec![1, 8, 16, 16],
                vec![1, 16, 8, 8],
                vec![1, 32, 4, 4],
                vec![1, 64, 2, 2],
                vec![1, 128, 2, 2],
                vec![1, 128],
                vec![1, 5],
            ]
        );
    }

    #[test]
    fn folding_preserves_inference() {
        let mut m: YolicModel<f64> = build_model(&ModelSpec::tiny(6, 32), 2).unwrap();
        // a few training passes so running statistics move off identity
        for s in 0..3 {
            m.forward(&input(4, 32, s), Mode::Train).unwrap();
        }
        let x = input(2, 32, 99);
        let a = m.infer(&x).unwrap().logits;
        let b = m.fold_batchnorm().infer(&x).unwrap().logits;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut spec = ModelSpec::tiny(6, 32);
        spec.dropout_rate = 0.0;
        let mut m: YolicModel<f64> = build_model(&spec, 11).unwrap();
        let x = input::<f64>(2, 32, 12);
        let targets = Tensor::from_vec(&[2, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = m.forward(&x, Mode::Train).unwrap();
        let (_, grad) = bce_loss(&out.probs, &targets).unwrap();
        m.zero_grad();
        m.backward(&grad).unwrap();
        let n_params = m.params().len();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let picks: Vec<(usize, usize)> = (0..20)
            .map(|_| {
                let p = rng.random_range(0..n_params);
                let i = rng.random_range(0..m.params()[p].value.len());
                (p, i)
            })
            .collect();
        let h = 1e-6;
        for (p, i) in picks {
            let analytic = m.params()[p].grad.data()[i];
            let eval = |delta: f64| {
                let mut probe = m.clone();
                probe.params_mut()[p].value.data_mut()[i] += delta;
                let out = probe.forward(&x, Mode::Train).unwrap();
                bce_loss(&out.probs, &targets).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            assert!(err < 1e-3, "{}[{i}]: {analytic} vs {numeric}", m.params()[p].name);
        }
    }
}
