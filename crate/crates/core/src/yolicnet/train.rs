use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bce_loss, Mode, NetError, YolicModel};
use crate::imageio::{images_to_tensor, RgbImage};
use crate::labelkit::{color_jitter, flip_example, CellLabelVector};
use crate::nnkernel::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    /// Random horizontal flips; only applied when a mirror permutation is given.
    pub flip: bool,
    /// Color jitter strength, 0 disables.
    pub jitter: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            milestones: vec![100, 125],
            gamma: 0.1,
            batch_size: 32,
            epochs: 150,
            max_steps: None,
            flip: true,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidTrainConfig(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} are not strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below {} epochs", self.milestones, self.epochs));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("learning rate or betas out of range".into());
        }
        Ok(())
    }
}

/// Multi-step schedule: `lr * gamma^k` where `k` counts milestones `<= epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.gamma.powi(k as i32)
}

/// Adam with bias correction; moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    betas: (f64, f64),
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(betas: (f64, f64), eps: f64) -> Self {
        Self {
            betas,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, model: &mut YolicModel<T>, lr: f64) {
        let mut params = model.params_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = T::from_f64(w.to_f64() - update);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: CellLabelVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub flip_applied: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rng.random()
}

fn prepare(
    sample: &Sample,
    size: usize,
    cfg: &TrainConfig,
    mirror: Option<&[usize]>,
    aug_seed: u64,
) -> Result<(RgbImage, Vec<f32>), NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
    let mut image = if sample.image.width() == size && sample.image.height() == size {
        sample.image.clone()
    } else {
        sample.image.resize(size, size)
    };
    let mut labels = sample.labels.clone();
    if cfg.flip && mirror.is_some() && rng.random_bool(0.5) {
        let (img, lab) = flip_example(&image, &labels, mirror)?;
        image = img;
        labels = lab;
    }
    if cfg.jitter > 0.0 {
        image = color_jitter(&image, cfg.jitter, rng.random());
    }
    Ok((image, labels.to_targets()))
}

/// Runs the training recipe. Batches are reshuffled every epoch from the
/// configured seed; per-sample augmentation is assembled in parallel but
/// depends only on (seed, epoch, position), so runs are reproducible.
pub fn train<T: Scalar>(
    model: &mut YolicModel<T>,
    data: &[Sample],
    cfg: &TrainConfig,
    mirror: Option<&[usize]>,
) -> Result<TrainReport, NetError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let c = model.n_outputs();
    if let Some(bad) = data.iter().find(|s| s.labels.layout().n_outputs() != c) {
        return Err(NetError::OutputMismatch {
            expected: c,
            found: bad.labels.layout().n_outputs(),
        });
    }
    let size = model.spec().input_size;
    let mut adam = Adam::new(cfg.betas, cfg.eps);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        epoch_lrs: Vec::new(),
        step_losses: Vec::new(),
        steps: 0,
        flip_applied: cfg.flip && mirror.is_some(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX >> 32));
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let prepared = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let pos = (bi * cfg.batch_size + j) as u64;
                    prepare(&data[idx], size, cfg, mirror, mix(cfg.seed, epoch as u64, pos))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let images: Vec<&RgbImage> = prepared.iter().map(|(img, _)| img).collect();
            let x: Tensor<T> = images_to_tensor(&images);
            let targets = Tensor::from_vec(
                &[batch.len(), c],
                prepared.iter().flat_map(|(_, t)| t.iter().map(|&v| T::from_f32(v))).collect(),
            )?;
            let out = model.forward(&x, Mode::Train)?;
            let (loss, grad) = bce_loss(&out.probs, &targets)?;
            model.zero_grad();
            model.backward(&grad)?;
            adam.step(model, lr);
            report.step_losses.push(loss);
            report.steps += 1;
            total += loss;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        report.epoch_losses.push(total / batches as f64);
        report.epoch_lrs.push(lr);
    }
    Ok(report)
}

impl<T: Scalar> YolicModel<T> {
    /// Probabilities for a list of images, evaluated in chunks of `batch`.
    /// Images are resized to the model input when needed.
    pub fn predict_images(&self, images: &[RgbImage], batch: usize) -> Result<Vec<Vec<f32>>, NetError> {
        let size = self.spec().input_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let resized: Vec<RgbImage> = chunk
                .iter()
                .map(|im| {
                    if im.width() == size && im.height() == size {
                        im.clone()
                    } else {
                        im.resize(size, size)
                    }
                })
                .collect();
            let refs: Vec<&RgbImage> = resized.iter().collect();
            let probs = self.infer(&images_to_tensor(&refs))?.probs;
            let c = self.n_outputs();
            out.extend(
                probs
                    .data()
                    .chunks_exact(c)
                    .map(|row| row.iter().map(|&v| v.to_f64() as f32).collect()),
            );
        }
        Ok(out)
    }
}
