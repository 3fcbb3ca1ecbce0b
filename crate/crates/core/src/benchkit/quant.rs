//! Post-training INT8 weight quantization: batch norm is folded into the
//! preceding convolution, then every weight tensor gets one symmetric scale
//! `max|w| / 127`. Biases and activations stay `f32`.
//!
//! File format `yolic-weights-q8/1`: a magic line, a JSON header line, then
//! the tensors in build order, `i8` for quantized ones and little-endian
//! `f32` otherwise.

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::cellgeom::LabelLayout;
use crate::decode::decode;
use crate::nnkernel::Tensor;
use crate::yolicnet::{build_model, Forward, ModelSpec, NetError, YolicModel};

pub const Q8_MAGIC: &str = "yolic-weights-q8/1";

/// Symmetric per-tensor scale; an all-zero tensor gets scale 1.
pub fn tensor_scale(data: &[f32]) -> f32 {
    let max = data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        1.0
    } else {
        max / 127.0
    }
}

pub fn quantize_values(data: &[f32], scale: f32) -> Vec<i8> {
    data.iter()
        .map(|&w| (w / scale).round().clamp(-127.0, 127.0) as i8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f32,
    pub values: Vec<i8>,
}

impl QTensor {
    pub fn quantize(name: &str, t: &Tensor<f32>) -> Self {
        let scale = tensor_scale(t.data());
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            scale,
            values: quantize_values(t.data(), scale),
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        Tensor::from_vec(&self.shape, self.values.iter().map(|&q| f32::from(q) * self.scale).collect())
            .expect("shape and values agree")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// A folded model whose weight tensors are stored as INT8. Inference runs
/// on a dequantized copy built once at construction.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    spec: ModelSpec,
    seed: u64,
    config: String,
    quantized: Vec<QTensor>,
    floats: Vec<FloatTensor>,
    runtime: YolicModel<f32>,
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

pub fn quantize_int8(model: &YolicModel<f32>, config_name: &str) -> QuantizedModel {
    let folded = model.fold_batchnorm();
    let mut quantized = Vec::new();
    let mut floats = Vec::new();
    for (name, t) in folded.state() {
        if is_weight(name) {
            quantized.push(QTensor::quantize(name, t));
        } else {
            floats.push(FloatTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            });
        }
    }
    let mut runtime = folded;
    let mut q = quantized.iter();
    runtime.map_weights(|_, w| *w = q.next().expect("one quantized tensor per weight").dequantize());
    QuantizedModel {
        spec: model.spec().clone(),
        seed: model.seed(),
        config: config_name.to_string(),
        quantized,
        floats,
        runtime,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Q8Entry {
    name: String,
    shape: Vec<usize>,
    /// Present for INT8 tensors.
    scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Q8Header {
    spec: ModelSpec,
    config: String,
    n_outputs: usize,
    seed: u64,
    tensors: Vec<Q8Entry>,
}

impl QuantizedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config_name(&self) -> &str {
        &self.config
    }

    pub fn quantized_tensors(&self) -> &[QTensor] {
        &self.quantized
    }

    pub fn infer(&self, x: &Tensor<f32>) -> Result<Forward<f32>, NetError> {
        self.runtime.infer(x)
    }

    /// The dequantized, batch-norm-free model used for inference.
    pub fn runtime(&self) -> &YolicModel<f32> {
        &self.runtime
    }

    pub fn weight_bytes(&self) -> usize {
        self.quantized.iter().map(|q| q.values.len() + 4).sum::<usize>()
            + self.floats.iter().map(|f| 4 * f.values.len()).sum::<usize>()
    }

    pub fn save(&self) -> Vec<u8> {
        let order: Vec<&str> = self.runtime.state().into_iter().map(|(n, _)| n).collect();
        let mut q = self.quantized.iter();
        let mut f = self.floats.iter();
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for name in order {
            if is_weight(name) {
                let t = q.next().expect("weight order");
                tensors.push(Q8Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    scale: Some(t.scale),
                });
                payload.extend(t.values.iter().map(|&v| v as u8));
            } else {
                let t = f.next().expect("float order");
                tensors.push(Q8Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    scale: None,
                });
                for v in &t.values {
                    payload.extend(v.to_le_bytes());
                }
            }
        }
        let header = Q8Header {
            spec: self.spec.clone(),
            config: self.config.clone(),
            n_outputs: self.spec.n_outputs,
            seed: self.seed,
            tensors,
        };
        let mut out = format!("{Q8_MAGIC}\n").into_bytes();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self, BenchError> {
        let ferr = |m: String| BenchError::Format(m);
        let nl = |b: &[u8]| b.iter().position(|&c| c == b'\n');
        let i = nl(bytes).ok_or_else(|| ferr("missing header".into()))?;
        if &bytes[..i] != Q8_MAGIC.as_bytes() {
            return Err(ferr(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..i]))));
        }
        let rest = &bytes[i + 1..];
        let j = nl(rest).ok_or_else(|| ferr("header line is not terminated".into()))?;
        let header: Q8Header = serde_json::from_slice(&rest[..j]).map_err(|e| ferr(format!("header: {e}")))?;
        let mut payload = &rest[j + 1..];
        let base: YolicModel<f32> = build_model(&header.spec, header.seed)?;
        let mut runtime = base.fold_batchnorm();
        let expected: Vec<(String, Vec<usize>)> = runtime
            .state()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(ferr(format!("{} tensors listed, the spec builds {}", header.tensors.len(), expected.len())));
        }
        let mut quantized = Vec::new();
        let mut floats = Vec::new();
        for ((name, shape), e) in expected.iter().zip(&header.tensors) {
            if *name != e.name || *shape != e.shape || is_weight(name) != e.scale.is_some() {
                return Err(ferr(format!("tensor {} {:?} does not match {name} {shape:?}", e.name, e.shape)));
            }
            let n: usize = shape.iter().product();
            let width = if e.scale.is_some() { 1 } else { 4 };
            if payload.len() < n * width {
                return Err(ferr(format!("payload truncated in {name}")));
            }
            let (chunk, tail) = payload.split_at(n * width);
            payload = tail;
            match e.scale {
                Some(scale) => quantized.push(QTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    scale,
                    values: chunk.iter().map(|&b| b as i8).collect(),
                }),
                None => floats.push(FloatTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    values: chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                }),
            }
        }
        if !payload.is_empty() {
            return Err(ferr(format!("{} trailing bytes", payload.len())));
        }
        let mut q = quantized.iter();
        let mut f = floats.iter();
        for (name, t) in runtime.state_mut() {
            *t = if is_weight(name) {
                q.next().expect("counted above").dequantize()
            } else {
                let ft = f.next().expect("counted above");
                Tensor::from_vec(&ft.shape, ft.values.clone())?
            };
        }
        Ok(Self {
            spec: header.spec,
            seed: header.seed,
            config: header.config,
            quantized,
            floats,
            runtime,
        })
    }
}

/// Fraction of cells whose decoded decision (decided set, background flag)
/// is the same under both probability lists.
pub fn decode_agreement(a: &[Vec<f32>], b: &[Vec<f32>], layout: LabelLayout, theta: f32) -> Result<f64, BenchError> {
    if a.len() != b.len() {
        return Err(BenchError::Protocol(format!("{} vs {} images", a.len(), b.len())));
    }
    let mut same = 0usize;
    let mut total = 0usize;
    for (pa, pb) in a.iter().zip(b) {
        let da = decode(pa, layout, theta)?;
        let db = decode(pb, layout, theta)?;
        for (x, y) in da.iter().zip(&db) {
            total += 1;
            if x.decided == y.decided && x.is_background == y.is_background {
                same += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { same as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yolicnet::Mode;
    use proptest::prelude::*;

    fn model() -> YolicModel<f32> {
        let mut m: YolicModel<f32> = build_model(&ModelSpec::tiny(8, 32), 3).unwrap();
        m.forward(&Tensor::full(&[2, 3, 32, 32], 0.4), Mode::Train).unwrap();
        m
    }

    #[test]
    fn rounding_definition() {
        let scale = tensor_scale(&[1.27, -0.3]);
        assert!((scale - 0.01).abs() < 1e-9);
        assert_eq!(quantize_values(&[0.5, 1.27, -1.27], scale), vec![50, 127, -127]);
    }

    #[test]
    fn zero_tensor_uses_unit_scale() {
        assert_eq!(tensor_scale(&[0.0; 4]), 1.0);
        let q = QTensor::quantize("w", &Tensor::zeros(&[2, 2]));
        assert_eq!(q.dequantize(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn zero_weights_give_identical_outputs() {
        let mut m = model();
        m.map_weights(|_, w| w.fill(0.0));
        let q = quantize_int8(&m, "g");
        let x = Tensor::full(&[1, 3, 32, 32], 0.2);
        let a = m.infer(&x).unwrap().probs;
        let b = q.infer(&x).unwrap().probs;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn quantized_outputs_differ_but_stay_close() {
        let m = model();
        let q = quantize_int8(&m, "g");
        let x = Tensor::full(&[1, 3, 32, 32], 0.6);
        let a = m.infer(&x).unwrap().probs;
        let b = q.infer(&x).unwrap().probs;
        assert_ne!(a, b);
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| (u - v).abs() < 0.1));
    }

    #[test]
    fn file_round_trip() {
        let q = quantize_int8(&model(), "grid2x2");
        let bytes = q.save();
        let back = QuantizedModel::load(&bytes).unwrap();
        assert_eq!(back.save(), bytes);
        assert_eq!(back.config_name(), "grid2x2");
        let x = Tensor::full(&[1, 3, 32, 32], 0.1);
        assert_eq!(q.infer(&x).unwrap(), back.infer(&x).unwrap());
        assert!(QuantizedModel::load(&bytes[..bytes.len() - 3]).is_err());
        assert!(q.weight_bytes() < 4 * model().state().iter().map(|(_, t)| t.len()).sum::<usize>());
    }

    #[test]
    fn agreement_counts_cells() {
        let l = LabelLayout::new(2, 1);
        let a = vec![vec![0.9, 0.1, 0.1, 0.9]];
        let b = vec![vec![0.9, 0.1, 0.9, 0.1]];
        assert_eq!(decode_agreement(&a, &b, l, 0.5).unwrap(), 0.5);
        assert_eq!(decode_agreement(&a, &a, l, 0.5).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn error_within_half_scale(data in proptest::collection::vec(-3.0f32..3.0, 1..64)) {
            let t = Tensor::from_vec(&[data.len()], data.clone()).unwrap();
            let q = QTensor::quantize("w", &t);
            for (w, d) in data.iter().zip(q.dequantize().data()) {
                // exact bound plus the rounding of one f32 product
                prop_assert!((w - d).abs() <= q.scale / 2.0 + 2.0 * f32::EPSILON * w.abs());
            }
        }

        #[test]
        fn requantizing_is_idempotent(data in proptest::collection::vec(-3.0f32..3.0, 1..64)) {
            let t = Tensor::from_vec(&[data.len()], data).unwrap();
            let q1 = QTensor::quantize("w", &t);
            let q2 = QTensor::quantize("w", &q1.dequantize());
            prop_assert_eq!(&q1.values, &q2.values);
            prop_assert!((q1.scale - q2.scale).abs() <= q1.scale * 1e-6);
        }
    }
}
