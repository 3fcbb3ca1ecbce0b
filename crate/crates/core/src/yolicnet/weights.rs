//! `yolic-weights/1`: a magic line, one JSON header line, then every state
//! tensor in build order as little-endian `f32`.

use serde::{Deserialize, Serialize};

use super::{build_model, ModelSpec, NetError, YolicModel};
use crate::nnkernel::Tensor;

pub const WEIGHTS_MAGIC: &str = "yolic-weights/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub spec: ModelSpec,
    pub config: String,
    pub n_outputs: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_weights(model: &YolicModel<f32>, config_name: &str) -> Vec<u8> {
    let state = model.state();
    let header = WeightsHeader {
        spec: model.spec().clone(),
        config: config_name.to_string(),
        n_outputs: model.n_outputs(),
        seed: model.seed(),
        tensors: state
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = format!("{WEIGHTS_MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for (_, t) in state {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

/// Reads a weights file. With `expected_outputs` set, a file whose head
/// width differs is refused.
pub fn load_weights(
    bytes: &[u8],
    expected_outputs: Option<usize>,
) -> Result<(YolicModel<f32>, WeightsHeader), NetError> {
    let werr = |m: String| NetError::Weights(m);
    let (magic, rest) = split_line(bytes).ok_or_else(|| werr("missing header".into()))?;
    if magic != WEIGHTS_MAGIC.as_bytes() {
        return Err(werr(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let (json, payload) = split_line(rest).ok_or_else(|| werr("header line is not terminated".into()))?;
    let header: WeightsHeader =
        serde_json::from_slice(json).map_err(|e| werr(format!("header: {e}")))?;
    if header.n_outputs != header.spec.n_outputs {
        return Err(werr(format!(
            "header says C = {} but its spec says {}",
            header.n_outputs, header.spec.n_outputs
        )));
    }
    if let Some(e) = expected_outputs {
        if e != header.n_outputs {
            return Err(werr(format!("expected C = {e}, file has C = {}", header.n_outputs)));
        }
    }
    let mut model: YolicModel<f32> = build_model(&header.spec, header.seed)?;
    let folded = header.tensors.iter().any(|t| t.name == "stem.bias");
    if folded {
        model = model.fold_batchnorm();
    }
    let expected_bytes: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected_bytes {
        return Err(NetError::Truncated {
            expected: expected_bytes,
            found: payload.len(),
        });
    }
    let mut state = model.state_mut();
    if state.len() != header.tensors.len() {
        return Err(werr(format!(
            "{} tensors listed, the spec builds {}",
            header.tensors.len(),
            state.len()
        )));
    }
    let mut offset = 0;
    for ((name, dst), entry) in state.iter_mut().zip(&header.tensors) {
        if *name != entry.name || dst.shape() != entry.shape.as_slice() {
            return Err(werr(format!(
                "tensor {} {:?} does not match {} {:?}",
                entry.name,
                entry.shape,
                name,
                dst.shape()
            )));
        }
        let n = dst.len();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        **dst = Tensor::from_vec(&entry.shape, data)?;
        offset += 4 * n;
    }
    drop(state);
    Ok((model, header))
}
