//! Cost accounting, latency measurement and INT8 post-training quantization.

use thiserror::Error;

use crate::decode::DecodeError;
use crate::nnkernel::KernelError;
use crate::yolicnet::NetError;

mod cost;
mod latency;
mod quant;

pub use cost::{cost_report, count_flops, count_params, CostReport, LayerCost, FLOP_CONVENTION};
pub use latency::{
    bench_latency, build_profile, percentile, summarize, BenchOptions, HostInfo, LatencyReport, Summary, MIN_RUNS,
    MIN_WARMUP,
};
pub use quant::{
    decode_agreement, quantize_int8, quantize_values, tensor_scale, FloatTensor, QTensor, QuantizedModel, Q8_MAGIC,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Protocol(String),
    #[error("quantized weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
