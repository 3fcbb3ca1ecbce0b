//! Cell-wise multi-label object localization.
//!
//! An image is classified against a fixed, ordered set of cells of interest
//! (rectangles or polygons). For `N` cells and `M` object classes the network
//! emits `N * (M + 1)` sigmoid outputs: one bit per class plus a background
//! bit per cell. Decoding is a per-cell threshold pass with background
//! precedence; no box regression or suppression step exists.
//!
//! Modules:
//! - [`cellgeom`]: cell shapes, configurations, rasterization, mirroring
//! - [`labelkit`]: per-cell labels, mask conversion, annotation files, synthetic data
//! - [`nnkernel`]: tensor kernels with analytic gradients
//! - [`yolicnet`]: the network, loss, training loop and weight files
//! - [`decode`]: threshold decoding and the prediction dump format
//! - [`evalkit`]: per-class and binary precision / recall / F1
//! - [`benchkit`]: parameter and FLOP accounting, latency, INT8 quantization

pub mod benchkit;
pub mod cellgeom;
pub mod decode;
pub mod evalkit;
pub mod imageio;
pub mod labelkit;
pub mod nnkernel;
pub mod presets;
pub mod yolicnet;
