use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::cellgeom::LabelLayout;
use crate::decode::{decode, DEFAULT_THETA};
use crate::nnkernel::Tensor;
use crate::yolicnet::YolicModel;

pub const MIN_RUNS: usize = 5;
pub const MIN_WARMUP: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
}

impl HostInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            runs: 20,
            warmup: 3,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub host: HostInfo,
    pub profile: String,
    pub threads: usize,
    pub input_size: usize,
    pub runs: usize,
    pub warmup: usize,
    /// Forward plus decode, per single image.
    pub total: Summary,
    pub decode: Summary,
    /// Every timed run including warmups, in order.
    pub samples_ms: Vec<f64>,
}

/// Linear interpolation between closest ranks of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Statistics over the samples that follow the first `warmup` runs.
pub fn summarize(samples: &[f64], warmup: usize) -> Summary {
    let mut kept: Vec<f64> = samples.iter().skip(warmup).copied().collect();
    kept.sort_by(f64::total_cmp);
    Summary {
        median_ms: percentile(&kept, 0.5),
        p90_ms: percentile(&kept, 0.9),
        min_ms: kept.first().copied().unwrap_or(f64::NAN),
        max_ms: kept.last().copied().unwrap_or(f64::NAN),
    }
}

pub fn build_profile() -> &'static str {
    if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    }
}

/// Times single-image forward + decode on a dedicated pool of `threads`
/// workers. Decode is also timed on its own.
pub fn bench_latency(model: &YolicModel<f32>, layout: LabelLayout, opts: &BenchOptions) -> Result<LatencyReport, BenchError> {
    if opts.runs < MIN_RUNS || opts.warmup < MIN_WARMUP {
        return Err(BenchError::Protocol(format!(
            "need at least {MIN_RUNS} runs and {MIN_WARMUP} warmups, got {} and {}",
            opts.runs, opts.warmup
        )));
    }
    if layout.n_outputs() != model.n_outputs() {
        return Err(BenchError::Protocol(format!(
            "layout has {} outputs, model {}",
            layout.n_outputs(),
            model.n_outputs()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| BenchError::Protocol(e.to_string()))?;
    let s = model.spec().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let input = Tensor::from_vec(&[1, 3, s, s], (0..3 * s * s).map(|_| rng.random::<f32>()).collect())?;
    let (samples, decode_samples) = pool.install(|| -> Result<(Vec<f64>, Vec<f64>), BenchError> {
        let mut total = Vec::new();
        let mut dec = Vec::new();
        for _ in 0..opts.warmup + opts.runs {
            let t0 = Instant::now();
            let out = model.infer(&input)?;
            let t1 = Instant::now();
            let preds = decode(out.probs.data(), layout, DEFAULT_THETA)?;
            let t2 = Instant::now();
            std::hint::black_box(preds);
            total.push((t2 - t0).as_secs_f64() * 1e3);
            dec.push((t2 - t1).as_secs_f64() * 1e3);
        }
        Ok((total, dec))
    })?;
    Ok(LatencyReport {
        host: HostInfo::current(),
        profile: build_profile().into(),
        threads: opts.threads.max(1),
        input_size: s,
        runs: opts.runs,
        warmup: opts.warmup,
        total: summarize(&samples, opts.warmup),
        decode: summarize(&decode_samples, opts.warmup),
        samples_ms: samples,
    })
}

impl LatencyReport {
    pub fn to_text(&self) -> String {
        format!(
            "host {} {} ({} cpus), {} build, {} threads, input {}x{}\n\
             runs {} after {} warmups\n\
             forward+decode  median {:.3} ms  p90 {:.3} ms  min {:.3} ms  max {:.3} ms\n\
             decode only     median {:.4} ms  p90 {:.4} ms\n",
            self.host.os,
            self.host.arch,
            self.host.logical_cpus,
            self.profile,
            self.threads,
            self.input_size,
            self.input_size,
            self.runs,
            self.warmup,
            self.total.median_ms,
            self.total.p90_ms,
            self.total.min_ms,
            self.total.max_ms,
            self.decode.median_ms,
            self.decode.p90_ms,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yolicnet::{build_model, ModelSpec};

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.5);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.9) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn median_falls_as_cold_runs_are_excluded() {
        // cold-start profile: slow first runs settling to a noisy plateau
        let samples = [40.0, 25.0, 14.0, 10.2, 10.0, 10.4, 9.9, 10.1, 10.3, 10.0];
        let medians: Vec<f64> = (0..=4).map(|w| summarize(&samples, w).median_ms).collect();
        assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
    }

    #[test]
    fn protocol_minimums() {
        let m: YolicModel<f32> = build_model(&ModelSpec::tiny(8, 32), 0).unwrap();
        let l = LabelLayout::new(4, 1);
        let short = BenchOptions { runs: 4, ..BenchOptions::default() };
        assert!(bench_latency(&m, l, &short).is_err());
        let cold = BenchOptions { warmup: 1, ..BenchOptions::default() };
        assert!(bench_latency(&m, l, &cold).is_err());
    }

    #[test]
    fn report_describes_context() {
        let m: YolicModel<f32> = build_model(&ModelSpec::tiny(8, 32), 0).unwrap();
        let opts = BenchOptions { runs: 5, warmup: 2, threads: 2, seed: 1 };
        let r = bench_latency(&m, LabelLayout::new(4, 1), &opts).unwrap();
        assert_eq!(r.samples_ms.len(), 7);
        assert_eq!((r.threads, r.input_size), (2, 32));
        assert!(r.host.logical_cpus >= 1);
        let t = r.total;
        assert!(t.min_ms <= t.median_ms && t.median_ms <= t.p90_ms && t.p90_ms <= t.max_ms);
        assert!(r.decode.median_ms <= r.total.median_ms);
        assert!(r.to_text().contains("threads"));
    }
}
