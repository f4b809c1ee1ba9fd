//! Timing harness comparing three ways to compute the perceptual distance
//! of an (original, re-encoded-distorted) pair:
//!
//! (a) bitstream path — parse + entropy-decode + decoder taps only,
//! (b) pixel path — re-run the encoder, then the same tap pipeline,
//! (c) reference full-network metric — both images through every encoder
//!     and decoder layer in the reference-grade implementation.
//!
//! Wall times use the monotonic clock; a warm-up pass is discarded. All
//! three pipelines are single-threaded, so the ratios reflect the cost of
//! the computation, not parallelism.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use cpips_core::codec::CodecRuntime;
use cpips_core::data::{self, ImageBuffer};
use cpips_core::metric::{self, MetricWeightsData};
use cpips_core::reference::ReferenceMetric;
use cpips_core::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct MethodTiming {
    pub mean_seconds: f64,
    pub stddev_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub image_count: usize,
    pub pair_count: usize,
    pub repetitions: usize,
    pub quality: u8,
    pub single_thread: bool,
    pub bitstream: MethodTiming,
    pub pixels: MethodTiming,
    pub reference: MethodTiming,
    /// reference / bitstream — the full-pipeline over bitstream-path ratio.
    pub speedup_reference_over_bitstream: f64,
    /// pixels / bitstream — what re-running the encoder costs.
    pub speedup_pixels_over_bitstream: f64,
    /// Largest |d_bitstream - d_pixels| over all pairs.
    pub path_agreement: f64,
}

pub struct BenchInputs {
    /// (original, distorted, original container, distorted container)
    pairs: Vec<(ImageBuffer, ImageBuffer, Vec<u8>, Vec<u8>)>,
    image_count: usize,
}

#[derive(Debug)]
pub enum BenchError {
    EmptyDir(PathBuf),
    NeedTwoImages(usize),
    Core(String),
}

impl std::fmt::Display for BenchError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchError::EmptyDir(p) => write!(f, "no .ppm images found in {}", p.display()),
            BenchError::NeedTwoImages(n) => write!(f, "bench needs at least 2 images, found {n}"),
            BenchError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for BenchError {}

fn core_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Core(e.to_string())
}

/// Forms (original, re-encoded-distorted) pairs for every image in the dir.
pub fn prepare_inputs(
    dir: &Path,
    runtime: &CodecRuntime,
    quality: u8,
) -> Result<BenchInputs, BenchError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(core_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(BenchError::EmptyDir(dir.to_path_buf()));
    }
    if paths.len() < 2 {
        return Err(BenchError::NeedTwoImages(paths.len()));
    }
    let mut pairs = Vec::with_capacity(paths.len());
    for p in &paths {
        let original = data::load_image(p).map_err(core_err)?;
        let (bytes_a, _) = runtime.encode_image(&original, quality).map_err(core_err)?;
        let distorted = runtime.decode_image(&bytes_a).map_err(core_err)?;
        let (bytes_b, _) = runtime.encode_image(&distorted, quality).map_err(core_err)?;
        pairs.push((original, distorted, bytes_a, bytes_b));
    }
    Ok(BenchInputs {
        image_count: paths.len(),
        pairs,
    })
}

fn time_reps(reps: usize, mut f: impl FnMut() -> f64) -> (MethodTiming, f64) {
    // warm-up iteration, discarded
    let mut check = f();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        check = f();
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
    (
        MethodTiming {
            mean_seconds: mean,
            stddev_seconds: var.sqrt(),
        },
        check,
    )
}

/// Times the three pipelines over all pairs. One repetition scores every
/// pair once with each method.
pub fn run_bench(
    inputs: &BenchInputs,
    runtime: &CodecRuntime,
    weights: &MetricWeightsData,
    reference: &ReferenceMetric,
    reps: usize,
    quality: u8,
    single_thread: bool,
) -> Result<BenchReport, BenchError> {
    let reps = reps.max(1);

    // pre-pad pixel inputs once; the reference pipeline starts from padded
    // tensors just like the production encoder does
    let padded: Vec<(Tensor, Tensor)> = inputs
        .pairs
        .iter()
        .map(|(a, b, _, _)| (data::pad_to_multiple(a, 32).0, data::pad_to_multiple(b, 32).0))
        .collect();

    let (bitstream, d_bits) = time_reps(reps, || {
        let mut acc = 0.0;
        for (_, _, bytes_a, bytes_b) in &inputs.pairs {
            acc += metric::distance_from_bitstreams(runtime, weights, bytes_a, bytes_b)
                .expect("prepared containers decode");
        }
        acc
    });
    let (pixels, d_pix) = time_reps(reps, || {
        let mut acc = 0.0;
        for (a, b, _, _) in &inputs.pairs {
            acc += metric::distance_from_images(runtime, weights, a, b)
                .expect("prepared images encode");
        }
        acc
    });
    let (reference_t, _d_ref) = time_reps(reps, || {
        let mut acc = 0.0;
        for (a, b) in &padded {
            acc += reference.distance(a, b);
        }
        acc
    });

    Ok(BenchReport {
        image_count: inputs.image_count,
        pair_count: inputs.pairs.len(),
        repetitions: reps,
        quality,
        single_thread,
        speedup_reference_over_bitstream: reference_t.mean_seconds / bitstream.mean_seconds,
        speedup_pixels_over_bitstream: pixels.mean_seconds / bitstream.mean_seconds,
        path_agreement: (d_bits - d_pix).abs(),
        bitstream,
        pixels,
        reference: reference_t,
    })
}

/// Builds the reference metric for a runtime's weights.
pub fn reference_for(
    store: &cpips_core::params::ParamStore,
    runtime: &CodecRuntime,
    weights: &MetricWeightsData,
) -> Result<ReferenceMetric, BenchError> {
    let enc = cpips_core::models::EncoderModel::bind(store, &runtime.arch).map_err(core_err)?;
    let dec = cpips_core::models::DecoderModel::bind(store, &runtime.arch).map_err(core_err)?;
    let supports = (0..runtime.grid.channels())
        .map(|c| runtime.grid.support(c))
        .collect();
    Ok(ReferenceMetric::from_store(
        store,
        &enc,
        &dec,
        weights.clone(),
        supports,
    ))
}
