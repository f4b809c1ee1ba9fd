//! cpips: train, encode, decode, and score images with the compressed-domain
//! perceptual metric.
//!
//! Exit codes: 0 success, 2 usage (clap), 3 config errors, 4 malformed
//! inputs (containers, images, manifests, weight files), 5 model-hash
//! binding mismatches, 1 anything else.

mod bench;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpips_core::codec::{CodecError, CodecRuntime};
use cpips_core::container::FormatError;
use cpips_core::data;
use cpips_core::metric::{self, MetricWeightsData};
use cpips_core::models::LEVELS;
use cpips_core::training::{self, TrainConfig};
use cpips_core::weights;

#[derive(Parser)]
#[command(name = "cpips", version, about = "learned image codec with a bitstream-domain perceptual metric")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage 1: pretrain the classifier path.
    Pretrain {
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Classification manifest (JSON-lines {"path","label"}).
        #[arg(long)]
        data: PathBuf,
        /// Optional held-out manifest for per-epoch top-1.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: joint rate-distortion-classification training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 weights (required unless --cold-start).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        quality: u8,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this many steps (smoke runs).
        #[arg(long)]
        max_steps: Option<usize>,
        /// Allow training without pretrained weights.
        #[arg(long)]
        cold_start: bool,
    },
    /// Compress an image into a container.
    Encode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 2)]
        quality: u8,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reconstruct an image from a container (crops to original dims).
    Decode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Perceptual distance between two containers; prints d0 on stdout.
    Distance {
        #[arg(long)]
        weights: PathBuf,
        /// Metric weights (unit weights when omitted).
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Train metric weights and the judgment network on 2AFC triplets.
    TrainMetric {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Score a judgment manifest; writes {n, accuracy, per_subset} JSON.
    #[command(name = "eval-2afc")]
    Eval2afc {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time the bitstream, pixel, and reference metric pipelines.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        metric: Option<PathBuf>,
        /// Directory of .ppm images (at least 2).
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        quality: u8,
        /// Measurement is single-threaded; recorded in the report.
        #[arg(long, default_value_t = true)]
        single_thread: bool,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-repetition CSV (method,rep,seconds is derivable from JSON;
        /// this emits method,mean,stddev rows).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump a container header as JSON.
    Inspect {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Format(String),
    HashMismatch(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Format(_) => 4,
            CliError::HashMismatch(_) => 5,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Format(m) | CliError::HashMismatch(m) | CliError::Other(m) => m,
        }
    }
}

fn classify_codec(e: CodecError) -> CliError {
    match e {
        CodecError::Format(FormatError::ModelHashMismatch { .. }) => {
            CliError::HashMismatch(e.to_string())
        }
        CodecError::Format(_) | CodecError::Weights(_) | CodecError::Data(_) => {
            CliError::Format(e.to_string())
        }
        other => CliError::Other(other.to_string()),
    }
}

fn classify_metric(e: metric::MetricError) -> CliError {
    match e {
        metric::MetricError::Codec(c) => classify_codec(c),
        metric::MetricError::EmptyJudgments => CliError::Config(e.to_string()),
        metric::MetricError::Data(_) => CliError::Format(e.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

fn classify_train(e: training::TrainError) -> CliError {
    match e {
        training::TrainError::Config(_) => CliError::Config(e.to_string()),
        training::TrainError::Data(_) => CliError::Format(e.to_string()),
        training::TrainError::Codec(c) => classify_codec(c),
        other => CliError::Other(other.to_string()),
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            TrainConfig::from_toml_str(&text).map_err(classify_train)
        }
    }
}

fn load_runtime(path: &PathBuf) -> Result<CodecRuntime, CliError> {
    CodecRuntime::from_weight_file(path).map_err(classify_codec)
}

fn load_metric_weights(
    path: &Option<PathBuf>,
    runtime: &CodecRuntime,
) -> Result<MetricWeightsData, CliError> {
    match path {
        None => {
            let channels = runtime
                .arch
                .scaled_channels()
                .map_err(|e| CliError::Other(e.to_string()))?;
            Ok(MetricWeightsData::ones(channels))
        }
        Some(p) => {
            let (entries, _) = weights::load_file(p).map_err(|e| CliError::Format(e.to_string()))?;
            let store = weights::entries_to_store(&entries)
                .map_err(|e| CliError::Format(e.to_string()))?;
            MetricWeightsData::from_store(&store).map_err(classify_metric)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Pretrain { config, data: data_path, eval, out, log } => {
            let cfg = load_config(&config)?;
            let records = data::load_class_manifest(&data_path, cfg.arch.num_classes)
                .map_err(|e| CliError::Format(e.to_string()))?;
            let eval_records = match &eval {
                Some(p) => data::load_class_manifest(p, cfg.arch.num_classes)
                    .map_err(|e| CliError::Format(e.to_string()))?,
                None => Vec::new(),
            };
            let result = training::pretrain_classifier(&records, &eval_records, &cfg)
                .map_err(classify_train)?;
            weights::save_file(&out, &result.store).map_err(|e| CliError::Other(e.to_string()))?;
            if let Some(p) = log {
                training::write_jsonl(&p, &result.log).map_err(io_err)?;
            }
            for e in &result.log {
                eprintln!(
                    "epoch {}: loss {:.4}{}",
                    e.epoch,
                    e.mean_loss,
                    e.top1_eval.map_or(String::new(), |t| format!(", top1 {:.3}", t))
                );
            }
            Ok(())
        }
        Cmd::Train { config, data: data_path, pretrained, quality, out, log, max_steps, cold_start } => {
            let mut cfg = load_config(&config)?;
            if cold_start {
                cfg.allow_cold_start = true;
            }
            let records = data::load_class_manifest(&data_path, cfg.arch.num_classes)
                .map_err(|e| CliError::Format(e.to_string()))?;
            let entries = match &pretrained {
                Some(p) => Some(
                    weights::load_file(p)
                        .map(|(e, _)| e)
                        .map_err(|e| CliError::Format(e.to_string()))?,
                ),
                None => None,
            };
            let result = training::train_joint(&records, entries.as_deref(), &cfg, quality, max_steps)
                .map_err(classify_train)?;
            weights::save_file(&out, &result.store).map_err(|e| CliError::Other(e.to_string()))?;
            if let Some(p) = log {
                training::write_jsonl(&p, &result.log).map_err(io_err)?;
            }
            if let Some(last) = result.log.last() {
                eprintln!(
                    "step {}: bpp {:.4}, mse {:.6}, l_c {:.4}, l_r {:.4}, total {:.4}",
                    last.step, last.rate_bpp, last.mse, last.l_c, last.l_r, last.total
                );
            }
            Ok(())
        }
        Cmd::Encode { weights: wpath, quality, input, output } => {
            let runtime = load_runtime(&wpath)?;
            let img = data::load_image(&input).map_err(|e| CliError::Format(e.to_string()))?;
            let (bytes, stats) = runtime.encode_image(&img, quality).map_err(classify_codec)?;
            std::fs::write(&output, &bytes).map_err(io_err)?;
            eprintln!(
                "{} -> {} bytes ({:.4} bpp, {} clamped symbols)",
                input.display(),
                bytes.len(),
                stats.bpp,
                stats.clamped_symbols
            );
            Ok(())
        }
        Cmd::Decode { weights: wpath, input, output } => {
            let runtime = load_runtime(&wpath)?;
            let bytes = std::fs::read(&input).map_err(io_err)?;
            let img = runtime.decode_image(&bytes).map_err(classify_codec)?;
            data::save_ppm(&output, &img).map_err(|e| CliError::Other(e.to_string()))?;
            Ok(())
        }
        Cmd::Distance { weights: wpath, metric: mpath, a, b } => {
            let runtime = load_runtime(&wpath)?;
            let mw = load_metric_weights(&mpath, &runtime)?;
            let bytes_a = std::fs::read(&a).map_err(io_err)?;
            let bytes_b = std::fs::read(&b).map_err(io_err)?;
            let d0 = metric::distance_from_bitstreams(&runtime, &mw, &bytes_a, &bytes_b)
                .map_err(classify_metric)?;
            println!("{d0}");
            Ok(())
        }
        Cmd::TrainMetric { weights: wpath, manifest, out, epochs, lr, batch, seed } => {
            let runtime = load_runtime(&wpath)?;
            let records = data::load_judgment_manifest(&manifest)
                .map_err(|e| CliError::Format(e.to_string()))?;
            let features = metric::judgment_features(&runtime, &records).map_err(classify_metric)?;
            let channels = runtime
                .arch
                .scaled_channels()
                .map_err(|e| CliError::Other(e.to_string()))?;
            let cfg = metric::MetricTrainConfig {
                epochs,
                learning_rate: lr,
                batch_size: batch,
                seed,
            };
            let result = metric::train_metric(&features, channels, &cfg).map_err(classify_metric)?;
            weights::save_file(&out, &result.store).map_err(|e| CliError::Other(e.to_string()))?;
            for (i, bce) in result.bce_log.iter().enumerate() {
                eprintln!("epoch {i}: bce {bce:.4}");
            }
            Ok(())
        }
        Cmd::Eval2afc { weights: wpath, metric: mpath, manifest, json } => {
            let runtime = load_runtime(&wpath)?;
            let mw = load_metric_weights(&mpath, &runtime)?;
            let records = data::load_judgment_manifest(&manifest)
                .map_err(|e| CliError::Format(e.to_string()))?;
            let features = metric::judgment_features(&runtime, &records).map_err(classify_metric)?;
            let items: Vec<(f64, f64, f64, Option<String>)> = features
                .iter()
                .map(|f| {
                    let (d0, d1) = metric::feature_distances(f, &mw);
                    (d0, d1, f.h, f.subset.clone())
                })
                .collect();
            let eval = metric::eval_2afc(&items);
            let text = serde_json::to_string_pretty(&eval).map_err(io_err)?;
            println!("{text}");
            if let Some(p) = json {
                std::fs::write(&p, &text).map_err(io_err)?;
            }
            Ok(())
        }
        Cmd::Bench { weights: wpath, metric: mpath, dir, reps, quality, single_thread, json, csv } => {
            let bytes = std::fs::read(&wpath).map_err(io_err)?;
            let entries =
                weights::bytes_to_entries(&bytes).map_err(|e| CliError::Format(e.to_string()))?;
            let store =
                weights::entries_to_store(&entries).map_err(|e| CliError::Format(e.to_string()))?;
            let runtime = CodecRuntime::from_weight_bytes(&bytes).map_err(classify_codec)?;
            let mw = load_metric_weights(&mpath, &runtime)?;
            let reference = bench::reference_for(&store, &runtime, &mw)
                .map_err(|e| CliError::Other(e.to_string()))?;
            let inputs = bench::prepare_inputs(&dir, &runtime, quality).map_err(|e| match e {
                bench::BenchError::EmptyDir(_) | bench::BenchError::NeedTwoImages(_) => {
                    CliError::Config(e.to_string())
                }
                other => CliError::Other(other.to_string()),
            })?;
            let report = bench::run_bench(&inputs, &runtime, &mw, &reference, reps, quality, single_thread)
                .map_err(|e| CliError::Other(e.to_string()))?;
            let text = serde_json::to_string_pretty(&report).map_err(io_err)?;
            println!("{text}");
            if let Some(p) = json {
                std::fs::write(&p, &text).map_err(io_err)?;
            }
            if let Some(p) = csv {
                let mut rows = String::from("method,mean_seconds,stddev_seconds\n");
                for (name, t) in [
                    ("bitstream", &report.bitstream),
                    ("pixels", &report.pixels),
                    ("reference", &report.reference),
                ] {
                    rows.push_str(&format!("{name},{},{}\n", t.mean_seconds, t.stddev_seconds));
                }
                std::fs::write(&p, rows).map_err(io_err)?;
            }
            Ok(())
        }
        Cmd::Inspect { input } => {
            let bytes = std::fs::read(&input).map_err(io_err)?;
            let (header, payload) =
                cpips_core::container::parse(&bytes).map_err(|e| CliError::Format(e.to_string()))?;
            let value = serde_json::json!({
                "version": header.version,
                "quality_index": header.quality_index,
                "original_width": header.original_width,
                "original_height": header.original_height,
                "padded_width": header.padded_width,
                "padded_height": header.padded_height,
                "latent_channels": header.latent_channels,
                "model_hash": header.model_hash.iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "payload_length": header.payload_length,
                "payload_bytes_present": payload.len(),
            });
            println!("{}", serde_json::to_string_pretty(&value).map_err(io_err)?);
            Ok(())
        }
    }
}

// keep LEVELS referenced so arch size stays a compile-time contract here
const _: () = assert!(LEVELS == 5);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
