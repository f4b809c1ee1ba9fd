//! Two-stage training: classifier pretraining, then joint
//! rate-distortion-classification-regularization training of the full codec.
//!
//! The combined objective is rate (bits per pixel) + lambda * 255^2 * MSE +
//! alpha * cross-entropy + beta * tap regularizer. Every run is
//! deterministic given the config seed.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::codec::{CodecError, CodecRuntime};
use crate::data::{self, ClassRecord, DataError};
use crate::density::{DensityError, DensityModel};
use crate::entropy;
use crate::infer::InferClassifier;
use crate::models::{
    ArchConfig, DecoderModel, EncoderMode, EncoderModel, HeadModel, ModelError,
};
use crate::ops::{self, OpError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::weights::{self, WeightEntry};

/// Pixel-domain MSE is scaled by 255^2 before lambda weighting so the
/// quality ladder keeps its conventional magnitudes.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}; training halted")]
    NonFinite { term: &'static str, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// quality index (as string key) -> lambda
    pub lambda_table: BTreeMap<String, f64>,
    pub learning_rate: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    pub crop_stage1: usize,
    pub crop_stage2: usize,
    /// Use the raw-sum form of the tap regularizer instead of per-level means.
    pub l_r_raw_sum: bool,
    /// Feed the decoder straight-through rounded latents instead of the
    /// noisy surrogate.
    pub straight_through: bool,
    pub hflip: bool,
    pub allow_cold_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut lambda_table = BTreeMap::new();
        lambda_table.insert("1".to_string(), 0.0018);
        lambda_table.insert("2".to_string(), 0.0067);
        lambda_table.insert("3".to_string(), 0.025);
        lambda_table.insert("4".to_string(), 0.0932);
        Self {
            alpha: 0.3,
            beta: 1.0,
            lambda_table,
            learning_rate: 1e-4,
            epochs_stage1: 20,
            epochs_stage2: 30,
            batch_size: 16,
            seed: 42,
            arch: ArchConfig::default(),
            crop_stage1: 32,
            crop_stage2: 64,
            l_r_raw_sum: false,
            straight_through: false,
            hflip: true,
            allow_cold_start: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(TrainError::Config("alpha and beta must be positive".into()));
        }
        if self.lambda_table.values().any(|&l| l <= 0.0) {
            return Err(TrainError::Config("every lambda must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.crop_stage2 % 32 != 0 || self.crop_stage2 == 0 {
            return Err(TrainError::Config("crop_stage2 must be a positive multiple of 32".into()));
        }
        if self.crop_stage1 % 32 != 0 || self.crop_stage1 == 0 {
            return Err(TrainError::Config("crop_stage1 must be a positive multiple of 32".into()));
        }
        Ok(())
    }

    pub fn lambda_for(&self, quality: u8) -> Result<f64, TrainError> {
        self.lambda_table
            .get(&quality.to_string())
            .copied()
            .ok_or_else(|| TrainError::Config(format!("quality index {quality} not in lambda table")))
    }

    /// Seed, with the CPIPS_SEED environment variable taking precedence.
    pub fn effective_seed(&self) -> u64 {
        std::env::var("CPIPS_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(self.seed)
    }
}

/// First-order adaptive-moment optimizer over an explicit parameter subset.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let m = ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            ids,
            m,
            v,
        }
    }

    /// One update from the accumulated gradients, then constraint projection.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let Some(grad) = store.value(id).grad.clone() else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.get_mut(id).tensor;
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.project_all();
    }
}

pub struct JointModels {
    pub encoder: EncoderModel,
    pub decoder: DecoderModel,
    pub head: HeadModel,
    pub density: DensityModel,
}

/// Registers the full stage-2 model set with fresh initialization.
pub fn register_joint(
    store: &mut ParamStore,
    arch: &ArchConfig,
    seed: u64,
) -> Result<JointModels, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let encoder = EncoderModel::register(store, arch, &mut rng)?;
    let decoder = DecoderModel::register(store, arch, &mut rng)?;
    let head = HeadModel::register(store, arch, &mut rng)?;
    let density = DensityModel::register(store, "density", arch.latent_channels()?, &mut rng)?;
    Ok(JointModels {
        encoder,
        decoder,
        head,
        density,
    })
}

/// Per-step report of every objective term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub rate_bpp: f64,
    pub rate_bits: f64,
    pub mse: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub total: f64,
}

/// One forward pass serving all four terms: the codec-path taps feed the
/// rate, distortion, regularizer, and (through the shared trunk) the
/// classifier head.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    models: &JointModels,
    batch: Tensor,
    targets: &[usize],
    lambda: f64,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(Var, LossBreakdown), TrainError> {
    let (n, _, h, w) = batch.as_nchw().map_err(|e| TrainError::Config(e.to_string()))?;
    let pixels = (n * h * w) as f64;
    let x = tape.constant(batch);
    let enc_taps = models.encoder.forward(tape, store, x, EncoderMode::Codec)?;
    let y5 = enc_taps.y[4];

    let noisy = entropy::quantize_train(tape, y5, rng)?;
    let rate_bits = models.density.rate_bits(tape, store, noisy)?;
    let rate_bpp = ops::scale(tape, rate_bits, 1.0 / pixels);

    let dec_input = if cfg.straight_through {
        let y = tape.value(y5);
        let delta = y.map(|v| v.round() - v);
        let delta = tape.constant(delta);
        ops::add(tape, y5, delta)?
    } else {
        noisy
    };
    let dec_taps = models.decoder.forward(tape, store, dec_input)?;
    let mse = ops::mse_mean(tape, dec_taps.x_hat, x)?;

    let logits = models.head.logits(tape, store, y5)?;
    let l_c = ops::softmax_cross_entropy(tape, logits, targets)?;

    let mut l_r: Option<Var> = None;
    for l in 0..4 {
        let mut term = ops::l1_mean(tape, dec_taps.e[l], enc_taps.y[l])?;
        if cfg.l_r_raw_sum {
            let numel = tape.value(dec_taps.e[l]).numel() as f64;
            term = ops::scale(tape, term, numel);
        }
        l_r = Some(match l_r {
            None => term,
            Some(acc) => ops::add(tape, acc, term)?,
        });
    }
    let l_r = l_r.expect("four levels");

    let weighted_d = ops::scale(tape, mse, lambda * DISTORTION_SCALE);
    let weighted_c = ops::scale(tape, l_c, cfg.alpha);
    let weighted_r = ops::scale(tape, l_r, cfg.beta);
    let total = ops::add(tape, rate_bpp, weighted_d)?;
    let total = ops::add(tape, total, weighted_c)?;
    let total = ops::add(tape, total, weighted_r)?;

    let breakdown = LossBreakdown {
        step,
        rate_bpp: tape.value(rate_bpp).item(),
        rate_bits: tape.value(rate_bits).item(),
        mse: tape.value(mse).item(),
        l_c: tape.value(l_c).item(),
        l_r: tape.value(l_r).item(),
        total: tape.value(total).item(),
    };
    for (term, v) in [
        ("rate", breakdown.rate_bpp),
        ("distortion", breakdown.mse),
        ("classification", breakdown.l_c),
        ("regularizer", breakdown.l_r),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { term, step });
        }
    }
    Ok((total, breakdown))
}

fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(
        seed ^ stage.wrapping_mul(0x9E3779B97F4A7C15)
            ^ (epoch as u64).wrapping_mul(0xD1B54A32D192ED03),
    )
}

fn load_batch(
    records: &[ClassRecord],
    idx: &[usize],
    crop: usize,
    hflip: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let n = idx.len();
    let mut data = Vec::with_capacity(n * 3 * crop * crop);
    let mut targets = Vec::with_capacity(n);
    for &i in idx {
        let img = data::load_image(&records[i].path)?;
        let t = img.to_tensor();
        let mut t = data::random_crop(&t, crop, rng);
        if hflip && rng.gen::<bool>() {
            t = data::hflip(&t);
        }
        data.extend_from_slice(&t.data);
        targets.push(records[i].label);
    }
    Ok((
        Tensor::new(vec![n, 3, crop, crop], data).expect("sized"),
        targets,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1_eval: Option<f64>,
}

pub struct PretrainOutput {
    pub store: ParamStore,
    pub encoder: EncoderModel,
    pub head: HeadModel,
    pub log: Vec<EpochStats>,
}

/// Stage 1: classifier pretraining on the PReLU path.
pub fn pretrain_classifier(
    train: &[ClassRecord],
    eval: &[ClassRecord],
    cfg: &TrainConfig,
) -> Result<PretrainOutput, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Config("empty training dataset".into()));
    }
    cfg.validate()?;
    let seed = cfg.effective_seed();
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let encoder = EncoderModel::register(&mut store, &cfg.arch, &mut rng)?;
    let head = HeadModel::register(&mut store, &cfg.arch, &mut rng)?;

    let mut ids = encoder.classifier_param_ids();
    ids.extend(head.param_ids());
    let mut adam = Adam::new(&store, ids, cfg.learning_rate);

    let mut log = Vec::with_capacity(cfg.epochs_stage1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs_stage1 {
        let mut rng = epoch_rng(seed, 1, epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, targets) = load_batch(train, chunk, cfg.crop_stage1, cfg.hflip, &mut rng)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let taps = encoder.forward(&mut tape, &store, x, EncoderMode::Classifier)?;
            let logits = head.logits(&mut tape, &store, taps.y[4])?;
            let loss = ops::softmax_cross_entropy(&mut tape, logits, &targets)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { term: "classification", step: epoch });
            }
            losses.push(value);
            store.zero_grad();
            tape.backward_into(loss, &mut store)?;
            adam.step(&mut store);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let top1_eval = if eval.is_empty() {
            None
        } else {
            Some(eval_top1(&store, &encoder, &head, eval)?)
        };
        log.push(EpochStats { epoch, mean_loss, top1_eval });
    }
    Ok(PretrainOutput {
        store,
        encoder,
        head,
        log,
    })
}

/// Held-out top-1 accuracy on the fast classifier path.
pub fn eval_top1(
    store: &ParamStore,
    encoder: &EncoderModel,
    head: &HeadModel,
    records: &[ClassRecord],
) -> Result<f64, TrainError> {
    let clf = InferClassifier::from_store(store, encoder, head);
    let mut hits = 0usize;
    for r in records {
        let img = data::load_image(&r.path)?;
        let (padded, _) = data::pad_to_multiple(&img, 32);
        let logits = clf.logits(&padded)?;
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .expect("nonempty");
        if argmax == r.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

pub struct JointOutput {
    pub store: ParamStore,
    pub models: JointModels,
    pub log: Vec<LossBreakdown>,
}

/// Stage 2: joint rate-distortion-classification training initialized from
/// pretrained classifier weights (GDN, decoder, and density start fresh).
pub fn train_joint(
    train: &[ClassRecord],
    pretrained: Option<&[WeightEntry]>,
    cfg: &TrainConfig,
    quality: u8,
    max_steps: Option<usize>,
) -> Result<JointOutput, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Config("empty training dataset".into()));
    }
    cfg.validate()?;
    let lambda = cfg.lambda_for(quality)?;
    let seed = cfg.effective_seed();
    let mut store = ParamStore::new();
    let models = register_joint(&mut store, &cfg.arch, seed)?;
    match pretrained {
        Some(entries) => {
            weights::apply_entries(&mut store, entries, false)
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        None if !cfg.allow_cold_start => {
            return Err(TrainError::Config(
                "no pretrained weights supplied; pass allow_cold_start to train from scratch".into(),
            ));
        }
        None => {}
    }

    let mut ids = models.encoder.codec_param_ids();
    ids.extend(models.decoder.param_ids());
    ids.extend(models.head.param_ids());
    ids.extend(models.density.param_ids());
    let mut adam = Adam::new(&store, ids, cfg.learning_rate);

    let mut log = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'outer: for epoch in 0..cfg.epochs_stage2 {
        let mut rng = epoch_rng(seed, 2, epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, targets) = load_batch(train, chunk, cfg.crop_stage2, cfg.hflip, &mut rng)?;
            let mut tape = Tape::new();
            let (loss, breakdown) =
                total_loss(&mut tape, &store, &models, batch, &targets, lambda, cfg, step, &mut rng)?;
            store.zero_grad();
            tape.backward_into(loss, &mut store)?;
            adam.step(&mut store);
            log.push(breakdown);
            step += 1;
            if max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
        }
    }
    Ok(JointOutput { store, models, log })
}

/// Measured rate/distortion on held-out images through the real coder.
pub fn eval_rate_distortion(
    store: &ParamStore,
    records: &[ClassRecord],
    limit: usize,
) -> Result<(f64, f64), TrainError> {
    let runtime = CodecRuntime::from_store(store)?;
    let mut bpp_sum = 0.0;
    let mut mse_sum = 0.0;
    let used = records.len().min(limit).max(1);
    for r in records.iter().take(used) {
        let img = data::load_image(&r.path)?;
        let (bytes, stats) = runtime.encode_image(&img, 1)?;
        let out = runtime.decode_image(&bytes)?;
        bpp_sum += stats.bpp;
        let mse: f64 = img
            .data
            .iter()
            .zip(&out.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / img.data.len() as f64;
        mse_sum += mse;
    }
    Ok((bpp_sum / used as f64, mse_sum / used as f64))
}

/// Trailing moving average with the given window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    xs.iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(window - 1);
            let s: f64 = xs[lo..=i].iter().sum();
            s / (i - lo + 1) as f64
        })
        .collect()
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), std::io::Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
