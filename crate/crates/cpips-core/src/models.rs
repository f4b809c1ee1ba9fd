//! The five-level encoder (codec/classifier dual path), the mirrored decoder
//! with intermediate feature taps, and the classifier head.
//!
//! Both encoder modes share every convolution and the mid-block PReLU; they
//! differ only in the block-final activation (PReLU on the classifier path,
//! GDN on the codec path). The innermost conv output y5 has no trailing
//! activation and feeds the quantizer directly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::ops::{self, OpError};
use crate::params::{Constraint, ParamError, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LEVELS: usize = 5;
pub const KERNEL: usize = 3;
pub const DEFAULT_CHANNELS: [usize; LEVELS] = [32, 64, 128, 256, 320];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {h}x{w} must have spatial dims that are multiples of 32")]
    NotMultipleOf32 { h: usize, w: usize },
    #[error("latent has {got} channels, model expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("scaled channel width fell below 4")]
    ScaleTooSmall,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Op(#[from] OpError),
}

/// Channel widths, head size, and the desk-scale width multiplier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub channels: [usize; LEVELS],
    pub num_classes: usize,
    /// Width multiplier as a rational (numerator, denominator).
    pub scale: (u32, u32),
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            num_classes: 1000,
            scale: (1, 1),
        }
    }
}

impl ArchConfig {
    pub fn with_scale(num: u32, den: u32) -> Self {
        Self {
            scale: (num, den),
            ..Self::default()
        }
    }

    /// Channel widths after applying the scale; each must stay >= 4.
    pub fn scaled_channels(&self) -> Result<[usize; LEVELS], ModelError> {
        let (num, den) = self.scale;
        let mut out = [0usize; LEVELS];
        for (o, &c) in out.iter_mut().zip(&self.channels) {
            *o = (c * num as usize) / den as usize;
            if *o < 4 {
                return Err(ModelError::ScaleTooSmall);
            }
        }
        Ok(out)
    }

    pub fn latent_channels(&self) -> Result<usize, ModelError> {
        Ok(self.scaled_channels()?[LEVELS - 1])
    }
}

/// Which block-final activation the encoder applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    Codec,
    Classifier,
}

/// Post-activation encoder features y1..y4 plus the raw bottleneck y5.
pub struct EncoderTaps {
    pub y: [Var; 5],
}

/// Decoder features e4..e1 (post-GDN) plus the reconstruction.
pub struct DecoderTaps {
    pub e: [Var; 4], // e[0] = e1 .. e[3] = e4
    pub x_hat: Var,
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

struct EncLevel {
    conv1: ConvIds,
    prelu_mid: ParamId,
    conv2: ConvIds,
    // levels 1..4 only
    prelu_out: Option<ParamId>,
    gdn_beta: Option<ParamId>,
    gdn_gamma: Option<ParamId>,
}

pub struct EncoderModel {
    pub channels: [usize; LEVELS],
    levels: Vec<EncLevel>,
}

struct DecLevel {
    deconv: ConvIds,
    prelu: ParamId,
    conv: ConvIds,
    // absent on the final (full-resolution) level
    gdn_beta: Option<ParamId>,
    gdn_gamma: Option<ParamId>,
}

pub struct DecoderModel {
    pub channels: [usize; LEVELS],
    levels: Vec<DecLevel>, // index 0 = level 5 (innermost) .. index 4 = level 1
}

pub struct HeadModel {
    pub w: ParamId,
    pub b: ParamId,
    pub num_classes: usize,
}

pub const GDN_BETA_MIN: f64 = 1e-6;
pub const PRELU_INIT: f64 = 0.25;
pub const GDN_GAMMA_INIT: f64 = 0.1;

fn kaiming(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn register_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    rng: &mut impl Rng,
) -> Result<ConvIds, ParamError> {
    let w = store.register(
        &format!("{name}.w"),
        Tensor::new(vec![cout, cin, KERNEL, KERNEL], kaiming(rng, cin * KERNEL * KERNEL, cout * cin * KERNEL * KERNEL))
            .expect("sized"),
        Constraint::None,
    )?;
    let b = store.register(&format!("{name}.b"), Tensor::zeros(vec![cout]), Constraint::None)?;
    Ok(ConvIds { w, b })
}

// transposed conv weights are [cin, cout, k, k]
fn register_deconv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Result<ConvIds, ParamError> {
    let w = store.register(
        &format!("{name}.w"),
        Tensor::new(vec![cin, cout, KERNEL, KERNEL], kaiming(rng, cin * KERNEL * KERNEL, cin * cout * KERNEL * KERNEL))
            .expect("sized"),
        Constraint::None,
    )?;
    let b = store.register(&format!("{name}.b"), Tensor::zeros(vec![cout]), Constraint::None)?;
    Ok(ConvIds { w, b })
}

fn register_prelu(store: &mut ParamStore, name: &str, c: usize) -> Result<ParamId, ParamError> {
    store.register(&format!("{name}.a"), Tensor::full(vec![c], PRELU_INIT), Constraint::None)
}

fn register_gdn(
    store: &mut ParamStore,
    name: &str,
    c: usize,
) -> Result<(ParamId, ParamId), ParamError> {
    let beta = store.register(
        &format!("{name}.beta"),
        Tensor::full(vec![c], 1.0),
        Constraint::LowerBounded(GDN_BETA_MIN),
    )?;
    let mut gamma = vec![0.0; c * c];
    for i in 0..c {
        gamma[i * c + i] = GDN_GAMMA_INIT;
    }
    let gamma = store.register(
        &format!("{name}.gamma"),
        Tensor::new(vec![c, c], gamma).expect("sized"),
        Constraint::NonNegative,
    )?;
    Ok((beta, gamma))
}

impl EncoderModel {
    pub fn register(
        store: &mut ParamStore,
        arch: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let channels = arch.scaled_channels()?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let cin = if l == 0 { 3 } else { channels[l - 1] };
            let c = channels[l];
            let conv1 = register_conv(store, &format!("enc.conv_{}_1", l + 1), c, cin, rng)?;
            let prelu_mid = register_prelu(store, &format!("enc.prelu_{}_1", l + 1), c)?;
            let conv2 = register_conv(store, &format!("enc.conv_{}_2", l + 1), c, c, rng)?;
            let (prelu_out, gdn_beta, gdn_gamma) = if l + 1 < LEVELS {
                let p = register_prelu(store, &format!("enc.prelu_{}_2", l + 1), c)?;
                let (beta, gamma) = register_gdn(store, &format!("enc.gdn_{}", l + 1), c)?;
                (Some(p), Some(beta), Some(gamma))
            } else {
                (None, None, None)
            };
            levels.push(EncLevel {
                conv1,
                prelu_mid,
                conv2,
                prelu_out,
                gdn_beta,
                gdn_gamma,
            });
        }
        Ok(Self { channels, levels })
    }

    pub fn bind(store: &ParamStore, arch: &ArchConfig) -> Result<Self, ModelError> {
        let channels = arch.scaled_channels()?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let conv = |n: String| -> Result<ConvIds, ParamError> {
                Ok(ConvIds {
                    w: store.id(&format!("{n}.w"))?,
                    b: store.id(&format!("{n}.b"))?,
                })
            };
            let (prelu_out, gdn_beta, gdn_gamma) = if l + 1 < LEVELS {
                (
                    Some(store.id(&format!("enc.prelu_{}_2.a", l + 1))?),
                    Some(store.id(&format!("enc.gdn_{}.beta", l + 1))?),
                    Some(store.id(&format!("enc.gdn_{}.gamma", l + 1))?),
                )
            } else {
                (None, None, None)
            };
            levels.push(EncLevel {
                conv1: conv(format!("enc.conv_{}_1", l + 1))?,
                prelu_mid: store.id(&format!("enc.prelu_{}_1.a", l + 1))?,
                conv2: conv(format!("enc.conv_{}_2", l + 1))?,
                prelu_out,
                gdn_beta,
                gdn_gamma,
            });
        }
        Ok(Self { channels, levels })
    }

    /// Runs the shared trunk; `mode` picks the block-final activation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: EncoderMode,
    ) -> Result<EncoderTaps, ModelError> {
        let (_, _, h, w) = tape.value(x).as_nchw().map_err(|e| OpError::Dim(e.to_string()))?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::NotMultipleOf32 { h, w });
        }
        let mut cur = x;
        let mut taps = Vec::with_capacity(LEVELS);
        for level in &self.levels {
            let w1 = tape.param(store, level.conv1.w);
            let b1 = tape.param(store, level.conv1.b);
            cur = ops::conv2d(tape, cur, w1, b1, 1)?;
            let a = tape.param(store, level.prelu_mid);
            cur = ops::prelu(tape, cur, a)?;
            let w2 = tape.param(store, level.conv2.w);
            let b2 = tape.param(store, level.conv2.b);
            cur = ops::conv2d(tape, cur, w2, b2, 2)?;
            if let (Some(p), Some(beta), Some(gamma)) =
                (level.prelu_out, level.gdn_beta, level.gdn_gamma)
            {
                cur = match mode {
                    EncoderMode::Classifier => {
                        let a = tape.param(store, p);
                        ops::prelu(tape, cur, a)?
                    }
                    EncoderMode::Codec => {
                        let bv = tape.param(store, beta);
                        let gv = tape.param(store, gamma);
                        ops::gdn(tape, cur, bv, gv, false)?
                    }
                };
            }
            taps.push(cur);
        }
        Ok(EncoderTaps {
            y: taps.try_into().map_err(|_| OpError::Dim("tap count".into()))?,
        })
    }

    /// Parameter ids that participate in the codec-mode forward pass.
    pub fn codec_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for level in &self.levels {
            ids.extend([level.conv1.w, level.conv1.b, level.prelu_mid, level.conv2.w, level.conv2.b]);
            if let (Some(beta), Some(gamma)) = (level.gdn_beta, level.gdn_gamma) {
                ids.extend([beta, gamma]);
            }
        }
        ids
    }

    /// Parameter ids that participate in the classifier-mode forward pass.
    pub fn classifier_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for level in &self.levels {
            ids.extend([level.conv1.w, level.conv1.b, level.prelu_mid, level.conv2.w, level.conv2.b]);
            if let Some(p) = level.prelu_out {
                ids.push(p);
            }
        }
        ids
    }
}

impl DecoderModel {
    pub fn register(
        store: &mut ParamStore,
        arch: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let channels = arch.scaled_channels()?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in (0..LEVELS).rev() {
            // level l+1 in table terms: deconv keeps width, conv reduces to
            // the next-lower level's width (3 for the final level)
            let c = channels[l];
            let cout = if l == 0 { 3 } else { channels[l - 1] };
            let deconv = register_deconv(store, &format!("dec.deconv_{}_1", l + 1), c, c, rng)?;
            let prelu = register_prelu(store, &format!("dec.prelu_{}_1", l + 1), c)?;
            let conv = register_conv(store, &format!("dec.conv_{}_2", l + 1), cout, c, rng)?;
            let (gdn_beta, gdn_gamma) = if l > 0 {
                let (beta, gamma) = register_gdn(store, &format!("dec.gdn_{}", l + 1), cout)?;
                (Some(beta), Some(gamma))
            } else {
                (None, None)
            };
            levels.push(DecLevel {
                deconv,
                prelu,
                conv,
                gdn_beta,
                gdn_gamma,
            });
        }
        Ok(Self { channels, levels })
    }

    pub fn bind(store: &ParamStore, arch: &ArchConfig) -> Result<Self, ModelError> {
        let channels = arch.scaled_channels()?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in (0..LEVELS).rev() {
            let conv = |n: String| -> Result<ConvIds, ParamError> {
                Ok(ConvIds {
                    w: store.id(&format!("{n}.w"))?,
                    b: store.id(&format!("{n}.b"))?,
                })
            };
            let (gdn_beta, gdn_gamma) = if l > 0 {
                (
                    Some(store.id(&format!("dec.gdn_{}.beta", l + 1))?),
                    Some(store.id(&format!("dec.gdn_{}.gamma", l + 1))?),
                )
            } else {
                (None, None)
            };
            levels.push(DecLevel {
                deconv: conv(format!("dec.deconv_{}_1", l + 1))?,
                prelu: store.id(&format!("dec.prelu_{}_1.a", l + 1))?,
                conv: conv(format!("dec.conv_{}_2", l + 1))?,
                gdn_beta,
                gdn_gamma,
            });
        }
        Ok(Self { channels, levels })
    }

    /// Reconstructs from the (de)quantized bottleneck, emitting the
    /// tap after each level's GDN (ordering: deconv, PReLU, conv, GDN).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y5_hat: Var,
    ) -> Result<DecoderTaps, ModelError> {
        let (_, c, _, _) = tape
            .value(y5_hat)
            .as_nchw()
            .map_err(|e| OpError::Dim(e.to_string()))?;
        let expected = self.channels[LEVELS - 1];
        if c != expected {
            return Err(ModelError::ChannelMismatch { got: c, expected });
        }
        let mut cur = y5_hat;
        let mut taps = Vec::with_capacity(LEVELS - 1);
        for level in &self.levels {
            let wd = tape.param(store, level.deconv.w);
            let bd = tape.param(store, level.deconv.b);
            cur = ops::deconv2d(tape, cur, wd, bd, 2)?;
            let a = tape.param(store, level.prelu);
            cur = ops::prelu(tape, cur, a)?;
            let wc = tape.param(store, level.conv.w);
            let bc = tape.param(store, level.conv.b);
            cur = ops::conv2d(tape, cur, wc, bc, 1)?;
            if let (Some(beta), Some(gamma)) = (level.gdn_beta, level.gdn_gamma) {
                let bv = tape.param(store, beta);
                let gv = tape.param(store, gamma);
                cur = ops::gdn(tape, cur, bv, gv, false)?;
                taps.push(cur);
            }
        }
        // taps were produced innermost-first: e4, e3, e2, e1
        taps.reverse();
        Ok(DecoderTaps {
            e: taps.try_into().map_err(|_| OpError::Dim("tap count".into()))?,
            x_hat: cur,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for level in &self.levels {
            ids.extend([level.deconv.w, level.deconv.b, level.prelu, level.conv.w, level.conv.b]);
            if let (Some(beta), Some(gamma)) = (level.gdn_beta, level.gdn_gamma) {
                ids.extend([beta, gamma]);
            }
        }
        ids
    }
}

impl HeadModel {
    pub fn register(
        store: &mut ParamStore,
        arch: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let c5 = arch.latent_channels()?;
        let k = arch.num_classes;
        let w = store.register(
            "head.linear.w",
            Tensor::new(vec![k, c5], kaiming(rng, c5, k * c5)).expect("sized"),
            Constraint::None,
        )?;
        let b = store.register("head.linear.b", Tensor::zeros(vec![k]), Constraint::None)?;
        Ok(Self { w, b, num_classes: k })
    }

    pub fn bind(store: &ParamStore, arch: &ArchConfig) -> Result<Self, ModelError> {
        Ok(Self {
            w: store.id("head.linear.w")?,
            b: store.id("head.linear.b")?,
            num_classes: arch.num_classes,
        })
    }

    /// Pools the bottleneck and applies the linear layer.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y5: Var,
    ) -> Result<Var, ModelError> {
        let pooled = ops::avgpool_global(tape, y5)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(ops::linear(tape, pooled, w, b)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Classifier: encoder in classifier mode, pooled, through the head.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &EncoderModel,
    head: &HeadModel,
    x: Var,
) -> Result<Var, ModelError> {
    let taps = encoder.forward(tape, store, x, EncoderMode::Classifier)?;
    head.logits(tape, store, taps.y[4])
}
