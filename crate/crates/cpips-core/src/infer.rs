//! Single-precision forward-only codec path.
//!
//! The coder-side runtime (encode, decode, distance, bench) runs in f32 with
//! weights rounded exactly as the CPWT file stores them, so results are
//! identical whether the model came from a file or from a live training
//! store. Training and gradient checks stay on the f64 tape.

use crate::kernels;
use crate::models::{DecoderModel, EncoderModel, HeadModel, ModelError, KERNEL, LEVELS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One feature map with explicit geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Feature {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

struct Conv {
    w: Vec<f32>,
    b: Vec<f32>,
    cout: usize,
}

struct Gdn {
    beta: Vec<f32>,
    gamma: Vec<f32>,
}

fn conv_from(store: &ParamStore, w: ParamId, b: ParamId, cout_dim: usize) -> Conv {
    Conv {
        w: store.value(w).to_f32(),
        b: store.value(b).to_f32(),
        cout: store.value(w).shape[cout_dim],
    }
}

enum Tail {
    None,
    Gdn(Gdn),
    Prelu(Vec<f32>),
}

struct EncLevel {
    conv1: Conv,
    prelu_mid: Vec<f32>,
    conv2: Conv,
    tail: Tail,
}

/// Codec-mode (GDN path) encoder in f32.
pub struct InferEncoder {
    levels: Vec<EncLevel>,
    pub latent_channels: usize,
}

struct DecLevel {
    deconv: Conv,
    prelu: Vec<f32>,
    conv: Conv,
    gdn: Option<Gdn>,
}

pub struct InferDecoder {
    levels: Vec<DecLevel>,
    pub latent_channels: usize,
}

/// Decoder taps e1..e4 plus the optional full-resolution reconstruction.
pub struct InferTaps {
    pub e: [Feature; 4],
    pub x_hat: Option<Feature>,
}

fn run_levels(levels: &[EncLevel], x: &Tensor) -> Result<Feature, ModelError> {
    let (h, w) = (x.shape[1], x.shape[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(ModelError::NotMultipleOf32 { h, w });
    }
    let mut cur = Feature {
        c: 3,
        h,
        w,
        data: x.to_f32(),
    };
    for level in levels {
        cur = apply_conv(&cur, &level.conv1, 1);
        cur.data = kernels::prelu_forward(&cur.data, cur.c, cur.h * cur.w, &level.prelu_mid);
        cur = apply_conv(&cur, &level.conv2, 2);
        match &level.tail {
            Tail::None => {}
            Tail::Gdn(g) => {
                let (y, _) =
                    kernels::gdn_forward(&cur.data, cur.c, cur.h * cur.w, &g.beta, &g.gamma, false);
                cur.data = y;
            }
            Tail::Prelu(a) => {
                cur.data = kernels::prelu_forward(&cur.data, cur.c, cur.h * cur.w, a);
            }
        }
    }
    Ok(cur)
}

impl InferEncoder {
    pub fn from_store(store: &ParamStore, model: &EncoderModel) -> Self {
        let ids = model.codec_param_ids();
        // layout per level: conv1.w, conv1.b, prelu, conv2.w, conv2.b [, beta, gamma]
        let mut levels = Vec::with_capacity(LEVELS);
        let mut it = ids.into_iter();
        for l in 0..LEVELS {
            let conv1 = conv_from(store, it.next().unwrap(), it.next().unwrap(), 0);
            let prelu_mid = store.value(it.next().unwrap()).to_f32();
            let conv2 = conv_from(store, it.next().unwrap(), it.next().unwrap(), 0);
            let tail = if l + 1 < LEVELS {
                Tail::Gdn(Gdn {
                    beta: store.value(it.next().unwrap()).to_f32(),
                    gamma: store.value(it.next().unwrap()).to_f32(),
                })
            } else {
                Tail::None
            };
            levels.push(EncLevel { conv1, prelu_mid, conv2, tail });
        }
        Self {
            levels,
            latent_channels: model.channels[LEVELS - 1],
        }
    }

    /// x is a planar f64 [3,H,W] tensor with 32-aligned extents.
    pub fn latent(&self, x: &Tensor) -> Result<Feature, ModelError> {
        run_levels(&self.levels, x)
    }
}

fn apply_conv(x: &Feature, conv: &Conv, stride: usize) -> Feature {
    let (out, oh, ow) = kernels::conv_forward(
        &x.data, x.c, x.h, x.w, &conv.w, conv.cout, KERNEL, stride, Some(&conv.b),
    );
    Feature { c: conv.cout, h: oh, w: ow, data: out }
}

fn apply_deconv(x: &Feature, conv: &Conv, stride: usize) -> Feature {
    let (out, oh, ow) = kernels::deconv_forward(
        &x.data, x.c, x.h, x.w, &conv.w, conv.cout, KERNEL, stride, Some(&conv.b),
    );
    Feature { c: conv.cout, h: oh, w: ow, data: out }
}

impl InferDecoder {
    pub fn from_store(store: &ParamStore, model: &DecoderModel) -> Self {
        let ids = model.param_ids();
        let mut levels = Vec::with_capacity(LEVELS);
        let mut it = ids.into_iter();
        for l in 0..LEVELS {
            let deconv = conv_from(store, it.next().unwrap(), it.next().unwrap(), 1);
            let prelu = store.value(it.next().unwrap()).to_f32();
            let conv = conv_from(store, it.next().unwrap(), it.next().unwrap(), 0);
            let gdn = if l + 1 < LEVELS {
                Some(Gdn {
                    beta: store.value(it.next().unwrap()).to_f32(),
                    gamma: store.value(it.next().unwrap()).to_f32(),
                })
            } else {
                None
            };
            levels.push(DecLevel { deconv, prelu, conv, gdn });
        }
        Self {
            levels,
            latent_channels: model.channels[LEVELS - 1],
        }
    }

    /// Runs the decoder over a (de)quantized latent. With `reconstruct`
    /// false the final full-resolution level is skipped — the metric path
    /// never touches pixels.
    pub fn taps(&self, y5_hat: &Feature, reconstruct: bool) -> Result<InferTaps, ModelError> {
        if y5_hat.c != self.latent_channels {
            return Err(ModelError::ChannelMismatch {
                got: y5_hat.c,
                expected: self.latent_channels,
            });
        }
        let mut cur = y5_hat.clone();
        let mut taps: Vec<Feature> = Vec::with_capacity(4);
        for (i, level) in self.levels.iter().enumerate() {
            let last = i + 1 == LEVELS;
            if last && !reconstruct {
                break;
            }
            cur = apply_deconv(&cur, &level.deconv, 2);
            cur.data = kernels::prelu_forward(&cur.data, cur.c, cur.h * cur.w, &level.prelu);
            cur = apply_conv(&cur, &level.conv, 1);
            if let Some(g) = &level.gdn {
                let (y, _) = kernels::gdn_forward(&cur.data, cur.c, cur.h * cur.w, &g.beta, &g.gamma, false);
                cur.data = y;
                taps.push(cur.clone());
            }
        }
        taps.reverse(); // e1..e4
        let e: [Feature; 4] = taps.try_into().map_err(|_| ModelError::ChannelMismatch {
            got: 0,
            expected: 4,
        })?;
        Ok(InferTaps {
            e,
            x_hat: reconstruct.then_some(cur),
        })
    }
}

/// Classifier-path logits in f32 (used for fast held-out evaluation).
pub struct InferClassifier {
    levels: Vec<EncLevel>,
    head_w: Vec<f32>,
    head_b: Vec<f32>,
    classes: usize,
}

impl InferClassifier {
    pub fn from_store(store: &ParamStore, model: &EncoderModel, head: &HeadModel) -> Self {
        let ids = model.classifier_param_ids();
        let mut levels = Vec::with_capacity(LEVELS);
        let mut it = ids.into_iter();
        for l in 0..LEVELS {
            let conv1 = conv_from(store, it.next().unwrap(), it.next().unwrap(), 0);
            let prelu_mid = store.value(it.next().unwrap()).to_f32();
            let conv2 = conv_from(store, it.next().unwrap(), it.next().unwrap(), 0);
            let tail = if l + 1 < LEVELS {
                Tail::Prelu(store.value(it.next().unwrap()).to_f32())
            } else {
                Tail::None
            };
            levels.push(EncLevel { conv1, prelu_mid, conv2, tail });
        }
        Self {
            levels,
            head_w: store.value(head.w).to_f32(),
            head_b: store.value(head.b).to_f32(),
            classes: head.num_classes,
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>, ModelError> {
        let cur = run_levels(&self.levels, x)?;
        let sp = cur.h * cur.w;
        let pooled: Vec<f32> = (0..cur.c)
            .map(|ch| cur.data[ch * sp..(ch + 1) * sp].iter().sum::<f32>() / sp as f32)
            .collect();
        let mut out = self.head_b.clone();
        for k in 0..self.classes {
            let row = &self.head_w[k * cur.c..(k + 1) * cur.c];
            out[k] += row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f32>();
        }
        Ok(out)
    }
}
