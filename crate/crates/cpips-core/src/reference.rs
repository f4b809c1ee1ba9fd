//! Reference full-network perceptual distance: both images are pushed from
//! pixels through every encoder and decoder layer, normalized, and compared.
//!
//! This is the baseline a generic DNN metric pays per comparison. The
//! implementation is deliberately reference-grade — double precision and
//! direct nested-loop convolutions — and doubles as an independent check of
//! the production bitstream path, which must agree with it numerically
//! while being an order of magnitude cheaper.

use crate::metric::{normalize_channels, LayerFeat, MetricWeightsData};
use crate::models::{DecoderModel, EncoderModel, KERNEL, LEVELS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

struct RefConv {
    w: Vec<f64>,
    b: Vec<f64>,
    cout: usize,
}

struct RefEncLevel {
    conv1: RefConv,
    prelu_mid: Vec<f64>,
    conv2: RefConv,
    gdn: Option<(Vec<f64>, Vec<f64>)>,
}

struct RefDecLevel {
    deconv: RefConv,
    prelu: Vec<f64>,
    conv: RefConv,
    gdn: Option<(Vec<f64>, Vec<f64>)>,
}

pub struct ReferenceMetric {
    enc: Vec<RefEncLevel>,
    dec: Vec<RefDecLevel>,
    weights: MetricWeightsData,
    /// Per-channel coded support; quantized latents are clamped into it the
    /// same way the coder does.
    supports: Vec<(i64, i64)>,
}

fn vals(store: &ParamStore, id: ParamId) -> Vec<f64> {
    // parameters pass through f32, matching the serialized weights
    store.value(id).data.iter().map(|&v| (v as f32) as f64).collect()
}

fn conv_direct(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let k = KERNEL;
    let pad = (k - 1) / 2;
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                acc += x[ci * h * w + y as usize * w + xx as usize]
                                    * wgt[((co * cin + ci) * k + u) * k + v];
                            }
                        }
                    }
                }
                out[co * oh * ow + i * ow + j] = acc;
            }
        }
    }
    (out, oh, ow)
}

// transposed conv, output-centric gather; weights [cin, cout, k, k]
fn deconv_direct(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: &[f64],
    cout: usize,
) -> (Vec<f64>, usize, usize) {
    let k = KERNEL;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; cout * oh * ow];
    for m in 0..cout {
        for y in 0..oh {
            for z in 0..ow {
                let mut acc = bias[m];
                for ci in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let iy = y as isize - u as isize + 1;
                            let ix = z as isize - v as isize + 1;
                            if iy >= 0 && ix >= 0 && iy % 2 == 0 && ix % 2 == 0 {
                                let (i, j) = ((iy / 2) as usize, (ix / 2) as usize);
                                if i < h && j < w {
                                    acc += x[ci * h * w + i * w + j]
                                        * wgt[((ci * cout + m) * k + u) * k + v];
                                }
                            }
                        }
                    }
                }
                out[m * oh * ow + y * ow + z] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn prelu_direct(x: &mut [f64], c: usize, sp: usize, a: &[f64]) {
    for ch in 0..c {
        for s in 0..sp {
            let v = &mut x[ch * sp + s];
            if *v < 0.0 {
                *v *= a[ch];
            }
        }
    }
}

fn gdn_direct(x: &mut [f64], c: usize, sp: usize, beta: &[f64], gamma: &[f64]) {
    for s in 0..sp {
        let mut denom = vec![0.0; c];
        for i in 0..c {
            let mut acc = beta[i];
            for j in 0..c {
                let xj = x[j * sp + s];
                acc += gamma[i * c + j] * xj * xj;
            }
            denom[i] = acc.sqrt();
        }
        for i in 0..c {
            x[i * sp + s] /= denom[i];
        }
    }
}

impl ReferenceMetric {
    pub fn from_store(
        store: &ParamStore,
        encoder: &EncoderModel,
        decoder: &DecoderModel,
        weights: MetricWeightsData,
        supports: Vec<(i64, i64)>,
    ) -> Self {
        let conv = |it: &mut dyn Iterator<Item = ParamId>, cout_dim: usize| -> RefConv {
            let wid = it.next().expect("weight id");
            let cout = store.value(wid).shape[cout_dim];
            RefConv {
                w: vals(store, wid),
                b: vals(store, it.next().expect("bias id")),
                cout,
            }
        };
        let enc_ids = encoder.codec_param_ids();
        let mut it = enc_ids.into_iter();
        let mut enc = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let conv1 = conv(&mut it, 0);
            let prelu_mid = vals(store, it.next().expect("prelu"));
            let conv2 = conv(&mut it, 0);
            let gdn = (l + 1 < LEVELS).then(|| {
                (
                    vals(store, it.next().expect("beta")),
                    vals(store, it.next().expect("gamma")),
                )
            });
            enc.push(RefEncLevel { conv1, prelu_mid, conv2, gdn });
        }
        let dec_ids = decoder.param_ids();
        let mut it = dec_ids.into_iter();
        let mut dec = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let deconv = conv(&mut it, 1);
            let prelu = vals(store, it.next().expect("prelu"));
            let cv = conv(&mut it, 0);
            let gdn = (l + 1 < LEVELS).then(|| {
                (
                    vals(store, it.next().expect("beta")),
                    vals(store, it.next().expect("gamma")),
                )
            });
            dec.push(RefDecLevel { deconv, prelu, conv: cv, gdn });
        }
        Self {
            enc,
            dec,
            weights,
            supports,
        }
    }

    /// Normalized feature stack of one image: full encoder, quantization,
    /// full decoder (including the reconstruction level), normalization.
    pub fn features(&self, x: &Tensor) -> [LayerFeat; LEVELS] {
        let (mut h, mut w) = (x.shape[1], x.shape[2]);
        let mut cur = x.data.clone();
        let mut c = 3usize;
        for level in &self.enc {
            let (y, oh, ow) = conv_direct(&cur, c, h, w, &level.conv1.w, &level.conv1.b, level.conv1.cout, 1);
            cur = y;
            c = level.conv1.cout;
            h = oh;
            w = ow;
            prelu_direct(&mut cur, c, h * w, &level.prelu_mid);
            let (y, oh, ow) = conv_direct(&cur, c, h, w, &level.conv2.w, &level.conv2.b, level.conv2.cout, 2);
            cur = y;
            c = level.conv2.cout;
            h = oh;
            w = ow;
            if let Some((beta, gamma)) = &level.gdn {
                gdn_direct(&mut cur, c, h * w, beta, gamma);
            }
        }
        // quantize to the coded grid
        let per = h * w;
        for (ch, chunk) in cur.chunks_mut(per).enumerate() {
            let (lo, hi) = self.supports[ch];
            for v in chunk {
                *v = (v.round() as i64).clamp(lo, hi) as f64;
            }
        }
        let y5 = LayerFeat {
            c,
            h,
            w,
            data: normalize_channels(&cur, c, h, w),
        };
        let mut taps: Vec<LayerFeat> = Vec::with_capacity(LEVELS - 1);
        for level in &self.dec {
            let (y, oh, ow) = deconv_direct(&cur, c, h, w, &level.deconv.w, &level.deconv.b, level.deconv.cout);
            cur = y;
            c = level.deconv.cout;
            h = oh;
            w = ow;
            prelu_direct(&mut cur, c, h * w, &level.prelu);
            let (y, oh, ow) = conv_direct(&cur, c, h, w, &level.conv.w, &level.conv.b, level.conv.cout, 1);
            cur = y;
            c = level.conv.cout;
            h = oh;
            w = ow;
            if let Some((beta, gamma)) = &level.gdn {
                gdn_direct(&mut cur, c, h * w, beta, gamma);
                taps.push(LayerFeat {
                    c,
                    h,
                    w,
                    data: normalize_channels(&cur, c, h, w),
                });
            }
        }
        // taps are e4..e1; reorder to e1..e4 then append the bottleneck
        taps.reverse();
        let [e1, e2, e3, e4]: [LayerFeat; 4] = taps.try_into().ok().expect("four taps");
        [e1, e2, e3, e4, y5]
    }

    /// Full-pipeline distance between two padded images.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> f64 {
        let fa = self.features(a);
        let fb = self.features(b);
        let mut total = 0.0;
        for l in 0..LEVELS {
            let (la, lb) = (&fa[l], &fb[l]);
            let sp = la.h * la.w;
            let mut layer = 0.0;
            for ch in 0..la.c {
                let wc = self.weights.w[l][ch];
                let mut acc = 0.0;
                for s in 0..sp {
                    let d = la.data[ch * sp + s] - lb.data[ch * sp + s];
                    acc += d * d;
                }
                layer += wc * wc * acc;
            }
            total += layer / sp as f64;
        }
        total
    }
}
