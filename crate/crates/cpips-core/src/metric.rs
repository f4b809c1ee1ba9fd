//! Perceptual distance from compressed representations: channel-normalized
//! decoder taps e1..e4 and the dequantized bottleneck, weighted per channel
//! and averaged over space, summed across the five layers. Includes metric
//! weight training on 2AFC judgments, the judgment network, and the 2AFC
//! evaluation harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::codec::{CodecError, CodecRuntime};
use crate::data::{self, DataError, ImageBuffer, JudgmentPaths};
use crate::infer::Feature;
use crate::models::LEVELS;
use crate::ops::{self, OpError};
use crate::params::{Constraint, ParamError, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::training::Adam;

pub const NORM_EPSILON: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("empty judgment set")]
    EmptyJudgments,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A feature map in f64 with geometry, after channel normalization.
#[derive(Debug, Clone)]
pub struct LayerFeat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// At every spatial site the channel vector is scaled to unit norm;
/// all-zero sites stay zero (denominator floored at 1e-10).
pub fn normalize_channels(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let sp = h * w;
    let mut out = vec![0.0; c * sp];
    for s in 0..sp {
        let mut norm_sq = 0.0;
        for ch in 0..c {
            let v = data[ch * sp + s];
            norm_sq += v * v;
        }
        let denom = norm_sq.sqrt().max(NORM_EPSILON);
        for ch in 0..c {
            out[ch * sp + s] = data[ch * sp + s] / denom;
        }
    }
    out
}

fn normalize_feature(f: &Feature) -> LayerFeat {
    let data: Vec<f64> = f.data.iter().map(|&v| v as f64).collect();
    LayerFeat {
        c: f.c,
        h: f.h,
        w: f.w,
        data: normalize_channels(&data, f.c, f.h, f.w),
    }
}

/// The five normalized feature sets of one image: e1..e4 then the
/// dequantized bottleneck.
pub struct NormalizedTaps {
    pub layers: [LayerFeat; LEVELS],
}

/// Spatial mean of squared channel-weighted differences (inputs already
/// normalized; `w` has one entry per channel).
pub fn layer_distance(a: &LayerFeat, b: &LayerFeat, w: &[f64]) -> Result<f64, MetricError> {
    if a.c != b.c || a.h != b.h || a.w != b.w {
        return Err(MetricError::Dim(format!(
            "layer {}x{}x{} vs {}x{}x{}",
            a.c, a.h, a.w, b.c, b.h, b.w
        )));
    }
    if w.len() != a.c {
        return Err(MetricError::Dim(format!(
            "{} weights for {} channels",
            w.len(),
            a.c
        )));
    }
    let sp = a.h * a.w;
    let mut total = 0.0;
    for ch in 0..a.c {
        let wc = w[ch];
        let mut acc = 0.0;
        for s in 0..sp {
            let d = a.data[ch * sp + s] - b.data[ch * sp + s];
            acc += d * d;
        }
        total += wc * wc * acc;
    }
    Ok(total / sp as f64)
}

/// Per-channel nonnegative weights for the five layers (e1..e4, bottleneck).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricWeightsData {
    pub w: [Vec<f64>; LEVELS],
}

impl MetricWeightsData {
    /// Untrained default: all ones.
    pub fn ones(channels: [usize; LEVELS]) -> Self {
        Self {
            w: channels.map(|c| vec![1.0; c]),
        }
    }

    /// Loads metric.w1..metric.w5 from a store, rounding through f32 to
    /// match the serialized form.
    pub fn from_store(store: &ParamStore) -> Result<Self, MetricError> {
        let mut w: [Vec<f64>; LEVELS] = Default::default();
        for (i, slot) in w.iter_mut().enumerate() {
            let id = store.id(&format!("metric.w{}", i + 1))?;
            *slot = store.value(id).data.iter().map(|&v| (v as f32) as f64).collect();
        }
        Ok(Self { w })
    }
}

/// Sum of the five layer distances.
pub fn cpips_distance(
    a: &NormalizedTaps,
    b: &NormalizedTaps,
    weights: &MetricWeightsData,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for l in 0..LEVELS {
        total += layer_distance(&a.layers[l], &b.layers[l], &weights.w[l])?;
    }
    Ok(total)
}

/// Normalized taps from a dequantized latent: runs the decoder (no pixel
/// reconstruction) and normalizes every feature map plus the latent itself.
pub fn normalized_taps(runtime: &CodecRuntime, y5: &Feature) -> Result<NormalizedTaps, MetricError> {
    let taps = runtime.taps_for_metric(y5)?;
    let [e1, e2, e3, e4] = taps.e;
    Ok(NormalizedTaps {
        layers: [
            normalize_feature(&e1),
            normalize_feature(&e2),
            normalize_feature(&e3),
            normalize_feature(&e4),
            normalize_feature(y5),
        ],
    })
}

/// Distance between two encoded containers: parse, verify the weight
/// binding, entropy-decode, run decoder taps, and compare. Pixels are never
/// reconstructed.
pub fn distance_from_bitstreams(
    runtime: &CodecRuntime,
    weights: &MetricWeightsData,
    bytes_a: &[u8],
    bytes_b: &[u8],
) -> Result<f64, MetricError> {
    let (_, y5_a) = runtime.decode_latent(bytes_a)?;
    let (_, y5_b) = runtime.decode_latent(bytes_b)?;
    let ta = normalized_taps(runtime, &y5_a)?;
    let tb = normalized_taps(runtime, &y5_b)?;
    cpips_distance(&ta, &tb, weights)
}

/// In-memory pipeline: encode both images to (clamped) latent symbols and
/// compare taps. Matches [`distance_from_bitstreams`] on the same inputs.
pub fn distance_from_images(
    runtime: &CodecRuntime,
    weights: &MetricWeightsData,
    a: &ImageBuffer,
    b: &ImageBuffer,
) -> Result<f64, MetricError> {
    Ok(cpips_distance(
        &image_taps(runtime, a)?,
        &image_taps(runtime, b)?,
        weights,
    )?)
}

fn image_taps(runtime: &CodecRuntime, img: &ImageBuffer) -> Result<NormalizedTaps, MetricError> {
    let (padded, _) = data::pad_to_multiple(img, 32);
    let (symbols, y5, _) = runtime.latent_symbols(&padded)?;
    let dequant = Feature {
        c: y5.c,
        h: y5.h,
        w: y5.w,
        data: symbols.iter().map(|&s| s as f32).collect(),
    };
    normalized_taps(runtime, &dequant)
}

// --- metric training ---------------------------------------------------

/// Registration handles for the five weight vectors.
pub struct MetricWeightIds {
    pub w: [ParamId; LEVELS],
}

/// Two hidden layers of 32 units mapping a distance pair to a preference
/// logit; sigmoid keeps the prediction strictly inside (0,1).
pub struct JudgmentNetIds {
    fc0_w: ParamId,
    fc0_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

pub const JUDGMENT_HIDDEN: usize = 32;

pub fn register_metric(
    store: &mut ParamStore,
    channels: [usize; LEVELS],
    rng: &mut ChaCha20Rng,
) -> Result<(MetricWeightIds, JudgmentNetIds), MetricError> {
    let mut w: [ParamId; LEVELS] = [ParamId(0); LEVELS];
    for (i, (slot, c)) in w.iter_mut().zip(channels).enumerate() {
        *slot = store.register(
            &format!("metric.w{}", i + 1),
            Tensor::full(vec![c], 1.0),
            Constraint::NonNegative,
        )?;
    }
    use rand::Rng;
    let mut init = |fan_in: usize, n: usize| -> Vec<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * std).collect()
    };
    let h = JUDGMENT_HIDDEN;
    let net = JudgmentNetIds {
        fc0_w: store.register("metric.D.fc0.w", Tensor::new(vec![h, 2], init(2, 2 * h)).expect("sized"), Constraint::None)?,
        fc0_b: store.register("metric.D.fc0.b", Tensor::zeros(vec![h]), Constraint::None)?,
        fc1_w: store.register("metric.D.fc1.w", Tensor::new(vec![h, h], init(h, h * h)).expect("sized"), Constraint::None)?,
        fc1_b: store.register("metric.D.fc1.b", Tensor::zeros(vec![h]), Constraint::None)?,
        out_w: store.register("metric.D.out.w", Tensor::new(vec![1, h], init(h, h)).expect("sized"), Constraint::None)?,
        out_b: store.register("metric.D.out.b", Tensor::zeros(vec![1]), Constraint::None)?,
    };
    Ok((MetricWeightIds { w }, net))
}

pub fn bind_metric(store: &ParamStore) -> Result<(MetricWeightIds, JudgmentNetIds), MetricError> {
    let mut w: [ParamId; LEVELS] = [ParamId(0); LEVELS];
    for (i, slot) in w.iter_mut().enumerate() {
        *slot = store.id(&format!("metric.w{}", i + 1))?;
    }
    let net = JudgmentNetIds {
        fc0_w: store.id("metric.D.fc0.w")?,
        fc0_b: store.id("metric.D.fc0.b")?,
        fc1_w: store.id("metric.D.fc1.w")?,
        fc1_b: store.id("metric.D.fc1.b")?,
        out_w: store.id("metric.D.out.w")?,
        out_b: store.id("metric.D.out.b")?,
    };
    Ok((MetricWeightIds { w }, net))
}

fn judgment_logit(
    tape: &mut Tape,
    store: &ParamStore,
    net: &JudgmentNetIds,
    pairs: Var,
) -> Result<Var, MetricError> {
    let w0 = tape.param(store, net.fc0_w);
    let b0 = tape.param(store, net.fc0_b);
    let h0 = ops::linear(tape, pairs, w0, b0)?;
    let h0 = ops::tanh(tape, h0);
    let w1 = tape.param(store, net.fc1_w);
    let b1 = tape.param(store, net.fc1_b);
    let h1 = ops::linear(tape, h0, w1, b1)?;
    let h1 = ops::tanh(tape, h1);
    let w2 = tape.param(store, net.out_w);
    let b2 = tape.param(store, net.out_b);
    let z = ops::linear(tape, h1, w2, b2)?;
    let n = tape.value(z).shape[0];
    Ok(ops::reshape(tape, z, vec![n])?)
}

/// Predicted human preference for one distance pair; strictly inside (0,1).
pub fn judge(store: &ParamStore, d0: f64, d1: f64) -> Result<f64, MetricError> {
    let (_, net) = bind_metric(store)?;
    let mut tape = Tape::new();
    let pairs = tape.constant(Tensor::new(vec![1, 2], vec![d0, d1]).expect("sized"));
    let z = judgment_logit(&mut tape, store, &net, pairs)?;
    let zv = tape.value(z).item();
    Ok(1.0 / (1.0 + (-zv).exp()))
}

/// Per-record precomputed features: for every layer the per-channel mean
/// squared difference of normalized taps against the reference, for both
/// patches. Distances are then d = sum_l sum_c w_lc^2 * s_lc.
pub struct JudgmentFeatures {
    pub s0: [Vec<f64>; LEVELS],
    pub s1: [Vec<f64>; LEVELS],
    pub h: f64,
    pub subset: Option<String>,
}

fn per_channel_sq_diff(a: &LayerFeat, b: &LayerFeat) -> Vec<f64> {
    let sp = a.h * a.w;
    (0..a.c)
        .map(|ch| {
            let mut acc = 0.0;
            for s in 0..sp {
                let d = a.data[ch * sp + s] - b.data[ch * sp + s];
                acc += d * d;
            }
            acc / sp as f64
        })
        .collect()
}

/// Runs the frozen codec on each triplet once.
pub fn judgment_features(
    runtime: &CodecRuntime,
    records: &[JudgmentPaths],
) -> Result<Vec<JudgmentFeatures>, MetricError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let taps_ref = image_taps(runtime, &data::load_image(&rec.reference)?)?;
        let taps_p0 = image_taps(runtime, &data::load_image(&rec.p0)?)?;
        let taps_p1 = image_taps(runtime, &data::load_image(&rec.p1)?)?;
        let mut s0: [Vec<f64>; LEVELS] = Default::default();
        let mut s1: [Vec<f64>; LEVELS] = Default::default();
        for l in 0..LEVELS {
            s0[l] = per_channel_sq_diff(&taps_ref.layers[l], &taps_p0.layers[l]);
            s1[l] = per_channel_sq_diff(&taps_ref.layers[l], &taps_p1.layers[l]);
        }
        out.push(JudgmentFeatures {
            s0,
            s1,
            h: rec.h,
            subset: rec.subset.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MetricTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MetricTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 42,
        }
    }
}

pub struct MetricTrainOutput {
    pub store: ParamStore,
    /// Mean BCE per epoch.
    pub bce_log: Vec<f64>,
}

fn distance_var(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &MetricWeightIds,
    s: &[[Vec<f64>; LEVELS]],
    pick: impl Fn(&[Vec<f64>; LEVELS], usize) -> &Vec<f64>,
) -> Result<Var, MetricError> {
    let b = s.len();
    let mut total: Option<Var> = None;
    for l in 0..LEVELS {
        let c = pick(&s[0], l).len();
        let mut mat = Vec::with_capacity(b * c);
        for row in s {
            mat.extend_from_slice(pick(row, l));
        }
        let mat = Tensor::new(vec![b, c], mat).expect("sized");
        let w = tape.param(store, ids.w[l]);
        let w_sq = ops::mul(tape, w, w)?;
        let term = ops::matvec_const(tape, &mat, w_sq)?;
        total = Some(match total {
            None => term,
            Some(acc) => ops::add(tape, acc, term)?,
        });
    }
    Ok(total.expect("levels"))
}

/// Trains (w, D) with binary cross-entropy against human fractions h,
/// augmenting every record with its swapped pair ((d1,d0), 1-h). The
/// weights are projected to be nonnegative after every step.
pub fn train_metric(
    features: &[JudgmentFeatures],
    channels: [usize; LEVELS],
    cfg: &MetricTrainConfig,
) -> Result<MetricTrainOutput, MetricError> {
    if features.is_empty() {
        return Err(MetricError::EmptyJudgments);
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (wids, net) = register_metric(&mut store, channels, &mut rng)?;
    let mut all_ids: Vec<ParamId> = wids.w.to_vec();
    all_ids.extend([net.fc0_w, net.fc0_b, net.fc1_w, net.fc1_b, net.out_w, net.out_b]);
    let mut adam = Adam::new(&store, all_ids, cfg.learning_rate);

    // augmented index space: even = original, odd = swapped
    let mut order: Vec<usize> = (0..2 * features.len()).collect();
    let mut bce_log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut erng = ChaCha20Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xA24BAED4963EE407));
        order.shuffle(&mut erng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut s_pair: Vec<([Vec<f64>; LEVELS], [Vec<f64>; LEVELS])> = Vec::new();
            let mut targets = Vec::with_capacity(chunk.len());
            for &j in chunk {
                let f = &features[j / 2];
                if j % 2 == 0 {
                    s_pair.push((f.s0.clone(), f.s1.clone()));
                    targets.push(f.h);
                } else {
                    s_pair.push((f.s1.clone(), f.s0.clone()));
                    targets.push(1.0 - f.h);
                }
            }
            let s0s: Vec<[Vec<f64>; LEVELS]> = s_pair.iter().map(|p| p.0.clone()).collect();
            let s1s: Vec<[Vec<f64>; LEVELS]> = s_pair.iter().map(|p| p.1.clone()).collect();
            let mut tape = Tape::new();
            let d0 = distance_var(&mut tape, &store, &wids, &s0s, |row, l| &row[l])?;
            let d1 = distance_var(&mut tape, &store, &wids, &s1s, |row, l| &row[l])?;
            let pairs = ops::stack_cols(&mut tape, &[d0, d1])?;
            let z = judgment_logit(&mut tape, &store, &net, pairs)?;
            let loss = ops::bce_with_logits_mean(&mut tape, z, &targets)?;
            losses.push(tape.value(loss).item());
            store.zero_grad();
            tape.backward_into(loss, &mut store)?;
            adam.step(&mut store);
        }
        bce_log.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(MetricTrainOutput { store, bce_log })
}

/// Distances (d0, d1) of one precomputed record under given weights.
pub fn feature_distances(f: &JudgmentFeatures, weights: &MetricWeightsData) -> (f64, f64) {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for l in 0..LEVELS {
        for (c, &wc) in weights.w[l].iter().enumerate() {
            d0 += wc * wc * f.s0[l][c];
            d1 += wc * wc * f.s1[l][c];
        }
    }
    (d0, d1)
}

// --- 2AFC evaluation -----------------------------------------------------

/// LPIPS-style scoring: credit h when the metric prefers p1, 1-h when it
/// prefers p0, and half credit on exact ties.
pub fn score_2afc(d0: f64, d1: f64, h: f64) -> f64 {
    if d1 < d0 {
        h
    } else if d0 < d1 {
        1.0 - h
    } else {
        0.5
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetAccuracy {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Eval2afc {
    pub n: usize,
    pub accuracy: f64,
    pub per_subset: BTreeMap<String, SubsetAccuracy>,
}

/// Scores a set of (d0, d1, h, subset) items.
pub fn eval_2afc(items: &[(f64, f64, f64, Option<String>)]) -> Eval2afc {
    let mut total = 0.0;
    let mut subs: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (d0, d1, h, subset) in items {
        let s = score_2afc(*d0, *d1, *h);
        total += s;
        if let Some(tag) = subset {
            let e = subs.entry(tag.clone()).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += s;
        }
    }
    let n = items.len();
    Eval2afc {
        n,
        accuracy: if n == 0 { 0.0 } else { total / n as f64 },
        per_subset: subs
            .into_iter()
            .map(|(k, (cnt, sum))| {
                (
                    k,
                    SubsetAccuracy {
                        n: cnt,
                        accuracy: sum / cnt as f64,
                    },
                )
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_hand_case_and_degenerate_zero() {
        // site vector [3,4] -> [0.6, 0.8]
        let out = normalize_channels(&[3.0, 4.0], 2, 1, 1);
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
        // zero stays zero
        let out = normalize_channels(&[0.0, 0.0, 0.0], 3, 1, 1);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn normalization_yields_unit_sites_on_random_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        use rand::Rng;
        let (c, h, w) = (8, 5, 4);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let out = normalize_channels(&data, c, h, w);
        for s in 0..h * w {
            let norm: f64 = (0..c).map(|ch| out[ch * h * w + s].powi(2)).sum::<f64>().sqrt();
            assert!(
                norm == 0.0 || (norm - 1.0).abs() <= 1e-6,
                "site norm {norm}"
            );
        }
    }

    #[test]
    fn layer_distance_hand_case() {
        // C=1, H=W=1, w=[2], diff 0.5 -> (2*0.5)^2 = 1
        let a = LayerFeat { c: 1, h: 1, w: 1, data: vec![0.75] };
        let b = LayerFeat { c: 1, h: 1, w: 1, data: vec![0.25] };
        let d = layer_distance(&a, &b, &[2.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        // identical features -> 0
        assert_eq!(layer_distance(&a, &a, &[2.0]).unwrap(), 0.0);
        // mismatched shapes are an error
        let c = LayerFeat { c: 2, h: 1, w: 1, data: vec![0.0; 2] };
        assert!(layer_distance(&a, &c, &[2.0]).is_err());
    }

    #[test]
    fn scoring_fixture_matches_hand_computation() {
        let items = vec![
            (0.2, 0.1, 1.0, Some("x".to_string())), // metric prefers p1, h=1 -> 1.0
            (0.1, 0.2, 1.0, Some("x".to_string())), // metric prefers p0, h=1 -> 0.0
            (0.3, 0.3, 0.8, None),                  // tie -> 0.5
        ];
        let eval = eval_2afc(&items);
        assert_eq!(eval.n, 3);
        assert!((eval.accuracy - 0.5).abs() < 1e-15);
        assert_eq!(eval.per_subset["x"].n, 2);
        assert!((eval.per_subset["x"].accuracy - 0.5).abs() < 1e-15);
    }

    fn synthetic_features(n: usize, seed: u64, h: impl Fn(usize) -> f64) -> Vec<JudgmentFeatures> {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let channels = [8usize, 16, 32, 64, 80];
        (0..n)
            .map(|i| {
                let mut mk = || -> [Vec<f64>; 5] {
                    let mut out: [Vec<f64>; 5] = Default::default();
                    for (l, slot) in out.iter_mut().enumerate() {
                        *slot = (0..channels[l]).map(|_| rng.gen_range(0.0..0.02)).collect();
                    }
                    out
                };
                JudgmentFeatures {
                    s0: mk(),
                    s1: mk(),
                    h: h(i),
                    subset: None,
                }
            })
            .collect()
    }

    #[test]
    fn ambiguous_labels_drive_predictions_to_half() {
        // all-h = 0.5: the trained judgment net settles near 0.5 with BCE
        // near ln 2
        let feats = synthetic_features(64, 11, |_| 0.5);
        let cfg = MetricTrainConfig {
            epochs: 40,
            learning_rate: 3e-3,
            ..MetricTrainConfig::default()
        };
        let out = train_metric(&feats, [8, 16, 32, 64, 80], &cfg).unwrap();
        let last_bce = *out.bce_log.last().unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(
            (last_bce - ln2).abs() < 0.03,
            "BCE {last_bce} should approach ln 2 = {ln2}"
        );
        let weights = MetricWeightsData::from_store(&out.store).unwrap();
        let (d0, d1) = feature_distances(&feats[0], &weights);
        let h_hat = judge(&out.store, d0, d1).unwrap();
        assert!((h_hat - 0.5).abs() < 0.1, "prediction {h_hat} should be near 0.5");
        assert!(h_hat > 0.0 && h_hat < 1.0);
    }

    #[test]
    fn empty_judgment_set_is_an_error() {
        assert!(matches!(
            train_metric(&[], [8, 16, 32, 64, 80], &MetricTrainConfig::default()),
            Err(MetricError::EmptyJudgments)
        ));
    }

    #[test]
    fn swapped_pair_bce_is_invariant_on_augmented_sets() {
        // with swapped-pair augmentation the training set is closed under
        // ((d0,d1),h) -> ((d1,d0),1-h); total BCE is identical on the
        // swapped view of the same set
        let feats = synthetic_features(32, 13, |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        let out = train_metric(&feats, [8, 16, 32, 64, 80], &MetricTrainConfig::default()).unwrap();
        let weights = MetricWeightsData::from_store(&out.store).unwrap();
        let bce = |pairs: &[(f64, f64, f64)]| -> f64 {
            pairs
                .iter()
                .map(|&(d0, d1, h)| {
                    let p = judge(&out.store, d0, d1).unwrap();
                    -(h * p.ln() + (1.0 - h) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / pairs.len() as f64
        };
        // augmented set and its element-wise swap are the same multiset
        let mut augmented = Vec::new();
        for f in &feats {
            let (d0, d1) = feature_distances(f, &weights);
            augmented.push((d0, d1, f.h));
            augmented.push((d1, d0, 1.0 - f.h));
        }
        let swapped: Vec<(f64, f64, f64)> =
            augmented.iter().map(|&(d0, d1, h)| (d1, d0, 1.0 - h)).collect();
        let a = bce(&augmented);
        let b = bce(&swapped);
        assert!((a - b).abs() < 1e-12, "BCE {a} vs swapped {b}");
    }

    #[test]
    fn layer_distance_matches_direct_summation_oracle() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let (c, h, w) = (6, 3, 5);
        let mk = |rng: &mut ChaCha20Rng| LayerFeat {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let wts: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..2.0)).collect();
        let got = layer_distance(&a, &b, &wts).unwrap();
        let mut oracle = 0.0;
        for s in 0..h * w {
            for ch in 0..c {
                let d = wts[ch] * (a.data[ch * h * w + s] - b.data[ch * h * w + s]);
                oracle += d * d;
            }
        }
        oracle /= (h * w) as f64;
        assert!((got - oracle).abs() <= 1e-10 * oracle.max(1.0));
    }

    #[test]
    fn weight_scaling_squares_distance_and_preserves_ranking() {
        let a = LayerFeat { c: 3, h: 2, w: 2, data: (0..12).map(|i| i as f64 / 12.0).collect() };
        let b = LayerFeat { c: 3, h: 2, w: 2, data: (0..12).map(|i| (11 - i) as f64 / 12.0).collect() };
        let w1 = vec![1.0, 0.5, 2.0];
        let w3: Vec<f64> = w1.iter().map(|v| 3.0 * v).collect();
        let d1 = layer_distance(&a, &b, &w1).unwrap();
        let d3 = layer_distance(&a, &b, &w3).unwrap();
        assert!((d3 - 9.0 * d1).abs() < 1e-12 * d1.max(1.0));
    }
}
