//! Learned factorized probability model over quantized latents.
//!
//! Each channel gets an independent monotone CDF built from a stack of small
//! affine-plus-nonlinearity stages (matrices made positive through softplus,
//! gains bounded by tanh), so the CDF is nondecreasing by construction. The
//! integer probability P(k) = CDF(k+1/2) - CDF(k-1/2) drives both the
//! differentiable rate loss and the symbol grids of the range coder.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::ops::{self, OpError};
use crate::params::{Constraint, ParamError, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Internal filter widths; endpoints are the scalar input/output.
pub const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
pub const NUM_STAGES: usize = FILTERS.len() - 1;

/// Per-symbol probability floor; keeps every coded symbol decodable.
pub const PROB_FLOOR: f64 = 1.0 / 32768.0; // 2^-15

#[derive(Debug, Error)]
pub enum DensityError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Op(#[from] OpError),
}

struct StageIds {
    matrix: ParamId,
    bias: ParamId,
    gain: Option<ParamId>,
}

/// Trainable density parameters for `channels` latent channels.
pub struct DensityModel {
    pub channels: usize,
    pub tail_mass: f64,
    stages: Vec<StageIds>,
}

fn stage_names(prefix: &str, i: usize) -> (String, String, String) {
    (
        format!("{prefix}.stage{i}.matrix"),
        format!("{prefix}.stage{i}.bias"),
        format!("{prefix}.stage{i}.gain"),
    )
}

impl DensityModel {
    /// Registers freshly initialized parameters (near-identity CDF ramp).
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, DensityError> {
        let scale = 10f64.powf(1.0 / NUM_STAGES as f64);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let (f_in, f_out) = (FILTERS[i], FILTERS[i + 1]);
            let (mname, bname, gname) = stage_names(prefix, i);
            // softplus(matrix) starts at 1/(scale * f_out)
            let init = (1.0 / (scale * f_out as f64)).exp_m1().ln();
            let matrix = store.register(
                &mname,
                Tensor::full(vec![channels, f_out, f_in], init),
                Constraint::None,
            )?;
            let bias_data: Vec<f64> = (0..channels * f_out).map(|_| rng.gen::<f64>() - 0.5).collect();
            let bias = store.register(
                &bname,
                Tensor::new(vec![channels, f_out], bias_data).expect("sized"),
                Constraint::None,
            )?;
            let gain = if i + 1 < NUM_STAGES {
                Some(store.register(
                    &gname,
                    Tensor::zeros(vec![channels, f_out]),
                    Constraint::None,
                )?)
            } else {
                None
            };
            stages.push(StageIds { matrix, bias, gain });
        }
        Ok(Self {
            channels,
            tail_mass: 1e-4,
            stages,
        })
    }

    /// Binds to already-stored parameters (e.g. after loading weights).
    pub fn bind(store: &ParamStore, prefix: &str, channels: usize) -> Result<Self, DensityError> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let (mname, bname, gname) = stage_names(prefix, i);
            stages.push(StageIds {
                matrix: store.id(&mname)?,
                bias: store.id(&bname)?,
                gain: if i + 1 < NUM_STAGES {
                    Some(store.id(&gname)?)
                } else {
                    None
                },
            });
        }
        Ok(Self {
            channels,
            tail_mass: 1e-4,
            stages,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.push(s.matrix);
            ids.push(s.bias);
            if let Some(g) = s.gain {
                ids.push(g);
            }
        }
        ids
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var, DensityError> {
        let mut u = u;
        for s in &self.stages {
            let m = tape.param(store, s.matrix);
            let b = tape.param(store, s.bias);
            let g = s.gain.map(|gid| tape.param(store, gid));
            u = ops::density_stage(tape, u, m, b, g)?;
        }
        Ok(u)
    }

    /// Differentiable total rate in bits for a latent tensor ([C,h,w] or
    /// [N,C,h,w]): sum of -log2 P(y_i), with P floored at [`PROB_FLOOR`].
    pub fn rate_bits(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var, DensityError> {
        let grouped = ops::group_by_channel(tape, y)?;
        let shape = tape.shape(grouped).to_vec();
        let half = tape.constant(Tensor::full(shape, 0.5));
        let upper = ops::add(tape, grouped, half)?;
        let lower = ops::sub(tape, grouped, half)?;
        let logit_hi = self.logits(tape, store, upper)?;
        let logit_lo = self.logits(tape, store, lower)?;
        let cdf_hi = ops::sigmoid(tape, logit_hi);
        let cdf_lo = ops::sigmoid(tape, logit_lo);
        let p = ops::sub(tape, cdf_hi, cdf_lo)?;
        let p = ops::clamp_min(tape, p, PROB_FLOOR);
        let lg = ops::log2(tape, p);
        let total = ops::sum(tape, lg);
        Ok(ops::scale(tape, total, -1.0))
    }
}

/// Frozen, serialization-exact view of the density used by the coder side.
///
/// Parameters pass through f32 (the weight-file dtype) so that a process
/// holding training weights and a process that loaded the file derive
/// identical CDF tables.
#[derive(Debug, Clone)]
pub struct DensityEval {
    pub channels: usize,
    pub tail_mass: f64,
    // per stage: matrices [C, f_out, f_in] (softplus applied), bias, gain (tanh applied)
    stages: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DensityEval {
    pub fn from_store(store: &ParamStore, model: &DensityModel) -> Self {
        let stages = model
            .stages
            .iter()
            .map(|s| {
                let m: Vec<f64> = store
                    .value(s.matrix)
                    .data
                    .iter()
                    .map(|&v| softplus(round_f32(v)))
                    .collect();
                let b: Vec<f64> = store.value(s.bias).data.iter().map(|&v| round_f32(v)).collect();
                let g = s.gain.map(|gid| {
                    store
                        .value(gid)
                        .data
                        .iter()
                        .map(|&v| round_f32(v).tanh())
                        .collect()
                });
                (m, b, g)
            })
            .collect();
        Self {
            channels: model.channels,
            tail_mass: model.tail_mass,
            stages,
        }
    }

    /// Pre-sigmoid logit of the CDF at x for one channel.
    pub fn logit(&self, channel: usize, x: f64) -> f64 {
        debug_assert!(channel < self.channels);
        let mut u = vec![x];
        for (i, (m, b, g)) in self.stages.iter().enumerate() {
            let (f_in, f_out) = (FILTERS[i], FILTERS[i + 1]);
            let mut v = vec![0.0; f_out];
            for fo in 0..f_out {
                let mut acc = b[channel * f_out + fo];
                for (fi, &uu) in u.iter().enumerate() {
                    acc += m[(channel * f_out + fo) * f_in + fi] * uu;
                }
                v[fo] = acc;
            }
            if let Some(g) = g {
                for (fo, vv) in v.iter_mut().enumerate() {
                    *vv += g[channel * f_out + fo] * vv.tanh();
                }
            }
            u = v;
        }
        u[0]
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.logit(channel, x))
    }

    /// P(quantized value == k), floored.
    pub fn prob_int(&self, channel: usize, k: i64) -> f64 {
        let p = self.cdf(channel, k as f64 + 0.5) - self.cdf(channel, k as f64 - 0.5);
        p.max(PROB_FLOOR)
    }

    /// Total -log2 probability in bits of an integer latent laid out
    /// channel-major ([C, n] per channel).
    pub fn rate_bits_ints(&self, symbols: &[i64], per_channel: usize) -> f64 {
        if per_channel == 0 {
            return 0.0;
        }
        let mut bits = 0.0;
        for (c, chunk) in symbols.chunks(per_channel).enumerate() {
            for &k in chunk {
                bits -= self.prob_int(c, k).log2();
            }
        }
        bits
    }
}

#[cfg(test)]
impl DensityEval {
    /// Test fixture: a pure logistic CDF sigmoid(x / s) per channel.
    /// s = 0.55 closely tracks a unit Gaussian.
    pub(crate) fn synthetic_logistic(channels: usize, s: f64, tail_mass: f64) -> Self {
        // single effective path: every stage is an identity-ish affine with
        // combined slope 1/s and no gains
        let slope = (1.0 / s).powf(1.0 / NUM_STAGES as f64);
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let (f_in, f_out) = (FILTERS[i], FILTERS[i + 1]);
                // route everything through filter 0
                let mut m = vec![0.0; channels * f_out * f_in];
                for c in 0..channels {
                    m[(c * f_out) * f_in] = slope;
                }
                let b = vec![0.0; channels * f_out];
                let g = (i + 1 < NUM_STAGES).then(|| vec![0.0; channels * f_out]);
                (m, b, g)
            })
            .collect();
        Self {
            channels,
            tail_mass,
            stages,
        }
    }
}
