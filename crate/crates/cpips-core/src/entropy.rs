//! Quantization, symbol grids derived from the learned density, and the
//! latent payload coder built on [`crate::range`].

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::density::DensityEval;
use crate::ops::{self, OpError};
use crate::range::{RangeDecoder, RangeEncoder, RangeError};
use crate::tensor::Tensor;

/// Widest integer support considered when locating density tails.
const SUPPORT_LIMIT: i64 = 1 << 14;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error(transparent)]
    Range(#[from] RangeError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("symbol count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("precision {0} outside supported range 8..=16")]
    BadPrecision(u8),
}

/// Rounds to nearest integer, ties away from zero.
pub fn quantize_infer(y: &[f64]) -> Vec<i64> {
    y.iter().map(|&v| v.round() as i64).collect()
}

/// Training surrogate: adds i.i.d. uniform noise in the open interval
/// (-1/2, 1/2).
pub fn quantize_train(tape: &mut Tape, y: Var, rng: &mut impl Rng) -> Result<Var, OpError> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| uniform_open(rng)).collect();
    let noise = tape.constant(Tensor::new(shape, noise).expect("sized"));
    ops::add(tape, y, noise)
}

/// Uniform draw from the open interval (-1/2, 1/2).
pub fn uniform_open(rng: &mut impl Rng) -> f64 {
    loop {
        let u = rng.gen::<f64>();
        if u != 0.0 {
            return u - 0.5;
        }
    }
}

/// Integer-coded CDF tables, one per latent channel.
///
/// `cdf[c]` has support_len+1 entries: cdf[0] = 0, strictly increasing,
/// last entry = 2^precision exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    pub precision: u8,
    pub k_min: Vec<i64>,
    pub cdf: Vec<Vec<u32>>,
}

impl SymbolGrid {
    pub fn total(&self) -> u32 {
        1 << self.precision
    }

    pub fn support(&self, channel: usize) -> (i64, i64) {
        let len = self.cdf[channel].len() - 1;
        (self.k_min[channel], self.k_min[channel] + len as i64 - 1)
    }

    pub fn channels(&self) -> usize {
        self.cdf.len()
    }
}

/// Chooses per-channel integer supports capturing all but `tail_mass` of the
/// density, then quantizes the CDF to integers summing to 2^precision with
/// every interval strictly positive. Deterministic given the density.
pub fn build_symbol_grid(
    density: &DensityEval,
    precision: u8,
) -> Result<SymbolGrid, EntropyError> {
    if !(8..=16).contains(&precision) {
        return Err(EntropyError::BadPrecision(precision));
    }
    let total = 1u32 << precision;
    let half_tail = density.tail_mass / 2.0;
    let mut k_min = Vec::with_capacity(density.channels);
    let mut cdfs = Vec::with_capacity(density.channels);
    for c in 0..density.channels {
        // walk outward until each tail holds at most half the budget
        let mut lo: i64 = 0;
        while lo > -SUPPORT_LIMIT && density.cdf(c, lo as f64 - 0.5) > half_tail {
            lo -= 1;
        }
        let mut hi: i64 = 0;
        while hi < SUPPORT_LIMIT && 1.0 - density.cdf(c, hi as f64 + 0.5) > half_tail {
            hi += 1;
        }
        let support = (hi - lo + 1) as usize;
        let mut pmf = vec![0.0f64; support];
        for (i, p) in pmf.iter_mut().enumerate() {
            let k = lo + i as i64;
            *p = density.cdf(c, k as f64 + 0.5) - density.cdf(c, k as f64 - 0.5);
        }
        // fold leftover tail mass into the edge bins
        pmf[0] += density.cdf(c, lo as f64 - 0.5);
        pmf[support - 1] += 1.0 - density.cdf(c, hi as f64 + 0.5);
        cdfs.push(quantize_pmf(&pmf, total));
        k_min.push(lo);
    }
    Ok(SymbolGrid {
        precision,
        k_min,
        cdf: cdfs,
    })
}

/// Integer CDF with strictly positive intervals summing to `total`.
fn quantize_pmf(pmf: &[f64], total: u32) -> Vec<u32> {
    let n = pmf.len();
    debug_assert!(n as u32 <= total);
    let mass: f64 = pmf.iter().sum();
    let mut freq: Vec<i64> = pmf
        .iter()
        .map(|&p| ((p / mass) * total as f64).round().max(1.0) as i64)
        .collect();
    let mut diff: i64 = total as i64 - freq.iter().sum::<i64>();
    while diff != 0 {
        if diff > 0 {
            // grow the largest bin
            let i = argmax(&freq);
            freq[i] += 1;
            diff -= 1;
        } else {
            // shrink the largest bin that can still spare mass
            let i = argmax(&freq);
            debug_assert!(freq[i] > 1);
            freq[i] -= 1;
            diff += 1;
        }
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freq {
        acc += f as u32;
        cdf.push(acc);
    }
    debug_assert_eq!(*cdf.last().unwrap(), total);
    cdf
}

fn argmax(v: &[i64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Encodes channel-major integer latents ([C, n] flattened). Out-of-support
/// values are clamped to the grid edge; the clamp count is returned.
pub fn encode_latent(
    symbols: &[i64],
    per_channel: usize,
    grid: &SymbolGrid,
) -> Result<(Vec<u8>, usize), EntropyError> {
    let expected = grid.channels() * per_channel;
    if symbols.len() != expected {
        return Err(EntropyError::CountMismatch {
            expected,
            got: symbols.len(),
        });
    }
    let mut enc = RangeEncoder::new();
    if per_channel == 0 {
        return Ok((enc.finish(), 0));
    }
    let total = grid.total();
    let mut clamped = 0usize;
    for (c, chunk) in symbols.chunks(per_channel).enumerate() {
        let (lo, hi) = grid.support(c);
        let cdf = &grid.cdf[c];
        for &k in chunk {
            let kc = k.clamp(lo, hi);
            if kc != k {
                clamped += 1;
            }
            let idx = (kc - lo) as usize;
            enc.encode(cdf[idx], cdf[idx + 1] - cdf[idx], total)?;
        }
    }
    Ok((enc.finish(), clamped))
}

/// Decodes `per_channel` symbols for every grid channel. Exact inverse of
/// [`encode_latent`] on its (clamped) output.
pub fn decode_latent(
    bytes: &[u8],
    per_channel: usize,
    grid: &SymbolGrid,
) -> Result<Vec<i64>, EntropyError> {
    let n = grid.channels() * per_channel;
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let total = grid.total();
    let mut dec = RangeDecoder::new(bytes)?;
    for c in 0..grid.channels() {
        let cdf = &grid.cdf[c];
        let lo = grid.k_min[c];
        for _ in 0..per_channel {
            let t = dec.decode_target(total);
            let idx = cdf.partition_point(|&v| v <= t) - 1;
            dec.update(cdf[idx], cdf[idx + 1] - cdf[idx], total)?;
            out.push(lo + idx as i64);
        }
    }
    Ok(out)
}

/// Ideal codelength in bits of `symbols` under the quantized grid model.
pub fn ideal_bits(symbols: &[i64], per_channel: usize, grid: &SymbolGrid) -> f64 {
    if per_channel == 0 {
        return 0.0;
    }
    let total = grid.total() as f64;
    let mut bits = 0.0;
    for (c, chunk) in symbols.chunks(per_channel).enumerate() {
        let (lo, hi) = grid.support(c);
        let cdf = &grid.cdf[c];
        for &k in chunk {
            let idx = (k.clamp(lo, hi) - lo) as usize;
            let p = (cdf[idx + 1] - cdf[idx]) as f64 / total;
            bits -= p.log2();
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{DensityEval, DensityModel};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn infer_quantize_rounds_ties_away_from_zero() {
        assert_eq!(quantize_infer(&[1.4, -2.6, 0.5]), vec![1, -3, 1]);
        assert_eq!(quantize_infer(&[-0.5, 2.5, -2.5]), vec![-1, 3, -3]);
    }

    #[test]
    fn train_noise_is_bounded_and_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        const N: usize = 1_000_000;
        const BINS: usize = 20;
        let mut hist = [0usize; BINS];
        for _ in 0..N {
            let u = uniform_open(&mut rng);
            assert!(u > -0.5 && u < 0.5);
            let b = (((u + 0.5) * BINS as f64) as usize).min(BINS - 1);
            hist[b] += 1;
        }
        // chi^2 against uniform; 19 dof, fail only below p = 0.01
        let expected = N as f64 / BINS as f64;
        let chi2: f64 = hist
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let critical = 36.1909; // chi^2_{0.99, 19}
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    fn demo_grid(channels: usize, seed: u64) -> (DensityEval, SymbolGrid) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let model = DensityModel::register(&mut store, "density", channels, &mut rng).unwrap();
        let eval = DensityEval::from_store(&store, &model);
        let grid = build_symbol_grid(&eval, 16).unwrap();
        (eval, grid)
    }

    #[test]
    fn grid_is_deterministic_and_normalized() {
        let (eval, grid) = demo_grid(4, 42);
        let again = build_symbol_grid(&eval, 16).unwrap();
        assert_eq!(grid, again);
        for c in 0..4 {
            assert_eq!(*grid.cdf[c].last().unwrap(), 1 << 16);
            assert_eq!(grid.cdf[c][0], 0);
            for w in grid.cdf[c].windows(2) {
                assert!(w[1] > w[0], "strictly increasing CDF");
            }
        }
        assert!(build_symbol_grid(&eval, 7).is_err());
        assert!(build_symbol_grid(&eval, 17).is_err());
    }

    #[test]
    fn grid_support_covers_distribution_tails() {
        // the freshly initialized density is a wide ramp; whatever its
        // shape, the chosen support must hold all but tail_mass of it
        let (eval, grid) = demo_grid(2, 9);
        for c in 0..2 {
            let (lo, hi) = grid.support(c);
            assert!(eval.cdf(c, lo as f64 - 0.5) <= eval.tail_mass / 2.0 + 1e-12);
            assert!(1.0 - eval.cdf(c, hi as f64 + 0.5) <= eval.tail_mass / 2.0 + 1e-12);
        }
    }

    #[test]
    fn empty_latent_round_trips_small() {
        let (_eval, grid) = demo_grid(2, 8);
        let (bytes, clamped) = encode_latent(&[], 0, &grid).unwrap();
        assert!(bytes.len() <= 8);
        assert_eq!(clamped, 0);
        assert_eq!(decode_latent(&bytes, 0, &grid).unwrap(), Vec::<i64>::new());
        assert_eq!(ideal_bits(&[], 0, &grid), 0.0);
    }

    #[test]
    fn latent_round_trip_with_clamping() {
        let (_eval, grid) = demo_grid(3, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let per = 64;
        let symbols: Vec<i64> = (0..3 * per).map(|_| rng.gen_range(-30i64..30)).collect();
        let (bytes, clamped) = encode_latent(&symbols, per, &grid).unwrap();
        let decoded = decode_latent(&bytes, per, &grid).unwrap();
        // decode returns the clamped symbols exactly
        let mut want = symbols.clone();
        for (c, chunk) in want.chunks_mut(per).enumerate() {
            let (lo, hi) = grid.support(c);
            for v in chunk {
                *v = (*v).clamp(lo, hi);
            }
        }
        assert_eq!(decoded, want);
        let n_clamped = symbols.iter().zip(&want).filter(|(a, b)| a != b).count();
        assert_eq!(clamped, n_clamped);
    }

    #[test]
    fn coding_stays_near_shannon_bound() {
        // 1e5 symbols from P = {0: 0.9, 1: 0.1}; H = 0.469 bits/symbol
        let pmf = [0.9, 0.1];
        let cdf = quantize_pmf(&pmf, 1 << 16);
        let grid = SymbolGrid {
            precision: 16,
            k_min: vec![0],
            cdf: vec![cdf],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let symbols: Vec<i64> = (0..100_000)
            .map(|_| if rng.gen::<f64>() < 0.9 { 0 } else { 1 })
            .collect();
        let (bytes, clamped) = encode_latent(&symbols, symbols.len(), &grid).unwrap();
        assert_eq!(clamped, 0);
        let measured_bits = bytes.len() as f64 * 8.0;
        let ideal = ideal_bits(&symbols, symbols.len(), &grid);
        assert!(
            measured_bits <= ideal * 1.01 + 64.0,
            "measured {measured_bits} vs ideal {ideal}"
        );
        let decoded = decode_latent(&bytes, symbols.len(), &grid).unwrap();
        assert_eq!(decoded, symbols);
    }

    #[test]
    fn degenerate_density_still_yields_valid_grid() {
        let pmf = [1.0];
        let cdf = quantize_pmf(&pmf, 1 << 12);
        assert_eq!(cdf, vec![0, 1 << 12]);
    }

    #[test]
    fn fair_coin_codelength_formula_is_exact() {
        // a model assigning P = 1/2 to each of two values prices 100
        // symbols at exactly 100 bits
        let grid = SymbolGrid {
            precision: 16,
            k_min: vec![0],
            cdf: vec![vec![0, 1 << 15, 1 << 16]],
        };
        let symbols: Vec<i64> = (0..100).map(|i| i % 2).collect();
        let bits = ideal_bits(&symbols, 100, &grid);
        assert_eq!(bits, 100.0);
    }

    #[test]
    fn gaussian_like_density_support_covers_four_sigma() {
        // logistic with s = 0.55 tracks a unit Gaussian; at tail mass 1e-4
        // the chosen support must contain [-4, 4]
        let eval = DensityEval::synthetic_logistic(2, 0.55, 1e-4);
        let grid = build_symbol_grid(&eval, 16).unwrap();
        for c in 0..2 {
            let (lo, hi) = grid.support(c);
            assert!(lo <= -4 && hi >= 4, "support [{lo}, {hi}] misses [-4, 4]");
        }
    }
}
