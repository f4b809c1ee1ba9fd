//! End-to-end coding: pixels -> padded tensor -> latent -> symbols -> range
//! coded payload in a container, and back. Binds the container's model hash
//! to the exact weight bytes.

use std::path::Path;

use thiserror::Error;

use crate::container::{self, ContainerHeader, FormatError};
use crate::data::{self, DataError, ImageBuffer};
use crate::density::{DensityError, DensityEval, DensityModel};
use crate::entropy::{self, EntropyError, SymbolGrid};
use crate::infer::{Feature, InferDecoder, InferEncoder, InferTaps};
use crate::models::{ArchConfig, DecoderModel, EncoderModel, ModelError, LEVELS};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::weights::{self, WeightError};

pub const CODING_PRECISION: u8 = 16;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("weight file lacks parameter {0:?} needed to rebuild the model")]
    MissingParam(String),
    #[error("image dimensions {w}x{h} exceed the container limit")]
    TooLarge { w: u64, h: u64 },
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EncodeStats {
    pub payload_bytes: usize,
    pub bpp: f64,
    pub clamped_symbols: usize,
    pub rate_loss_bits: f64,
}

/// Frozen single-precision codec: everything needed to encode, decode and
/// score bitstreams.
pub struct CodecRuntime {
    pub arch: ArchConfig,
    pub encoder: InferEncoder,
    pub decoder: InferDecoder,
    pub density_eval: DensityEval,
    pub grid: SymbolGrid,
    pub model_hash: [u8; 8],
}

/// Reconstructs the channel layout from stored weight shapes.
pub fn arch_from_store(store: &ParamStore) -> Result<ArchConfig, CodecError> {
    let mut channels = [0usize; LEVELS];
    for (l, c) in channels.iter_mut().enumerate() {
        let name = format!("enc.conv_{}_2.w", l + 1);
        let id = store.id(&name).map_err(|_| CodecError::MissingParam(name))?;
        *c = store.value(id).shape[0];
    }
    let num_classes = match store.id("head.linear.w") {
        Ok(id) => store.value(id).shape[0],
        Err(_) => 0,
    };
    Ok(ArchConfig {
        channels,
        num_classes,
        scale: (1, 1),
    })
}

impl CodecRuntime {
    /// Builds the runtime from a live store (training side). The hash is the
    /// hash of the store's serialized bytes, so it matches a later save.
    pub fn from_store(store: &ParamStore) -> Result<Self, CodecError> {
        let bytes = weights::store_to_bytes(store);
        Self::from_parts(store, weights::model_hash(&bytes))
    }

    pub fn from_weight_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let entries = weights::bytes_to_entries(bytes)?;
        let store = weights::entries_to_store(&entries)?;
        Self::from_parts(&store, weights::model_hash(bytes))
    }

    pub fn from_weight_file(path: &Path) -> Result<Self, CodecError> {
        let bytes = std::fs::read(path).map_err(WeightError::Io)?;
        Self::from_weight_bytes(&bytes)
    }

    fn from_parts(store: &ParamStore, model_hash: [u8; 8]) -> Result<Self, CodecError> {
        let arch = arch_from_store(store)?;
        let enc_model = EncoderModel::bind(store, &arch)?;
        let dec_model = DecoderModel::bind(store, &arch)?;
        let density_model = DensityModel::bind(store, "density", arch.channels[LEVELS - 1])?;
        let density_eval = DensityEval::from_store(store, &density_model);
        let grid = entropy::build_symbol_grid(&density_eval, CODING_PRECISION)?;
        Ok(Self {
            arch,
            encoder: InferEncoder::from_store(store, &enc_model),
            decoder: InferDecoder::from_store(store, &dec_model),
            density_eval,
            grid,
            model_hash,
        })
    }

    /// Encoder forward + rounding + clamping to the coded support. This is
    /// the single source of latent symbols for both coding and the
    /// in-memory metric path, so the two stay identical.
    pub fn latent_symbols(&self, padded: &Tensor) -> Result<(Vec<i64>, Feature, usize), CodecError> {
        let y5 = self.encoder.latent(padded)?;
        let raw: Vec<f64> = y5.data.iter().map(|&v| v as f64).collect();
        let mut symbols = entropy::quantize_infer(&raw);
        let per = y5.h * y5.w;
        let mut clamped = 0usize;
        for (c, chunk) in symbols.chunks_mut(per).enumerate() {
            let (lo, hi) = self.grid.support(c);
            for v in chunk {
                let cl = (*v).clamp(lo, hi);
                if cl != *v {
                    clamped += 1;
                }
                *v = cl;
            }
        }
        Ok((symbols, y5, clamped))
    }

    pub fn encode_image(
        &self,
        img: &ImageBuffer,
        quality: u8,
    ) -> Result<(Vec<u8>, EncodeStats), CodecError> {
        if img.width as u64 > u32::MAX as u64 / 4 || img.height as u64 > u32::MAX as u64 / 4 {
            return Err(CodecError::TooLarge {
                w: img.width as u64,
                h: img.height as u64,
            });
        }
        let (padded, (ow, oh)) = data::pad_to_multiple(img, container::PAD_MULTIPLE);
        let (symbols, y5, clamped) = self.latent_symbols(&padded)?;
        let per = y5.h * y5.w;
        let (payload, _) = entropy::encode_latent(&symbols, per, &self.grid)?;
        let rate_loss_bits = self.density_eval.rate_bits_ints(&symbols, per);
        let header = ContainerHeader::new(
            quality,
            ow,
            oh,
            y5.c as u16,
            self.model_hash,
            payload.len() as u32,
        );
        let bytes = container::serialize(&header, &payload)?;
        let stats = EncodeStats {
            payload_bytes: payload.len(),
            bpp: payload.len() as f64 * 8.0 / (ow as f64 * oh as f64),
            clamped_symbols: clamped,
            rate_loss_bits,
        };
        Ok((bytes, stats))
    }

    /// Parses, checks the weight binding, and entropy-decodes the latent.
    pub fn decode_latent(&self, bytes: &[u8]) -> Result<(ContainerHeader, Feature), CodecError> {
        let (header, payload) = container::parse(bytes)?;
        header.check_model_hash(self.model_hash)?;
        let (lh, lw) = header.latent_extent();
        let per = lh * lw;
        let symbols = entropy::decode_latent(payload, per, &self.grid)?;
        let data: Vec<f32> = symbols.iter().map(|&s| s as f32).collect();
        let latent = Feature {
            c: header.latent_channels as usize,
            h: lh,
            w: lw,
            data,
        };
        Ok((header, latent))
    }

    /// Full reconstruction, cropped to the original dimensions.
    pub fn decode_image(&self, bytes: &[u8]) -> Result<ImageBuffer, CodecError> {
        let (header, y5) = self.decode_latent(bytes)?;
        let taps = self.decoder.taps(&y5, true)?;
        let x_hat = taps.x_hat.expect("reconstruction requested");
        let t = Tensor::new(
            vec![x_hat.c, x_hat.h, x_hat.w],
            x_hat.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("sized");
        let cropped = data::crop(&t, header.original_height as usize, header.original_width as usize);
        Ok(ImageBuffer::from_tensor(&cropped))
    }

    /// Decoder taps without pixel reconstruction (the metric path).
    pub fn taps_for_metric(&self, y5: &Feature) -> Result<InferTaps, CodecError> {
        Ok(self.decoder.taps(y5, false)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::HeadModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    pub(crate) fn random_runtime(seed: u64) -> (ParamStore, CodecRuntime) {
        let arch = ArchConfig {
            num_classes: 10,
            ..ArchConfig::with_scale(1, 4)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        EncoderModel::register(&mut store, &arch, &mut rng).unwrap();
        DecoderModel::register(&mut store, &arch, &mut rng).unwrap();
        HeadModel::register(&mut store, &arch, &mut rng).unwrap();
        DensityModel::register(&mut store, "density", arch.latent_channels().unwrap(), &mut rng)
            .unwrap();
        let runtime = CodecRuntime::from_store(&store).unwrap();
        (store, runtime)
    }

    fn random_image(w: u32, h: u32, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..3 * w as usize * h as usize).map(|_| rng.gen()).collect();
        ImageBuffer::new(w, h, data)
    }

    #[test]
    fn encode_decode_round_trip_is_deterministic() {
        let (_store, runtime) = random_runtime(11);
        let img = random_image(64, 64, 5);
        let (bytes1, stats) = runtime.encode_image(&img, 2).unwrap();
        let (bytes2, _) = runtime.encode_image(&img, 2).unwrap();
        assert_eq!(bytes1, bytes2, "encoding must be deterministic");
        assert!(stats.bpp > 0.0);

        let out1 = runtime.decode_image(&bytes1).unwrap();
        let out2 = runtime.decode_image(&bytes1).unwrap();
        assert_eq!(out1, out2, "decoding must be bit-identical across runs");
        assert_eq!((out1.width, out1.height), (64, 64));
    }

    #[test]
    fn decoded_latents_match_encoder_symbols_exactly() {
        let (_store, runtime) = random_runtime(13);
        let img = random_image(96, 64, 9);
        let (padded, _) = data::pad_to_multiple(&img, 32);
        let (symbols, _, _) = runtime.latent_symbols(&padded).unwrap();
        let (bytes, _) = runtime.encode_image(&img, 1).unwrap();
        let (_, y5) = runtime.decode_latent(&bytes).unwrap();
        let decoded: Vec<i64> = y5.data.iter().map(|&v| v as i64).collect();
        assert_eq!(decoded, symbols);
    }

    #[test]
    fn odd_sizes_pad_and_crop_back() {
        let (_store, runtime) = random_runtime(17);
        let img = random_image(65, 33, 3);
        let (bytes, _) = runtime.encode_image(&img, 3).unwrap();
        let (header, _) = runtime.decode_latent(&bytes).unwrap();
        assert_eq!((header.padded_width, header.padded_height), (96, 64));
        let out = runtime.decode_image(&bytes).unwrap();
        assert_eq!((out.width, out.height), (65, 33));
    }

    #[test]
    fn hash_mismatch_fails_before_payload_decode() {
        let (_s1, r1) = random_runtime(19);
        let (_s2, r2) = random_runtime(23);
        let img = random_image(32, 32, 1);
        let (bytes, _) = r1.encode_image(&img, 1).unwrap();
        match r2.decode_latent(&bytes) {
            Err(CodecError::Format(FormatError::ModelHashMismatch { .. })) => {}
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn payload_bits_stay_within_rate_loss_slack() {
        // criterion of the rate(Eq-style) vs coded-bits relationship at
        // module level: measured <= rate_loss + 2% + 64 bits
        let (_store, runtime) = random_runtime(29);
        for seed in 0..5 {
            let img = random_image(64, 64, 100 + seed);
            let (bytes, stats) = runtime.encode_image(&img, 1).unwrap();
            let measured_bits = (bytes.len() - crate::container::HEADER_LEN) as f64 * 8.0;
            assert!(
                measured_bits <= stats.rate_loss_bits * 1.02 + 64.0,
                "measured {measured_bits} vs rate {}",
                stats.rate_loss_bits
            );
        }
    }
}
