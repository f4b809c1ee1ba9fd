//! The compressed-image container: a fixed 36-byte little-endian header
//! followed by the range-coded latent payload. The layout is documented in
//! FORMAT.md and covered by golden byte vectors in the tests.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CPIC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 36;

/// Dimension padding unit forced by the five stride-2 levels.
pub const PAD_MULTIPLE: u32 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported version {found} at offset 4")]
    UnsupportedVersion { found: u8 },
    #[error("truncated header: {got} bytes, need {HEADER_LEN}")]
    TruncatedHeader { got: usize },
    #[error("payload length {declared} exceeds remaining {available} bytes (offset 32)")]
    PayloadLength { declared: u32, available: usize },
    #[error("padded dims {padded_w}x{padded_h} inconsistent with original {original_w}x{original_h} (offset 14)")]
    DimInconsistency {
        original_w: u32,
        original_h: u32,
        padded_w: u32,
        padded_h: u32,
    },
    #[error("zero dimension at offset 6")]
    ZeroDimension,
    #[error("zero latent channel count at offset 22")]
    ZeroChannels,
    #[error("model hash mismatch: container {container:02x?}, loaded weights {loaded:02x?}")]
    ModelHashMismatch { container: [u8; 8], loaded: [u8; 8] },
}

/// Smallest multiple of 32 that is >= dim.
pub fn pad_dim(dim: u32) -> u32 {
    dim.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u8,
    pub quality_index: u8,
    pub original_width: u32,
    pub original_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub latent_channels: u16,
    pub model_hash: [u8; 8],
    pub payload_length: u32,
}

impl ContainerHeader {
    pub fn new(
        quality_index: u8,
        original_width: u32,
        original_height: u32,
        latent_channels: u16,
        model_hash: [u8; 8],
        payload_length: u32,
    ) -> Self {
        Self {
            version: VERSION,
            quality_index,
            original_width,
            original_height,
            padded_width: pad_dim(original_width),
            padded_height: pad_dim(original_height),
            latent_channels,
            model_hash,
            payload_length,
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.original_width == 0 || self.original_height == 0 {
            return Err(FormatError::ZeroDimension);
        }
        if self.latent_channels == 0 {
            return Err(FormatError::ZeroChannels);
        }
        if self.padded_width != pad_dim(self.original_width)
            || self.padded_height != pad_dim(self.original_height)
        {
            return Err(FormatError::DimInconsistency {
                original_w: self.original_width,
                original_h: self.original_height,
                padded_w: self.padded_width,
                padded_h: self.padded_height,
            });
        }
        Ok(())
    }

    /// Spatial extent of the coded latent plane.
    pub fn latent_extent(&self) -> (usize, usize) {
        (
            (self.padded_height / PAD_MULTIPLE) as usize,
            (self.padded_width / PAD_MULTIPLE) as usize,
        )
    }

    pub fn check_model_hash(&self, loaded: [u8; 8]) -> Result<(), FormatError> {
        if self.model_hash != loaded {
            return Err(FormatError::ModelHashMismatch {
                container: self.model_hash,
                loaded,
            });
        }
        Ok(())
    }
}

/// Serializes header + payload into the on-disk byte layout.
pub fn serialize(header: &ContainerHeader, payload: &[u8]) -> Result<Vec<u8>, FormatError> {
    header.validate()?;
    if header.payload_length as usize != payload.len() {
        return Err(FormatError::PayloadLength {
            declared: header.payload_length,
            available: payload.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(header.version);
    out.push(header.quality_index);
    out.extend_from_slice(&header.original_width.to_le_bytes());
    out.extend_from_slice(&header.original_height.to_le_bytes());
    out.extend_from_slice(&header.padded_width.to_le_bytes());
    out.extend_from_slice(&header.padded_height.to_le_bytes());
    out.extend_from_slice(&header.latent_channels.to_le_bytes());
    out.extend_from_slice(&header.model_hash);
    out.extend_from_slice(&header.payload_length.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Parses a container from untrusted bytes; never reads past the buffer.
pub fn parse(bytes: &[u8]) -> Result<(ContainerHeader, &[u8]), FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader { got: bytes.len() });
    }
    if bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("bounds checked"));
    let header = ContainerHeader {
        version,
        quality_index: bytes[5],
        original_width: u32_at(6),
        original_height: u32_at(10),
        padded_width: u32_at(14),
        padded_height: u32_at(18),
        latent_channels: u16::from_le_bytes([bytes[22], bytes[23]]),
        model_hash: bytes[24..32].try_into().expect("bounds checked"),
        payload_length: u32_at(32),
    };
    header.validate()?;
    let available = bytes.len() - HEADER_LEN;
    if header.payload_length as usize > available {
        return Err(FormatError::PayloadLength {
            declared: header.payload_length,
            available,
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + header.payload_length as usize];
    Ok((header, payload))
}
