//! Bit-exact range coder: 32-bit state, carry-less renormalization,
//! byte-aligned output, pure integer arithmetic.
//!
//! Symbols are passed as cumulative-frequency intervals [cum, cum+freq)
//! under a fixed power-of-two total (the probability precision). The last
//! interval of each table absorbs the division remainder so encoder and
//! decoder partition the range identically.

use thiserror::Error;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum RangeError {
    #[error("coded stream truncated at byte {position}")]
    Truncated { position: usize },
    #[error("zero-width interval (cum {cum}, freq {freq}, total {total})")]
    ZeroWidth { cum: u32, freq: u32, total: u32 },
}

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Narrows the state to the interval [cum, cum+freq) / total.
    /// `total` must be a power of two no larger than 2^16.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) -> Result<(), RangeError> {
        debug_assert!(total.is_power_of_two() && total <= BOT);
        if freq == 0 || cum + freq > total {
            return Err(RangeError::ZeroWidth { cum, freq, total });
        }
        let r = self.range / total;
        self.low = self.low.wrapping_add(r * cum);
        // the final interval takes the division remainder
        self.range = if cum + freq == total {
            self.range - r * cum
        } else {
            r * freq
        };
        self.renorm();
        Ok(())
    }

    fn renorm(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // carry-less: clip the range to the current BOT block
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flushes the state; the output is byte-aligned by construction.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, RangeError> {
        if bytes.len() < 4 {
            return Err(RangeError::Truncated { position: bytes.len() });
        }
        let code = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        Ok(Self {
            low: 0,
            range: u32::MAX,
            code,
            bytes,
            pos: 4,
        })
    }

    /// Scaled cumulative value of the next symbol; look it up in the CDF,
    /// then call [`Self::update`] with the found interval.
    pub fn decode_target(&self, total: u32) -> u32 {
        let r = self.range / total;
        (self.code.wrapping_sub(self.low) / r).min(total - 1)
    }

    pub fn update(&mut self, cum: u32, freq: u32, total: u32) -> Result<(), RangeError> {
        if freq == 0 || cum + freq > total {
            return Err(RangeError::ZeroWidth { cum, freq, total });
        }
        let r = self.range / total;
        self.low = self.low.wrapping_add(r * cum);
        self.range = if cum + freq == total {
            self.range - r * cum
        } else {
            r * freq
        };
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            let byte = *self
                .bytes
                .get(self.pos)
                .ok_or(RangeError::Truncated { position: self.pos })?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}
