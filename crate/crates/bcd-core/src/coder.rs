//! Entropy coding of binary code tensors.
//!
//! A branch's -1/+1 code tensor is mapped to bits (+1 -> 1) and squeezed
//! with a context-adaptive binary arithmetic coder. The context of a bit is
//! (channel mod 4, left neighbour bit, above neighbour bit); out-of-bounds
//! neighbours read as 0. Each context keeps adaptive zero/one counts
//! (starting at one each, halved when their sum reaches a cap), quantized
//! to a 16-bit probability before every coding step, so encoder and decoder
//! stay in lockstep. Every tensor is coded as an independent segment: the
//! coder and the counts reset between branches.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of coding contexts: 4 channel classes x 2 left states x 2 above.
pub const CONTEXT_COUNT: usize = 16;

/// Adaptive counts halve once a context has seen this many bits.
const RESCALE_LIMIT: u32 = 4096;

const HALF: u32 = 1 << 31;
const QUARTER: u32 = 1 << 30;
const THREE_QUARTERS: u32 = 3 << 30;

struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    filled: u8,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), acc: 0, filled: 0 }
    }

    fn push(&mut self, bit: u8) {
        self.acc = (self.acc << 1) | (bit & 1);
        self.filled += 1;
        if self.filled == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.filled = 0;
        }
    }

    /// Zero-pad the final partial byte. Always returns at least one byte so
    /// even an empty stream is visible in a container.
    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push(self.acc << (8 - self.filled));
        }
        if self.bytes.is_empty() {
            self.bytes.push(0);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Bits past the end of the stream read as 0, matching the writer's
    /// zero padding.
    fn next(&mut self) -> u32 {
        let byte = self.pos / 8;
        let bit = if byte < self.bytes.len() {
            (self.bytes[byte] >> (7 - self.pos % 8)) & 1
        } else {
            0
        };
        self.pos += 1;
        bit as u32
    }
}

/// Per-context adaptive bit statistics shared by encoder and decoder.
#[derive(Debug, Clone)]
pub struct ContextModel {
    counts: [[u32; 2]; CONTEXT_COUNT],
}

impl Default for ContextModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ContextModel {
    pub fn new() -> Self {
        Self { counts: [[1, 1]; CONTEXT_COUNT] }
    }

    pub fn context(channel: usize, left: u8, above: u8) -> usize {
        (channel & 3) * 4 + (left as usize) * 2 + (above as usize)
    }

    /// Probability of the next bit being 0, in 1/65536 units, clamped so
    /// neither symbol ever becomes impossible.
    pub fn p_zero(&self, ctx: usize) -> u16 {
        let [c0, c1] = self.counts[ctx];
        let q = ((c0 as u64) << 16) / (c0 as u64 + c1 as u64);
        q.clamp(1, 65535) as u16
    }

    pub fn update(&mut self, ctx: usize, bit: u8) {
        self.counts[ctx][bit as usize] += 1;
        let [c0, c1] = self.counts[ctx];
        if c0 + c1 >= RESCALE_LIMIT {
            self.counts[ctx] = [(c0 + 1) / 2, (c1 + 1) / 2];
        }
    }
}

/// Binary arithmetic encoder over 16-bit probabilities with 32-bit state.
pub struct ArithmeticEncoder {
    low: u32,
    high: u32,
    pending: u32,
    out: BitWriter,
}

impl Default for ArithmeticEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithmeticEncoder {
    pub fn new() -> Self {
        Self { low: 0, high: u32::MAX, pending: 0, out: BitWriter::new() }
    }

    fn emit(&mut self, bit: u8) {
        self.out.push(bit);
        while self.pending > 0 {
            self.out.push(bit ^ 1);
            self.pending -= 1;
        }
    }

    /// Code one bit under probability-of-zero `p_zero` (1..=65535).
    pub fn encode(&mut self, p_zero: u16, bit: u8) {
        debug_assert!(p_zero >= 1);
        let range = (self.high - self.low) as u64 + 1;
        let split = self.low + ((range * p_zero as u64) >> 16) as u32 - 1;
        if bit == 0 {
            self.high = split;
        } else {
            self.low = split + 1;
        }
        loop {
            if self.high < HALF {
                self.emit(0);
            } else if self.low >= HALF {
                self.emit(1);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Flush the interval; the result always holds at least one byte.
    pub fn finish(mut self) -> Vec<u8> {
        self.pending += 1;
        if self.low < QUARTER {
            self.emit(0);
        } else {
            self.emit(1);
        }
        self.out.finish()
    }
}

/// Mirror of [`ArithmeticEncoder`]; must be driven with the identical
/// probability sequence.
pub struct ArithmeticDecoder<'a> {
    low: u32,
    high: u32,
    value: u32,
    input: BitReader<'a>,
}

impl<'a> ArithmeticDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut input = BitReader::new(bytes);
        let mut value = 0u32;
        for _ in 0..32 {
            value = (value << 1) | input.next();
        }
        Self { low: 0, high: u32::MAX, value, input }
    }

    pub fn decode(&mut self, p_zero: u16) -> u8 {
        let range = (self.high - self.low) as u64 + 1;
        let split = self.low + ((range * p_zero as u64) >> 16) as u32 - 1;
        let bit = if self.value <= split { 0 } else { 1 };
        if bit == 0 {
            self.high = split;
        } else {
            self.low = split + 1;
        }
        loop {
            if self.high < HALF {
                // nothing to subtract
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.input.next();
        }
        bit
    }
}

fn flat(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

/// Compress one branch's -1/+1 code tensor into a byte segment.
pub fn compress_codes<T: Scalar>(code: &Tensor<T>) -> Result<Vec<u8>> {
    let [b, c, h, w] = code.shape();
    if b != 1 {
        return Err(Error::InvalidArgument(format!(
            "code tensor has batch {}, expected 1",
            b
        )));
    }
    let mut bits = vec![0u8; c * h * w];
    let mut model = ContextModel::new();
    let mut enc = ArithmeticEncoder::new();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = code.at(0, ci, y, x);
                let bit = if v == T::one() {
                    1u8
                } else if v == -T::one() {
                    0u8
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "code value {} at ({}, {}, {}) is not -1/+1",
                        v, ci, y, x
                    )));
                };
                let left = if x > 0 { bits[flat(ci, y, x - 1, h, w)] } else { 0 };
                let above = if y > 0 { bits[flat(ci, y - 1, x, h, w)] } else { 0 };
                let ctx = ContextModel::context(ci, left, above);
                enc.encode(model.p_zero(ctx), bit);
                model.update(ctx, bit);
                bits[flat(ci, y, x, h, w)] = bit;
            }
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`compress_codes`]; the caller supplies the tensor shape,
/// which the container records.
pub fn decompress_codes<T: Scalar>(bytes: &[u8], shape: [usize; 4]) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape;
    if b != 1 {
        return Err(Error::InvalidArgument(format!(
            "code tensor has batch {}, expected 1",
            b
        )));
    }
    let mut bits = vec![0u8; c * h * w];
    let mut model = ContextModel::new();
    let mut dec = ArithmeticDecoder::new(bytes);
    let mut out = Tensor::zeros(shape);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let left = if x > 0 { bits[flat(ci, y, x - 1, h, w)] } else { 0 };
                let above = if y > 0 { bits[flat(ci, y - 1, x, h, w)] } else { 0 };
                let ctx = ContextModel::context(ci, left, above);
                let bit = dec.decode(model.p_zero(ctx));
                model.update(ctx, bit);
                bits[flat(ci, y, x, h, w)] = bit;
                let idx = flat(ci, y, x, h, w);
                out.data_mut()[idx] = if bit == 1 { T::one() } else { -T::one() };
            }
        }
    }
    Ok(out)
}
