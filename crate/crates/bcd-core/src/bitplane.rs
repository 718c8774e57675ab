//! Bit-plane decomposition of 8-bit RGB images.
//!
//! Level 1 holds the most significant bit of every pixel value, level 8 the
//! least significant. Summing `2^(8-l)` over the levels of a stack restores
//! the original pixel exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bit depth of the supported pixel format.
pub const BIT_DEPTH: usize = 8;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents must be positive, got {}x{}",
                height, width
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "image buffer holds {} bytes, {}x{} RGB needs {}",
                data.len(),
                height,
                width,
                height * width * 3
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width * 3]).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, channel: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + channel]
    }

    pub fn set(&mut self, y: usize, x: usize, channel: usize, value: u8) {
        self.data[(y * self.width + x) * 3 + channel] = value;
    }

    /// (1, 3, h, w) tensor with values scaled to [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let inv = T::one() / T::from_f64_lossy(255.0);
        let mut t = Tensor::zeros([1, 3, self.height, self.width]);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = T::from_f64_lossy(self.get(y, x, c) as f64) * inv;
                    t.set(0, c, y, x, v);
                }
            }
        }
        t
    }

    /// Inverse of [`to_tensor`](Self::to_tensor): clamp to [0, 1], scale by
    /// 255, round to nearest.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if b != 1 || c != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected a (1, 3, h, w) tensor, got {:?}",
                t.shape()
            )));
        }
        let mut img = RgbImage::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = t.at(0, ch, y, x).to_f64().unwrap();
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.set(y, x, ch, byte);
                }
            }
        }
        Ok(img)
    }

    /// Order-0 empirical entropy of one channel, in bits per pixel.
    pub fn channel_entropy(&self, channel: usize) -> f64 {
        let mut counts = [0u64; 256];
        for y in 0..self.height {
            for x in 0..self.width {
                counts[self.get(y, x, channel) as usize] += 1;
            }
        }
        let total = (self.height * self.width) as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&n| n > 0)
            .map(|&n| {
                let p = n as f64 / total;
                -p * p.log2()
            })
            .sum();
        // a single nonzero bin yields -1.0 * log2(1.0) == -0.0
        h + 0.0
    }
}

/// Binary planes of an RGB image: `levels` significance levels, most
/// significant first, three channels each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlanes {
    height: usize,
    width: usize,
    levels: usize,
    /// 0/1 per bit, indexed `[level][channel][y][x]` flattened.
    bits: Vec<u8>,
}

impl BitPlanes {
    /// Split an image into its `levels` most significant bit planes
    /// (1 ..= 8). `levels = 8` captures the image losslessly.
    pub fn decompose(img: &RgbImage, levels: usize) -> Result<Self> {
        if levels == 0 || levels > BIT_DEPTH {
            return Err(Error::InvalidArgument(format!(
                "bit-plane count must lie in 1..={}, got {}",
                BIT_DEPTH, levels
            )));
        }
        let (h, w) = (img.height, img.width);
        let mut bits = vec![0u8; levels * 3 * h * w];
        for level in 1..=levels {
            let shift = (BIT_DEPTH - level) as u32;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let bit = (img.get(y, x, c) >> shift) & 1;
                        bits[Self::offset_for(w, h, level, c, y, x)] = bit;
                    }
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            levels,
            bits,
        })
    }

    fn offset_for(w: usize, h: usize, level: usize, channel: usize, y: usize, x: usize) -> usize {
        (((level - 1) * 3 + channel) * h + y) * w + x
    }

    fn offset(&self, level: usize, channel: usize, y: usize, x: usize) -> usize {
        Self::offset_for(self.width, self.height, level, channel, y, x)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Bit of `level` (1 = most significant) at a pixel.
    pub fn bit(&self, level: usize, channel: usize, y: usize, x: usize) -> u8 {
        self.bits[self.offset(level, channel, y, x)]
    }

    pub fn set_bit(&mut self, level: usize, channel: usize, y: usize, x: usize, bit: u8) {
        let i = self.offset(level, channel, y, x);
        self.bits[i] = bit & 1;
    }

    /// Rebuild pixels from the stored planes. With fewer than 8 levels the
    /// missing low-order bits read as zero.
    pub fn reconstruct(&self) -> RgbImage {
        self.reconstruct_upto(self.levels)
    }

    /// Rebuild using only levels 1 ..= `upto`.
    pub fn reconstruct_upto(&self, upto: usize) -> RgbImage {
        let upto = upto.min(self.levels);
        let mut img = RgbImage::filled(self.height, self.width, 0);
        for level in 1..=upto {
            let weight = 1u8 << (BIT_DEPTH - level);
            for c in 0..3 {
                for y in 0..self.height {
                    for x in 0..self.width {
                        if self.bit(level, c, y, x) == 1 {
                            let cur = img.get(y, x, c);
                            img.set(y, x, c, cur + weight);
                        }
                    }
                }
            }
        }
        img
    }

    /// The three planes of one level as a (1, 3, h, w) tensor with bits
    /// mapped 0 -> -1 and 1 -> +1, the form the coding branches consume.
    pub fn level_tensor<T: Scalar>(&self, level: usize) -> Result<Tensor<T>> {
        if level == 0 || level > self.levels {
            return Err(Error::InvalidArgument(format!(
                "level {} outside 1..={}",
                level, self.levels
            )));
        }
        let mut t = Tensor::zeros([1, 3, self.height, self.width]);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = if self.bit(level, c, y, x) == 1 {
                        T::one()
                    } else {
                        -T::one()
                    };
                    t.set(0, c, y, x, v);
                }
            }
        }
        Ok(t)
    }

    /// Order-0 empirical entropy of one binary plane, in bits per pixel.
    pub fn plane_entropy(&self, level: usize, channel: usize) -> f64 {
        let mut ones = 0u64;
        for y in 0..self.height {
            for x in 0..self.width {
                ones += self.bit(level, channel, y, x) as u64;
            }
        }
        let n = (self.height * self.width) as f64;
        binary_entropy(ones as f64 / n)
    }

    /// Sum of the plane entropies of one channel over all stored levels.
    pub fn channel_plane_entropy_sum(&self, channel: usize) -> f64 {
        (1..=self.levels)
            .map(|l| self.plane_entropy(l, channel))
            .sum()
    }
}

/// Entropy of a Bernoulli(p) bit, in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}
