//! Progressive on-disk format for encoded images.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BCD1" | version u8 | height u16 | width u16 | pad_h u8 | pad_w u8 |
//! branches u8 | binary_channels u8 | spatial_factor u8 | switch_mask u8 |
//! branches x segment_len u32 | segments...
//! ```
//!
//! The header is `15 + 4 N` bytes. Segment i holds branch i+1's
//! arithmetic-coded payload. Truncating to level l zeroes the lengths of
//! branches above l and drops their payload bytes, so a truncated file is a
//! prefix-preserving rewrite of the original. A branch switched off at
//! encode time has its mask bit cleared and carries only the coder's flush
//! bytes; it decodes as all-zero codes. An *empty* segment therefore always
//! means the file was truncated below that level.

use crate::codec::{BranchCodes, EncodedImage};
use crate::coder::{compress_codes, decompress_codes, ArithmeticEncoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const CONTAINER_MAGIC: &[u8; 4] = b"BCD1";
pub const CONTAINER_VERSION: u8 = 1;

/// Bytes before the first payload: fixed fields plus one u32 per branch.
pub fn header_len(branches: usize) -> usize {
    15 + 4 * branches
}

/// Parsed container: geometry, switch mask, and one compressed segment per
/// branch (empty when truncated away or switched off).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub height: usize,
    pub width: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub binary_channels: usize,
    pub spatial_factor: usize,
    pub active: Vec<bool>,
    pub segments: Vec<Vec<u8>>,
}

impl Container {
    pub fn branches(&self) -> usize {
        self.segments.len()
    }

    /// Shape of each branch's code tensor.
    pub fn code_shape(&self) -> [usize; 4] {
        [
            1,
            self.binary_channels,
            (self.height + self.pad_h) / self.spatial_factor,
            (self.width + self.pad_w) / self.spatial_factor,
        ]
    }

    /// Levels decodable from this file: the longest prefix of branches
    /// whose segments still carry bytes.
    pub fn available_levels(&self) -> usize {
        self.segments
            .iter()
            .take_while(|seg| !seg.is_empty())
            .count()
    }

    /// Compress per-branch codes into a container.
    pub fn from_codes<T: Scalar>(enc: &EncodedImage<T>) -> Result<Self> {
        enc.codes.validate()?;
        let n = enc.codes.codes.len();
        if n == 0 || n > 8 {
            return Err(Error::InvalidArgument(format!(
                "{} branches outside 1..=8",
                n
            )));
        }
        for (dim, name) in [(enc.height, "height"), (enc.width, "width")] {
            if dim == 0 || dim > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!(
                    "{} {} does not fit the container's u16 field",
                    name, dim
                )));
            }
        }
        if enc.pad_h > u8::MAX as usize || enc.pad_w > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "padding ({}, {}) does not fit u8 fields",
                enc.pad_h, enc.pad_w
            )));
        }
        let [_, b, ch, _] = enc.codes.codes[0].shape();
        let padded_h = enc.height + enc.pad_h;
        if ch == 0 || padded_h % ch != 0 {
            return Err(Error::InvalidArgument(format!(
                "code height {} does not divide padded height {}",
                ch, padded_h
            )));
        }
        let spatial_factor = padded_h / ch;
        if spatial_factor > u8::MAX as usize || b > u8::MAX as usize {
            return Err(Error::InvalidArgument(
                "code geometry does not fit the header's u8 fields".into(),
            ));
        }
        let segments = enc
            .codes
            .codes
            .iter()
            .zip(&enc.codes.active)
            .map(|(code, &on)| {
                if on {
                    compress_codes(code)
                } else {
                    // an off branch still gets the coder's flush so that a
                    // zero-length segment unambiguously means truncation
                    Ok(ArithmeticEncoder::new().finish())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: enc.height,
            width: enc.width,
            pad_h: enc.pad_h,
            pad_w: enc.pad_w,
            binary_channels: b,
            spatial_factor,
            active: enc.codes.active.clone(),
            segments,
        })
    }

    /// Decompress codes for a level-`level` decode. Branches above the
    /// level come back zero-filled and marked inactive.
    pub fn to_codes<T: Scalar>(&self, level: usize) -> Result<EncodedImage<T>> {
        let n = self.branches();
        if level == 0 || level > n {
            return Err(Error::InvalidArgument(format!(
                "level {} outside 1..={}",
                level, n
            )));
        }
        let available = self.available_levels();
        if level > available {
            return Err(Error::LevelUnavailable { level, available });
        }
        let shape = self.code_shape();
        let mut codes = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        for i in 0..n {
            let wanted = i < level;
            if wanted && self.active[i] {
                codes.push(decompress_codes(&self.segments[i], shape)?);
                active.push(true);
            } else {
                codes.push(Tensor::zeros(shape));
                active.push(false);
            }
        }
        Ok(EncodedImage {
            codes: BranchCodes { codes, active },
            height: self.height,
            width: self.width,
            pad_h: self.pad_h,
            pad_w: self.pad_w,
        })
    }

    /// Drop every branch above `level`: lengths become zero, payloads go.
    pub fn truncate_to_level(&mut self, level: usize) -> Result<()> {
        if level == 0 || level > self.branches() {
            return Err(Error::InvalidArgument(format!(
                "level {} outside 1..={}",
                level,
                self.branches()
            )));
        }
        for seg in self.segments.iter_mut().skip(level) {
            seg.clear();
        }
        Ok(())
    }

    /// Payload bits per pixel for a level-`level` decode; the header is not
    /// counted.
    pub fn measured_bpp(&self, level: usize) -> f64 {
        let bytes: usize = self.segments.iter().take(level).map(Vec::len).sum();
        8.0 * bytes as f64 / (self.height * self.width) as f64
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let n = self.branches();
        if n == 0 || n > 8 {
            return Err(Error::InvalidArgument(format!(
                "{} branches outside 1..=8",
                n
            )));
        }
        if self.active.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} switch flags for {} branches",
                self.active.len(),
                n
            )));
        }
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&[CONTAINER_VERSION])?;
        w.write_all(&(self.height as u16).to_le_bytes())?;
        w.write_all(&(self.width as u16).to_le_bytes())?;
        let mut mask = 0u8;
        for (i, &on) in self.active.iter().enumerate() {
            if on {
                mask |= 1 << i;
            }
        }
        w.write_all(&[
            self.pad_h as u8,
            self.pad_w as u8,
            n as u8,
            self.binary_channels as u8,
            self.spatial_factor as u8,
            mask,
        ])?;
        for seg in &self.segments {
            let len = u32::try_from(seg.len())
                .map_err(|_| Error::InvalidArgument("segment exceeds u32 length".into()))?;
            w.write_all(&len.to_le_bytes())?;
        }
        for seg in &self.segments {
            w.write_all(seg)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("container shorter than its magic".into()))?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Format(format!(
                "bad container magic {:?}, expected {:?}",
                magic, CONTAINER_MAGIC
            )));
        }
        let mut fixed = [0u8; 11];
        r.read_exact(&mut fixed)
            .map_err(|_| Error::Format("truncated container header".into()))?;
        if fixed[0] != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                fixed[0]
            )));
        }
        let height = u16::from_le_bytes([fixed[1], fixed[2]]) as usize;
        let width = u16::from_le_bytes([fixed[3], fixed[4]]) as usize;
        let pad_h = fixed[5] as usize;
        let pad_w = fixed[6] as usize;
        let n = fixed[7] as usize;
        let binary_channels = fixed[8] as usize;
        let spatial_factor = fixed[9] as usize;
        let mask = fixed[10];
        if n == 0 || n > 8 {
            return Err(Error::Format(format!("branch count {} outside 1..=8", n)));
        }
        if height == 0 || width == 0 || binary_channels == 0 || spatial_factor == 0 {
            return Err(Error::Format("zero geometry field".into()));
        }
        if (height + pad_h) % spatial_factor != 0 || (width + pad_w) % spatial_factor != 0 {
            return Err(Error::Format(format!(
                "padded extent {}x{} not divisible by factor {}",
                height + pad_h,
                width + pad_w,
                spatial_factor
            )));
        }
        if n < 8 && mask >> n != 0 {
            return Err(Error::Format(format!(
                "switch mask {:#010b} sets bits beyond branch {}",
                mask, n
            )));
        }
        let mut lens = Vec::with_capacity(n);
        for _ in 0..n {
            let mut le = [0u8; 4];
            r.read_exact(&mut le)
                .map_err(|_| Error::Format("truncated segment length table".into()))?;
            lens.push(u32::from_le_bytes(le) as usize);
        }
        let mut segments = Vec::with_capacity(n);
        for (i, &len) in lens.iter().enumerate() {
            let mut seg = vec![0u8; len];
            r.read_exact(&mut seg).map_err(|_| {
                Error::Format(format!("segment {} shorter than its declared length", i))
            })?;
            segments.push(seg);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after final segment".into()));
        }
        Ok(Self {
            height,
            width,
            pad_h,
            pad_w,
            binary_channels,
            spatial_factor,
            active: (0..n).map(|i| mask & (1 << i) != 0).collect(),
            segments,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}

/// Truncate a serialized container without decoding its payloads.
pub fn truncate_container_bytes(bytes: &[u8], level: usize) -> Result<Vec<u8>> {
    let mut c = Container::from_bytes(bytes)?;
    c.truncate_to_level(level)?;
    c.to_bytes()
}
