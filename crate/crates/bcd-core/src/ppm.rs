//! Binary PPM (P6) image input and output.

use crate::bitplane::RgbImage;
use crate::error::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// Read one header token, skipping whitespace and `#` comments.
fn token(r: &mut impl BufRead) -> Result<String> {
    let mut out = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if out.is_empty() {
                return Err(Error::Format("truncated header".into()));
            }
            return Ok(out);
        }
        let b = byte[0];
        if b == b'#' && out.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if out.is_empty() {
                continue;
            }
            return Ok(out);
        }
        out.push(b as char);
    }
}

fn dimension(r: &mut impl BufRead, what: &str) -> Result<usize> {
    let t = token(r)?;
    t.parse::<usize>()
        .map_err(|_| Error::Format(format!("bad {} field {:?}", what, t)))
}

pub fn read_ppm(r: &mut impl BufRead) -> Result<RgbImage> {
    let magic = token(r)?;
    if magic != "P6" {
        return Err(Error::Format(format!(
            "expected P6 magic, found {:?}",
            magic
        )));
    }
    let width = dimension(r, "width")?;
    let height = dimension(r, "height")?;
    let maxval = dimension(r, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only maxval 255 is supported, found {}",
            maxval
        )));
    }
    let mut data = vec![0u8; height.checked_mul(width).and_then(|n| n.checked_mul(3)).ok_or_else(
        || Error::Format(format!("image extent {}x{} overflows", width, height)),
    )?];
    r.read_exact(&mut data)
        .map_err(|_| Error::Format("raster shorter than header promises".into()))?;
    RgbImage::new(height, width, data)
}

pub fn write_ppm(w: &mut impl Write, img: &RgbImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width(), img.height())?;
    w.write_all(img.data())?;
    Ok(())
}

pub fn read_ppm_file(path: impl AsRef<Path>) -> Result<RgbImage> {
    let file = std::fs::File::open(path)?;
    read_ppm(&mut std::io::BufReader::new(file))
}

pub fn write_ppm_file(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut file, img)
}
