//! Binary PPM (P6) image I/O for `[3×H×W]` tensors with values in `[0, 1]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAXVAL: u16 = 255;

/// Writes an image tensor as binary PPM, quantizing each channel to 8 bits.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ppm write", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let data = image.to_vec();
    let mut bytes = Vec::with_capacity(32 + 3 * h * w);
    write!(&mut bytes, "P6\n{w} {h}\n{MAXVAL}\n")?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * MAXVAL as f64).round() as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PPM into a `[3×H×W]` tensor with values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Parse(format!("{}: {what}", path.display()));

    // Header: magic, width, height, maxval — whitespace separated, with
    // optional `#` comments — followed by a single whitespace byte.
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" {
        return Err(bad(&format!("unsupported magic {:?}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("malformed width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("malformed height"))?;
    let maxval: u16 = fields[3].parse().map_err(|_| bad("malformed maxval"))?;
    if maxval != MAXVAL {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    let need = 3 * h * w;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;

    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = pixels[(y * w + x) * 3 + c] as f64 / MAXVAL as f64;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}
