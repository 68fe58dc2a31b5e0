//! Binary 8-bit PPM (P6) images and PGM (P5) label maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit files are supported, maxval is {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    Ok(Header { width, height, data_start: pos + 1 })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a P6 file as `[3, H, W]` with values scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, b"P6", path)?;
    let n = h.width * h.height;
    let px = bytes
        .get(h.data_start..h.data_start + 3 * n)
        .ok_or_else(|| Error::Format(format!("{}: truncated pixel data", path.display())))?;
    Ok(Tensor::from_fn([3, h.height, h.width], |i| {
        let (c, p) = (i / n, i % n);
        px[3 * p + c] as f64 / 255.0
    }))
}

/// Reads a P5 file as `(H, W, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, b"P5", path)?;
    let n = h.width * h.height;
    let px = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::Format(format!("{}: truncated pixel data", path.display())))?;
    Ok((h.height, h.width, px.iter().map(|&b| b as u32).collect()))
}

/// Writes `[3, H, W]` in `[0, 1]`, rounding to 8 bits.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [h, w] = match *image.shape() {
        [3, h, w] => [h, w],
        ref s => return Err(Error::dim("write_ppm", format!("expected [3,H,W], got {s:?}"))),
    };
    let n = h * w;
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..n {
        for c in 0..3 {
            out.push((d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[u32]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::dim("write_pgm", format!("{} values for {height}x{width}", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        out.push(u8::try_from(v).map_err(|_| Error::Data(format!("label {v} does not fit in 8 bits")))?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `(width, height)` from a PPM or PGM header without reading pixels.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = read(path)?;
    let magic: &[u8; 2] = if bytes.starts_with(b"P5") { b"P5" } else { b"P6" };
    let h = parse_header(&bytes, magic, path)?;
    Ok((h.width, h.height))
}
