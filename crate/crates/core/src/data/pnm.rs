//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use super::{DataError, FovMask, Image, Result};

fn err(offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Pnm {
        offset,
        reason: reason.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments running to end of line.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, format!("{what} out of range")))
    }
}

/// Decodes a P5 or P6 stream. Values map to `v / 255`.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(err(0, "bad magic, expected P5 or P6")),
    };
    let mut h = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(err(2, "expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_separators();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(err(maxval_at, format!("empty image {width}x{height}")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(err(h.pos, "expected a single whitespace byte before the payload")),
    }
    let expected = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(err(
            bytes.len(),
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(err(h.pos + expected, "trailing bytes after payload"));
    }

    // Interleaved RGB on disk, planar in memory.
    let plane = width * height;
    let mut data = vec![0.0; expected];
    for (i, &b) in payload.iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * plane + pixel] = b as f64 / 255.0;
    }
    Image::new(width, height, channels, data)
}

/// Decodes a P5 stream that only contains 0 and 255 as a mask.
pub fn decode_mask(bytes: &[u8]) -> Result<FovMask> {
    let img = decode(bytes)?;
    img.to_mask()
        .map_err(|e| DataError::Invalid(format!("mask: {e}")))
}

/// `round(v·255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    let plane = image.width() * image.height();
    out.reserve(plane * image.channels());
    for pixel in 0..plane {
        for c in 0..image.channels() {
            out.push(quantize(image.data()[c * plane + pixel]));
        }
    }
    out
}

pub fn load(path: &Path) -> Result<Image> {
    decode(&read(path)?)
}

pub fn load_mask(path: &Path) -> Result<FovMask> {
    decode_mask(&read(path)?)
}

/// Writes `image` and returns the number of bytes written.
pub fn save(image: &Image, path: &Path) -> Result<usize> {
    let bytes = encode(image);
    std::fs::write(path, &bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.len())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
