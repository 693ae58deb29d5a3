//! Binary greymap (PGM `P5`) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit greyscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what} at byte {start}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{what} out of range at byte {start}"))
    }
}

/// Header `(width, height, maxval, data offset)`.
fn parse_header(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, usize), String> {
    if !bytes.starts_with(b"P5") {
        return Err("missing P5 magic at byte 0".into());
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("zero image extent {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535 at byte {}", c.pos));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format!("expected whitespace after maxval at byte {}", c.pos));
    }
    Ok((width, height, maxval, c.pos + 1))
}

/// Parses a `P5` image. 16-bit images are scaled to 8 bits.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Gray> {
    let (width, height, maxval, off) = parse_header(bytes).map_err(|d| Error::format(path, d))?;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bpp;
    let data = &bytes[off..];
    if data.len() < need {
        return Err(Error::format(
            path,
            format!("pixel data ends at byte {}, expected {} bytes from byte {off}", bytes.len(), need),
        ));
    }
    let pixels = if bpp == 1 {
        data[..need]
            .iter()
            .map(|&v| ((v as usize * 255) / maxval).min(255) as u8)
            .collect()
    } else {
        data[..need]
            .chunks_exact(2)
            .map(|p| ((u16::from_be_bytes([p[0], p[1]]) as usize * 255) / maxval).min(255) as u8)
            .collect()
    };
    Ok(Gray { width, height, pixels })
}

pub fn read(path: &Path) -> Result<Gray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Checks only the header; used when indexing.
pub fn probe(path: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let g = decode(&bytes, path)?;
    Ok((g.width, g.height))
}

pub fn encode(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write(path: &Path, img: &Gray) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(img)).map_err(|e| Error::io(path, e))
}
