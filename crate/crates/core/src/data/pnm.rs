//! Binary netpbm: P6 (RGB) and P5 (grey), 8-bit, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P5, one byte per pixel.
    Gray,
    /// P6, three bytes per pixel.
    Rgb,
}

impl PnmKind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Offset of the first raster byte in the file.
    pub header_len: usize,
    /// Interleaved raster, row-major.
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::DataAt {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skips whitespace and `#` comments; at least one whitespace byte is required.
    fn skip_separator(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(self.err("expected whitespace in header"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

pub fn parse_pnm(bytes: &[u8], kind: PnmKind, path: &Path) -> Result<Pnm> {
    let mut c = Cursor { bytes, pos: 0, path };
    if bytes.get(..2) != Some(kind.magic()) {
        return Err(c.err(format!("expected magic {}", String::from_utf8_lossy(kind.magic()))));
    }
    c.pos = 2;
    c.skip_separator()?;
    let width = c.number("width")?;
    c.skip_separator()?;
    let height = c.number("height")?;
    c.skip_separator()?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.err(format!("degenerate extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(c.err(format!("maxval must be 255, got {maxval}")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected a single whitespace byte before the raster"));
    }
    c.pos += 1;
    let header_len = c.pos;
    let need = width * height * kind.channels();
    let have = bytes.len() - header_len;
    if have != need {
        return Err(c.err(format!(
            "raster holds {have} bytes, expected {need} for {width}x{height}"
        )));
    }
    Ok(Pnm {
        kind,
        width,
        height,
        header_len,
        pixels: bytes[header_len..].to_vec(),
    })
}

pub fn encode_pnm(kind: PnmKind, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height * kind.channels(), "raster size");
    let mut out = format!("{}\n{width} {height}\n255\n", String::from_utf8_lossy(kind.magic())).into_bytes();
    out.extend_from_slice(pixels);
    out
}
