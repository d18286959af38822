//! Binary PPM (P6) frames and PGM (P5) label maps, maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit raster with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Per-pixel integer labels (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary P5 or P6 image.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut c = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        c.pos = maxval_at;
        return Err(c.err(format!("unsupported maxval {maxval}, only 255")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| c.err("image dimensions overflow"))?;
    let body = &bytes[c.pos..];
    if body.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: c.pos + expected,
            actual: bytes.len(),
        });
    }
    if body.len() > expected {
        c.pos += expected;
        return Err(c.err("trailing bytes after pixel data"));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: body.to_vec(),
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    decode(&fs::read(path)?, path)
}

/// Reads a P6 frame as a `[3,H,W]` tensor of `byte / 255`.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let r = read_raster(path)?;
    if r.channels != 3 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: "expected a P6 colour image".into(),
        });
    }
    raster_to_tensor(&r)
}

pub fn raster_to_tensor(r: &Raster) -> Result<Tensor> {
    let (h, w, c) = (r.height, r.width, r.channels);
    Tensor::new(
        &[c, h, w],
        (0..c * h * w)
            .map(|i| {
                let (ci, p) = (i / (h * w), i % (h * w));
                r.data[p * c + ci] as f64 / 255.0
            })
            .collect(),
    )
}

/// Quantizes a `[3,H,W]` tensor to bytes with `round(clamp(v)·255)`.
pub fn tensor_to_raster(t: &Tensor) -> Result<Raster> {
    let [c, h, w] = t.shape()[..] else {
        return Err(Error::Data(format!("frame must be [3,H,W], got {:?}", t.shape())));
    };
    if c != 3 {
        return Err(Error::Data(format!("frame must have 3 channels, got {c}")));
    }
    let mut data = vec![0u8; h * w * 3];
    for ci in 0..3 {
        for p in 0..h * w {
            let v = t.data()[ci * h * w + p];
            data[p * 3 + ci] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

pub fn write_frame(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(&tensor_to_raster(t)?))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let r = read_raster(path)?;
    if r.channels != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: "expected a P5 label map".into(),
        });
    }
    Ok(LabelMap {
        width: r.width,
        height: r.height,
        data: r.data,
    })
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    let r = Raster {
        width: l.width,
        height: l.height,
        channels: 1,
        data: l.data.clone(),
    };
    fs::write(path, encode(&r))?;
    Ok(())
}
