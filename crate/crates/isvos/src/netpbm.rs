//! Binary netpbm I/O: P6 (PPM) for frames, P5 (PGM) for index masks.
//! Round-trips are exact for masks and 8-bit-exact for frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB frame in `[0,1]` as binary PPM, header `P6\n{w} {h}\n255\n`.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dimension(
            "write_frame",
            format!("expected [3,H,W], got {:?}", s),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = Vec::with_capacity(16 + 3 * h * w);
    write!(buf, "P6\n{} {}\n255\n", w, h)?;
    let d = frame.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(d[(c * h + y) * w + x]));
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Writes an indexed mask (0 = background, k = object k) as binary PGM.
/// Indices above 255 are a contract error.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::dimension(
            "write_mask",
            format!("expected [H,W], got {:?}", s),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let mut buf = Vec::with_capacity(16 + h * w);
    write!(buf, "P5\n{} {}\n255\n", w, h)?;
    for &v in mask.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Contract(format!("mask index {v} not an integer in 0..=255")));
        }
        buf.push(v as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, detail: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.err("non-ascii digits"))?
            .parse()
            .map_err(|_| self.err("number out of range"))
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8], usize)> {
    let mut p = HeaderParser { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(p.err(&format!("missing {magic} magic")));
    }
    p.pos = 2;
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(p.err("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("expected whitespace before payload"));
    }
    p.pos += 1;
    Ok((w, h, &bytes[p.pos..], p.pos))
}

/// Reads a binary PPM frame into `[3,H,W]` floats in `[0,1]`.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, payload, offset) = parse_header(&bytes, "P6")?;
    let need = 3 * w * h;
    if payload.len() < need {
        return Err(Error::Parse {
            offset: offset + payload.len(),
            detail: format!("payload truncated: {} of {} bytes", payload.len(), need),
        });
    }
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = payload[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Reads a binary PGM mask into `[H,W]` of whole-number object indices.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, payload, offset) = parse_header(&bytes, "P5")?;
    if payload.len() < w * h {
        return Err(Error::Parse {
            offset: offset + payload.len(),
            detail: format!("payload truncated: {} of {} bytes", payload.len(), w * h),
        });
    }
    Tensor::from_vec(&[h, w], payload[..w * h].iter().map(|&b| b as f32).collect())
}
