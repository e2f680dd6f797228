//! Binary PGM (`P5`) and PPM (`P6`) images.

use std::path::Path;

use tsgb_core::saliency::{encode_pnm, ExportMode, SaliencyMap};
use tsgb_core::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Format(String),
    #[error("output path is empty")]
    EmptyPath,
}

type Result<T> = std::result::Result<T, PnmError>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Format(format!("expected a number at byte {start}")))
    }
}

/// Decodes an 8-bit binary PGM or PPM into a `1 x C x H x W` tensor in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::Format("expected a P5 or P6 header".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number()?;
    let h = cur.number()?;
    let max = cur.number()?;
    if max == 0 || max > 255 {
        return Err(PnmError::Format(format!("unsupported maximum value {max}")));
    }
    if w == 0 || h == 0 {
        return Err(PnmError::Format("zero-sized image".into()));
    }
    // exactly one whitespace byte separates the header from the pixels
    let start = cur.pos + 1;
    let need = w * h * channels;
    let pixels = bytes
        .get(start..start + need)
        .ok_or_else(|| PnmError::Format(format!("pixel data truncated: need {need} bytes")))?;
    let plane = w * h;
    let mut data = vec![0.0f32; need];
    for (p, px) in pixels.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f32 / max as f32;
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, channels, h, w), data).expect("length follows the shape"))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

/// Encodes a 1- or 3-channel tensor with values in `[0, 1]` (clamped).
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(PnmError::Format(format!("cannot encode a {s} tensor"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    for p in 0..plane {
        for c in 0..s.c {
            let v = t.data()[c * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(t)?;
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a saliency map as a graymap or a diverging pixmap.
pub fn export_image(m: &SaliencyMap, path: impl AsRef<Path>, mode: ExportMode) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pnm(m, mode))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(PnmError::EmptyPath);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rgb() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| (i * 14) as f32 / 255.0).collect();
        let t = Tensor::from_vec(Shape::new(1, 3, 2, 3), data).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5\n# hello\n2 1\n255\n\x00\xff";
        assert_eq!(decode(bytes).unwrap().data(), &[0.0, 1.0]);
        assert!(decode(b"P5\n2 1\n255\n\x00").is_err());
        assert!(decode(b"P3\n1 1\n255\n0").is_err());
    }
}
