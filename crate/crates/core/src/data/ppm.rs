//! Binary PPM (P6, 8-bit) codec.

use std::fs;
use std::path::Path;

use crate::error::{Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
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

    fn token(&mut self) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| SagError::Format("truncated PPM header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| SagError::Format(format!("bad PPM header field {t:?}")))
    }
}

/// Decodes P6 bytes into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token()?;
    if magic != "P6" {
        return Err(SagError::Format(format!("expected binary PPM (P6), found {magic:?}")));
    }
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(SagError::Format(format!("unsupported PPM {width}×{height} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = h.pos + 1;
    let n = width * height;
    let raster = bytes
        .get(start..start + 3 * n)
        .ok_or_else(|| SagError::Format("PPM raster is truncated".into()))?;
    let scale = 1.0 / maxval as f64;
    let mut data = vec![T::zero(); 3 * n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = T::lit(px[c] as f64 * scale);
        }
    }
    Tensor::new(&[3, height, width], data)
}

/// Encodes a `[3, H, W]` tensor; values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>, comment: Option<&str>) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(SagError::ShapeMismatch(format!("image must be 3×H×W, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    out.extend_from_slice(b"P6\n");
    if let Some(c) = comment {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    let n = h * w;
    let d = image.data();
    for i in 0..n {
        for c in 0..3 {
            out.push(to_byte(d[c * n + i].as_f64()));
        }
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| match e {
        SagError::Format(m) => SagError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_image<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image, None)?)?;
    Ok(())
}

/// Comment lines (without the leading `#`) of a PPM header.
pub fn header_comments(bytes: &[u8]) -> Vec<String> {
    let mut comments = Vec::new();
    let mut fields = 0;
    let mut pos = 0;
    while pos < bytes.len() && fields < 4 {
        let b = bytes[pos];
        if b == b'#' {
            let end = bytes[pos..].iter().position(|&c| c == b'\n').map_or(bytes.len(), |e| pos + e);
            comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
            pos = end;
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields += 1;
        }
    }
    comments
}
