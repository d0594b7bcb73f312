//! Attention-grid exports: native-resolution grayscale grids and colour overlays.

use crate::autograd::resize_bilinear;
use crate::data::{encode_ppm, header_comments, decode_ppm};
use crate::error::{shape_err, Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Header comment key carrying the grid maximum (the value of a white pixel).
pub const GRID_SCALE_KEY: &str = "sag-grid-max";
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Blue at 0, red at 0.75, yellow at 1; inputs are clamped to `[0, 1]`.
pub fn color_ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.75 {
        let u = t / 0.75;
        [u, 0.0, 1.0 - u]
    } else {
        [1.0, (t - 0.75) / 0.25, 0.0]
    }
}

fn grid_max<T: Scalar>(cells: &[T]) -> f64 {
    cells.iter().map(|v| v.as_f64()).fold(0.0, f64::max)
}

/// Grayscale PPM of one `h×w` grid, scaled so that its maximum is white.
pub fn encode_grid_ppm<T: Scalar>(cells: &[T], h: usize, w: usize) -> Result<Vec<u8>> {
    if cells.len() != h * w || cells.is_empty() {
        return Err(shape_err!("{} grid cells do not fill {h}×{w}", cells.len()));
    }
    let max = grid_max(cells);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let plane: Vec<f64> = cells.iter().map(|v| v.as_f64() * scale).collect();
    let data: Vec<f64> = plane.iter().chain(&plane).chain(&plane).copied().collect();
    let img = Tensor::<f64>::new(&[3, h, w], data)?;
    encode_ppm(&img, Some(&format!("{GRID_SCALE_KEY} {max:.9e}")))
}

/// Inverse of [`encode_grid_ppm`] up to 8-bit quantisation.
pub fn decode_grid_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let max = header_comments(bytes)
        .iter()
        .find_map(|c| c.strip_prefix(GRID_SCALE_KEY).map(|v| v.trim().parse::<f64>()))
        .ok_or_else(|| SagError::Format(format!("grid image lacks a {GRID_SCALE_KEY} comment")))?
        .map_err(|_| SagError::Format("bad grid scale".into()))?;
    let img: Tensor<f64> = decode_ppm(bytes)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Tensor::new(&[h, w], img.data()[..h * w].iter().map(|v| v * max).collect())
}

/// Upsamples the grid to the image extent, colours it by the ramp after
/// dividing by the grid maximum, and alpha-blends it over `image` (`[3, H, W]` in `[0, 1]`).
pub fn overlay<T: Scalar>(image: &Tensor<T>, cells: &[T], h: usize, w: usize) -> Result<Tensor<f64>> {
    let (ih, iw) = match *image.shape() {
        [3, ih, iw] => (ih, iw),
        ref s => return Err(shape_err!("overlay needs a 3×H×W image, got {s:?}")),
    };
    if cells.len() != h * w || cells.is_empty() {
        return Err(shape_err!("{} grid cells do not fill {h}×{w}", cells.len()));
    }
    let max = grid_max(cells);
    let norm: Vec<f64> = cells.iter().map(|v| if max > 0.0 { v.as_f64() / max } else { 0.0 }).collect();
    let up = resize_bilinear(&Tensor::new(&[h, w], norm)?, ih, iw)?;
    let plane = ih * iw;
    let mut out = vec![0.0; 3 * plane];
    for (i, &t) in up.data().iter().enumerate() {
        let c = color_ramp(t);
        for ch in 0..3 {
            let base = image.data()[ch * plane + i].as_f64();
            out[ch * plane + i] = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * c[ch];
        }
    }
    Tensor::new(&[3, ih, iw], out)
}
