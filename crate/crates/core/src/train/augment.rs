//! Input pipeline: resize, flip, [−1, 1] scaling, mean subtraction, random erasing.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::resize_bilinear;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub erase_probability: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl From<&TrainConfig> for AugmentConfig {
    fn from(c: &TrainConfig) -> Self {
        AugmentConfig {
            flip_probability: c.flip_probability,
            erase_probability: c.erase_probability,
            erase_area: c.erase_area,
            erase_aspect: c.erase_aspect,
        }
    }
}

/// Erased rectangle in output coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Augmented<T> {
    pub image: Tensor<T>,
    pub flipped: bool,
    pub erased: Option<EraseRect>,
}

fn dims3<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(shape_err!("image must be 3×H×W, got {s:?}")),
    }
}

/// Mirrors the last axis.
pub fn flip_horizontal<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let w = image.shape()[image.rank() - 1];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape(), data).expect("same shape")
}

/// `2x − 1 − (2m − 1)` per channel, with `m` the dataset mean in `[0, 1]` units.
fn normalize<T: Scalar>(image: &mut Tensor<T>, mean: [f64; 3]) {
    let plane = image.numel() / 3;
    for (c, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
        let shift = T::lit(2.0 * mean[c] - 1.0);
        for v in chunk {
            *v = T::lit(2.0) * *v - T::one() - shift;
        }
    }
}

/// Deterministic evaluation preprocessing: resize, scale, subtract mean.
pub fn preprocess<T: Scalar>(image: &Tensor<T>, mean: [f64; 3], out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    dims3(image)?;
    let mut x = resize_bilinear(image, out_h, out_w)?;
    normalize(&mut x, mean);
    Ok(x)
}

/// Samples a rectangle whose exact area ratio and aspect ratio lie within the
/// configured ranges; gives up after 100 attempts.
pub fn sample_erase_rect<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> Option<EraseRect> {
    let area = (h * w) as f64;
    let (a0, a1) = cfg.erase_area;
    let (r0, r1) = cfg.erase_aspect;
    for _ in 0..100 {
        let target = rng.random_range(a0..=a1) * area;
        let aspect = rng.random_range(r0..=r1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let ratio = (eh * ew) as f64 / area;
        if ratio < a0 || ratio > a1 {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        return Some(EraseRect {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}

/// Training-time augmentation of a `[3, H, W]` image in `[0, 1]`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mean: [f64; 3],
    out_h: usize,
    out_w: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Augmented<T>> {
    dims3(image)?;
    let mut x = resize_bilinear(image, out_h, out_w)?;
    let flipped = rng.random::<f64>() < cfg.flip_probability;
    if flipped {
        x = flip_horizontal(&x);
    }
    normalize(&mut x, mean);
    let mut erased = None;
    if rng.random::<f64>() < cfg.erase_probability {
        erased = sample_erase_rect(out_h, out_w, cfg, rng);
        if let Some(r) = erased {
            let plane = out_h * out_w;
            let d = x.data_mut();
            for c in 0..3 {
                for y in r.top..r.top + r.height {
                    for v in &mut d[c * plane + y * out_w + r.left..c * plane + y * out_w + r.left + r.width] {
                        *v = T::lit(rng.sample::<f64, _>(StandardNormal));
                    }
                }
            }
        }
    }
    Ok(Augmented { image: x, flipped, erased })
}
