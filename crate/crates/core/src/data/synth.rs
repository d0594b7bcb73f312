//! Procedural person-like identities rendered under per-camera photometric shifts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SagError};
use crate::tensor::Tensor;

use super::manifest::{DatasetManifest, Split};
use super::ppm::save_image;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub ids: usize,
    pub per_camera: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    /// Std of additive pixel noise; also scales background clutter.
    pub noise: f64,
    /// Magnitude of the per-camera brightness and tint shift.
    pub camera_shift: f64,
    /// Largest horizontal displacement of the figure, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            ids: 16,
            per_camera: 10,
            cameras: 2,
            width: 64,
            height: 160,
            noise: 0.05,
            camera_shift: 0.15,
            jitter: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SagError::Config(m.into()));
        if self.ids < 2 {
            return fail("synthetic data needs at least 2 identities");
        }
        if self.cameras < 2 {
            return fail("synthetic data needs at least 2 cameras");
        }
        if self.per_camera < 1 {
            return fail("need at least one image per identity and camera");
        }
        if self.width < 16 || self.height < 32 {
            return fail("image extent must be at least 16×32");
        }
        if !(self.noise >= 0.0 && self.camera_shift >= 0.0) {
            return fail("noise and camera shift must be non-negative");
        }
        if 2 * self.jitter >= self.width / 2 {
            return fail("jitter too large for the image width");
        }
        Ok(())
    }

    /// Identities `0..train_ids()` train; the rest are test identities.
    pub fn train_ids(&self) -> usize {
        self.ids - self.ids / 2
    }

    pub fn num_images(&self) -> usize {
        self.ids * self.cameras * self.per_camera
    }
}

fn stream(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 56 ^ a << 36 ^ b << 20 ^ c);
    rng
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Identity {
    skin: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    head_frac: f64,
    torso_frac: f64,
    width_frac: f64,
}

impl Identity {
    fn new(spec: &SynthSpec, index: usize) -> Self {
        let mut rng = stream(spec.seed, 1, index as u64, 0, 0);
        // golden-ratio spacing keeps neighbouring identities far apart in hue
        let hue = (index as f64 * 0.618_033_988_75 + rng.random_range(0.0..0.1)).fract();
        let legs_hue = (hue + rng.random_range(0.25..0.75)).fract();
        Identity {
            skin: hsv(rng.random_range(0.03..0.1), rng.random_range(0.3..0.6), rng.random_range(0.55..0.9)),
            torso: hsv(hue, rng.random_range(0.55..0.95), rng.random_range(0.55..0.95)),
            legs: hsv(legs_hue, rng.random_range(0.3..0.9), rng.random_range(0.25..0.8)),
            head_frac: rng.random_range(0.11..0.16),
            torso_frac: rng.random_range(0.3..0.42),
            width_frac: rng.random_range(0.42..0.6),
        }
    }
}

struct Camera {
    gain: f64,
    tint: [f64; 3],
    background: [f64; 3],
}

impl Camera {
    fn new(spec: &SynthSpec, index: usize) -> Self {
        let mut rng = stream(spec.seed, 2, index as u64, 0, 0);
        let s = spec.camera_shift;
        let mut shift = |scale: f64| if s > 0.0 { rng.random_range(-s..s) * scale } else { 0.0 };
        let gain = 1.0 + shift(1.0);
        let tint = [shift(0.5), shift(0.5), shift(0.5)];
        let bg = 0.5 + shift(1.0);
        Camera {
            gain,
            tint,
            background: [bg, bg, bg],
        }
    }

    fn apply(&self, px: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| px[c] * self.gain + self.tint[c])
    }
}

fn render(spec: &SynthSpec, id: &Identity, cam: &Camera, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = (spec.height, spec.width);
    let j = spec.jitter as i64;
    let dx = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let mut canvas = vec![cam.background; h * w];

    let clutter = (spec.noise * 40.0).round() as usize;
    for _ in 0..clutter {
        let (bh, bw) = (rng.random_range(4..h / 4), rng.random_range(3..w / 4));
        let (y0, x0) = (rng.random_range(0..h - bh), rng.random_range(0..w - bw));
        let v = cam.background[0] + rng.random_range(-0.2..0.2);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                canvas[y * w + x] = [v, v, v];
            }
        }
    }

    let cx = w as f64 / 2.0 + dx as f64;
    let top = 0.05 * h as f64;
    let bottom = 0.97 * h as f64;
    let head_h = id.head_frac * h as f64;
    let torso_end = top + head_h + id.torso_frac * h as f64;
    let half = id.width_frac * w as f64 / 2.0;
    for y in 0..h {
        let fy = y as f64 + 0.5;
        for x in 0..w {
            let fx = x as f64 + 0.5 - cx;
            let px = if fy >= top && fy < top + head_h {
                let ry = (fy - top - head_h / 2.0) / (head_h / 2.0);
                let rx = fx / (half * 0.55);
                (rx * rx + ry * ry <= 1.0).then_some(id.skin)
            } else if fy >= top + head_h && fy < torso_end {
                (fx.abs() <= half).then_some(id.torso)
            } else if fy >= torso_end && fy < bottom {
                (fx.abs() <= half * 0.85 && fx.abs() >= 1.0).then_some(id.legs)
            } else {
                None
            };
            if let Some(p) = px {
                canvas[y * w + x] = p;
            }
        }
    }

    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let n = h * w;
    let mut data = vec![0.0f32; 3 * n];
    for (i, &p) in canvas.iter().enumerate() {
        let shifted = cam.apply(p);
        for c in 0..3 {
            let e = if spec.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data[c * n + i] = (shifted[c] + e).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(&[3, h, w], data).expect("canvas matches extent")
}

/// Renders one image; the content depends only on the spec and the indices.
pub fn synth_image(spec: &SynthSpec, identity: usize, camera: usize, index: usize) -> Tensor<f32> {
    let id = Identity::new(spec, identity);
    let cam = Camera::new(spec, camera);
    let mut rng = stream(spec.seed, 3, identity as u64, camera as u64, index as u64);
    render(spec, &id, &cam, &mut rng)
}

/// Writes a Market-style tree plus `manifest.tsv` under `out`.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for split in Split::ALL {
        fs::create_dir_all(out.join(split.dir_name()))?;
    }
    let mut records = Vec::with_capacity(spec.num_images());
    for identity in 0..spec.ids {
        let is_train = identity < spec.train_ids();
        for camera in 0..spec.cameras {
            for index in 0..spec.per_camera {
                let split = match (is_train, index) {
                    (true, _) => Split::Train,
                    (false, 0) => Split::Query,
                    (false, _) => Split::Gallery,
                };
                let raw_pid = identity as i64 + 1;
                let name = format!("{raw_pid:04}_c{}s1_{index:06}_00.ppm", camera + 1);
                let rel = PathBuf::from(split.dir_name()).join(name);
                save_image(&synth_image(spec, identity, camera, index), &out.join(&rel))?;
                records.push((rel, raw_pid, camera as i32 + 1, split));
            }
        }
    }
    let manifest = DatasetManifest::from_records(out, records)?;
    manifest.save()?;
    Ok(manifest)
}
