//! Self attention grid module.
//!
//! A low-resolution feature map `f2` is reduced to a single-channel score
//! map (1×1 conv → batch norm → ReLU) and turned into a grid that sums to one
//! per sample by a softmax over all `h·w` cells. The high-resolution map
//! `f1` (twice the extent) is max-filtered over non-overlapping 2×2 windows
//! onto the same grid, weighted cell-wise by the grid across every channel,
//! and optionally L2-normalised per sample.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm2dLayer, Conv2dLayer, Mode, Track};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon of the per-sample L2 normalisation.
pub const L2_EPS: f64 = 1e-12;

/// Default normalisation placement: on for depths 1–3, off at depth 4.
pub fn default_l2_for_depth(depth: usize) -> bool {
    depth < 4
}

/// Per-sample single-channel attention map `[N, 1, h, w]` summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrid<T> {
    values: Tensor<T>,
}

impl<T: Scalar> AttentionGrid<T> {
    /// Wraps a tensor after checking the shape contract; the sum-to-one
    /// property is checked separately by [`AttentionGrid::max_sum_error`].
    pub fn new(values: Tensor<T>) -> Result<Self> {
        match values.shape() {
            [_, 1, _, _] => Ok(AttentionGrid { values }),
            s => Err(shape_err!("attention grid must be N×1×h×w, got {s:?}")),
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// `(h, w)` grid extent.
    pub fn extent(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    /// Cells of sample `n`, row-major.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.values.numel() / self.batch();
        &self.values.data()[n * per..(n + 1) * per]
    }

    /// Largest `|Σ cells − 1|` over the batch.
    pub fn max_sum_error(&self) -> f64 {
        (0..self.batch())
            .map(|n| (self.sample(n).iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn entries_in_unit_interval(&self) -> bool {
        self.values.data().iter().all(|&v| v >= T::zero() && v <= T::one())
    }
}

/// Values produced by one SAG application.
#[derive(Clone, Copy, Debug)]
pub struct SagOutput {
    /// Attended (and possibly normalised) features `[N, C, h, w]`.
    pub features: Var,
    /// Softmax grid `[N, 1, h, w]`.
    pub grid: Var,
    /// Pre-softmax score map `[N, 1, h, w]`.
    pub heatmap: Var,
}

#[derive(Clone, Debug)]
pub struct SagModule<T> {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2dLayer<T>,
    pub apply_l2: bool,
}

impl<T: Scalar> SagModule<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, in_channels: usize, apply_l2: bool, seed: u64) -> Self {
        SagModule {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), in_channels, 1, 1, 1, 0, true, seed),
            bn: BatchNorm2dLayer::new(store, &format!("{name}.bn"), 1),
            apply_l2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    /// `softmax(relu(bn(conv1x1(f2))))`; returns `(grid, heatmap)`.
    pub fn compute_grid(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f2: Var,
        mode: Mode,
        track: Track,
    ) -> Result<(Var, Var)> {
        let scores = self.conv.forward(tape, store, f2, track)?;
        let normed = self.bn.forward(tape, store, scores, mode, track)?;
        let heatmap = tape.relu(normed);
        let grid = tape.spatial_softmax(heatmap)?;
        Ok((grid, heatmap))
    }

    /// Full module: attend the max-filtered `f1` with the grid of `f2`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f1: Var,
        f2: Var,
        mode: Mode,
        track: Track,
    ) -> Result<SagOutput> {
        let (s1, s2) = (tape.shape(f1).to_vec(), tape.shape(f2).to_vec());
        if s1.len() != 4 || s2.len() != 4 || s1[0] != s2[0] || s1[1] != s2[1] {
            return Err(shape_err!("SAG inputs must share N and C: {s1:?} vs {s2:?}"));
        }
        if s1[2] != 2 * s2[2] || s1[3] != 2 * s2[3] {
            return Err(shape_err!("high-resolution extent {s1:?} must be twice {s2:?}"));
        }
        let (grid, heatmap) = self.compute_grid(tape, store, f2, mode, track)?;
        let down = downsample_high(tape, f1)?;
        let attended = apply_grid(tape, down, grid)?;
        let features = if self.apply_l2 {
            tape.l2_normalize(attended, T::lit(L2_EPS))?
        } else {
            attended
        };
        Ok(SagOutput {
            features,
            grid,
            heatmap,
        })
    }
}

/// Non-overlapping 2×2 max filter taking `[N, C, 2h, 2w]` to `[N, C, h, w]`.
pub fn downsample_high<T: Scalar>(tape: &mut Tape<T>, f1: Var) -> Result<Var> {
    match *tape.shape(f1) {
        [_, _, h, w] if h % 2 == 0 && w % 2 == 0 => tape.max_pool2d(f1, 2),
        ref s => Err(shape_err!("high-resolution features need even extents, got {s:?}")),
    }
}

/// `v[n, c, i, j] = f[n, c, i, j] · g[n, 0, i, j]`.
pub fn apply_grid<T: Scalar>(tape: &mut Tape<T>, features: Var, grid: Var) -> Result<Var> {
    let (fs, gs) = (tape.shape(features), tape.shape(grid));
    match (fs, gs) {
        ([n, _, h, w], [gn, 1, gh, gw]) if n == gn && h == gh && w == gw => tape.mul(features, grid),
        _ => Err(shape_err!("grid {gs:?} does not cover features {fs:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_module(store: &mut ParamStore<f64>, c: usize, l2: bool) -> SagModule<f64> {
        let m = SagModule::new(store, "sag", c, l2, 1);
        store.get_mut(m.conv.weight).value.fill(0.0);
        m
    }

    #[test]
    fn zero_conv_gives_uniform_grid() {
        let mut store = ParamStore::new();
        let mut m = zero_module(&mut store, 3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let f2 = tape.constant(Tensor::randn(&[2, 3, 5, 2], 1.0, &mut rng));
        let (grid, _) = m.compute_grid(&mut tape, &store, f2, Mode::Train, Track::Grad).unwrap();
        assert_eq!(tape.shape(grid), &[2, 1, 5, 2]);
        for &v in tape.value(grid).data() {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_single_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = downsample_high(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn downsample_depth_one_geometry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[8, 1, 80, 32]));
        let y = downsample_high(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[8, 1, 40, 16]);
    }

    #[test]
    fn downsample_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, 5, 4]));
        assert!(downsample_high(&mut tape, x).is_err());
    }

    #[test]
    fn one_hot_grid_selects_a_cell() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64 + 1.0));
        let mut g = Tensor::zeros(&[1, 1, 2, 2]);
        g.set(&[0, 0, 1, 0], 1.0);
        let g = tape.constant(g);
        let v = apply_grid(&mut tape, f, g).unwrap();
        assert_eq!(tape.value(v).data(), &[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn apply_grid_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::<f64>::zeros(&[1, 2, 2, 2]));
        let g = tape.constant(Tensor::<f64>::zeros(&[1, 1, 2, 3]));
        assert!(apply_grid(&mut tape, f, g).is_err());
    }

    #[test]
    fn zero_module_output_is_scaled_max_filter() {
        let mut store = ParamStore::new();
        let mut m = zero_module(&mut store, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f1v = Tensor::<f64>::randn(&[1, 2, 4, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let f1 = tape.constant(f1v.clone());
        let f2 = tape.constant(Tensor::randn(&[1, 2, 2, 1], 1.0, &mut rng));
        let out = m.forward(&mut tape, &store, f1, f2, Mode::Train, Track::Grad).unwrap();
        let v = tape.value(out.features);
        for c in 0..2 {
            for i in 0..2 {
                let mx = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| f1v.at(&[0, c, 2 * i + dy, dx]))
                    .fold(f64::MIN, f64::max);
                assert!((v.at(&[0, c, i, 0]) - mx / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_placement_rule() {
        assert!(default_l2_for_depth(1) && default_l2_for_depth(2) && default_l2_for_depth(3));
        assert!(!default_l2_for_depth(4));
    }
}
