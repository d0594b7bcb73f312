//! Layers: parameter handles plus the tape calls that apply them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistic update rate.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-normal initialisation: `N(0, 2 / fan_in)` with `fan_in` the product
/// of all extents after the first.
pub fn he_init<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
}

/// How a layer reads its parameters during one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    /// Parameters are tape leaves and receive gradients.
    Grad,
    /// Parameters enter as constants.
    Frozen,
}

pub(crate) fn read_param<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId, track: Track) -> Var {
    match track {
        Track::Grad => tape.param(store, id),
        Track::Frozen => tape.frozen_param(store, id),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamGroup::Backbone,
            he_init(&[out_channels, in_channels, kernel, kernel], seed),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[out_channels])));
        Conv2dLayer {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, track: Track) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(shape_err!("conv expects {} input channels, got {c}", self.in_channels));
        }
        let w = read_param(tape, store, self.weight, track);
        let b = self.bias.map(|b| read_param(tape, store, b, track));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch normalisation over N·H·W per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2dLayer<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm2dLayer<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamGroup::Backbone, Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), ParamGroup::Backbone, Tensor::zeros(&[channels]));
        Self::with_params(gamma, beta, channels)
    }

    /// A layer over existing affine parameters with fresh running statistics.
    pub fn with_params(gamma: ParamId, beta: ParamId, channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma,
            beta,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    /// Train mode normalises with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the running
    /// estimates only.
    pub fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode, track: Track) -> Result<Var> {
        let gamma = read_param(tape, store, self.gamma, track);
        let beta = read_param(tape, store, self.beta, track);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let correction = if stats.count > 1 {
                    T::lit(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = (T::one() - m) * *r + m * b * correction;
                }
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
        }
    }
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f64,
        group: ParamGroup,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::randn(&[out_features, in_features], std, &mut rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_features]));
        LinearLayer {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, track: Track) -> Result<Var> {
        let w = read_param(tape, store, self.weight, track);
        let b = read_param(tape, store, self.bias, track);
        tape.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_is_seeded() {
        let a = he_init::<f32>(&[4, 3, 3, 3], 7);
        let b = he_init::<f32>(&[4, 3, 3, 3], 7);
        let c = he_init::<f32>(&[4, 3, 3, 3], 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn he_init_variance_matches_fan_in() {
        // fan_in = 50 -> variance 2/50 = 0.04
        let t = he_init::<f64>(&[2000, 50], 3);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.04).abs() < 0.004, "variance {var}");
    }

    #[test]
    fn conv_layer_rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2dLayer::new(&mut store, "c", 3, 4, 3, 1, 1, true, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(conv.forward(&mut tape, &store, x, Track::Grad).is_err());
        assert_eq!(conv.output_extent(5, 5), (5, 5));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut bn = BatchNorm2dLayer::new(&mut store, "bn", 1);
        let mut tape = Tape::new();
        // channel values {1, 3}: mean 2, biased var 1, unbiased var 2
        let x = tape.constant(Tensor::from_f64(&[2, 1, 1, 1], &[1.0, 3.0]).unwrap());
        let y = bn.forward(&mut tape, &store, x, Mode::Train, Track::Grad).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }
}
