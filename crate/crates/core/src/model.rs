//! Two-branch shared-weight backbone with attention grids at selected depths.
//!
//! The low-resolution input `I₂` and its ×2 bilinear upsample `I₁` run
//! through the same stem and residual stages (same [`ParamId`]s). After every
//! stage `i` in the depth set, the low-resolution feature is replaced by the
//! SAG output computed from both streams; the high-resolution stream carries
//! on unchanged. The classifier reads the final low-resolution feature.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result, SagError};
use crate::nn::{BatchNorm2dLayer, Conv2dLayer, LinearLayer, Mode, Track};
use crate::param::{ParamGroup, ParamStore};
use crate::sag::{default_l2_for_depth, AttentionGrid, SagModule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Total downsampling of the stem relative to its input.
pub const STEM_STRIDE: usize = 4;
/// Weight std of the freshly initialised classifier.
pub const CLASSIFIER_INIT_STD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn new(num_classes: usize) -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128],
            input_height: 160,
            input_width: 64,
            num_classes,
        }
    }

    /// Small configuration used by gradient checks: channels 4/8/16/32 on 64×32 inputs.
    pub fn tiny(num_classes: usize) -> Self {
        BackboneConfig {
            stage_channels: [4, 8, 16, 32],
            input_height: 64,
            input_width: 32,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(SagError::Config("stage channels must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(SagError::Config("num_classes must be positive".into()));
        }
        let unit = STEM_STRIDE << 3;
        if self.input_height % unit != 0 || self.input_width % unit != 0 {
            return Err(SagError::Config(format!(
                "input {}×{} must be a multiple of {unit} in both axes",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// Stride of stage `stage` (1-based) relative to its input: 1 for stage 1, else 2.
    pub fn stage_stride(stage: usize) -> usize {
        if stage == 1 {
            1
        } else {
            2
        }
    }

    /// Low-resolution extent after stage `stage` (1-based): `(H/2^{i+1}, W/2^{i+1})`.
    pub fn stage_extent(&self, stage: usize) -> (usize, usize) {
        let div = 1usize << (stage + 1);
        (self.input_height / div, self.input_width / div)
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[3]
    }
}

/// Subset of `{1, 2, 3, 4}` naming where attention modules sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct DepthSet(u8);

impl DepthSet {
    pub fn empty() -> Self {
        DepthSet(0)
    }

    pub fn from_depths(depths: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &d in depths {
            if !(1..=4).contains(&d) {
                return Err(SagError::Config(format!("attention depth {d} not in 1..=4")));
            }
            bits |= 1 << (d - 1);
        }
        Ok(DepthSet(bits))
    }

    pub fn contains(self, depth: usize) -> bool {
        (1..=4).contains(&depth) && self.0 & (1 << (depth - 1)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (1..=4).filter(move |&d| self.contains(d))
    }

    pub fn max(self) -> Option<usize> {
        self.iter().last()
    }

    /// Row label in the ablation tables, e.g. `Baseline`, `D4`, `D{1,2}`.
    pub fn label(self) -> String {
        let ds: Vec<String> = self.iter().map(|d| d.to_string()).collect();
        match ds.len() {
            0 => "Baseline".to_string(),
            1 => format!("D{}", ds[0]),
            _ => format!("D{{{}}}", ds.join(",")),
        }
    }

    /// The eight configurations of the depth ablation, in table order.
    pub fn ablation_rows() -> [DepthSet; 8] {
        let d = |v: &[usize]| DepthSet::from_depths(v).expect("valid depths");
        [
            DepthSet::empty(),
            d(&[1]),
            d(&[2]),
            d(&[3]),
            d(&[4]),
            d(&[1, 2]),
            d(&[1, 2, 3]),
            d(&[1, 2, 3, 4]),
        ]
    }
}

impl fmt::Display for DepthSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let ds: Vec<String> = self.iter().map(|d| d.to_string()).collect();
        f.write_str(&ds.join(","))
    }
}

impl FromStr for DepthSet {
    type Err = SagError;

    /// Accepts `none` or a comma list such as `1,2,3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(DepthSet::empty());
        }
        let depths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| SagError::Config(format!("bad depth '{p}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        DepthSet::from_depths(&depths)
    }
}

#[derive(Clone, Debug)]
struct ConvBn<T> {
    conv: Conv2dLayer,
    bn: BatchNorm2dLayer<T>,
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, seeds: &mut ChaCha8Rng) -> Self {
        ConvBn {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, seeds.next_u64()),
            bn: BatchNorm2dLayer::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn twin(&self) -> Self {
        ConvBn {
            conv: self.conv.clone(),
            bn: BatchNorm2dLayer::with_params(self.bn.gamma, self.bn.beta, self.bn.channels()),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode, track: Track) -> Result<Var> {
        let y = self.conv.forward(tape, store, x, track)?;
        self.bn.forward(tape, store, y, mode, track)
    }
}

/// Basic residual block: two 3×3 conv+BN units, ReLU after the sum.
#[derive(Clone, Debug)]
struct ResidualBlock<T> {
    first: ConvBn<T>,
    second: ConvBn<T>,
    projection: Option<ConvBn<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, seeds: &mut ChaCha8Rng) -> Self {
        let first = ConvBn::new(store, &format!("{name}.a"), cin, cout, 3, stride, seeds);
        let second = ConvBn::new(store, &format!("{name}.b"), cout, cout, 3, 1, seeds);
        let projection = (cin != cout || stride != 1)
            .then(|| ConvBn::new(store, &format!("{name}.proj"), cin, cout, 1, stride, seeds));
        ResidualBlock {
            first,
            second,
            projection,
        }
    }

    fn twin(&self) -> Self {
        ResidualBlock {
            first: self.first.twin(),
            second: self.second.twin(),
            projection: self.projection.as_ref().map(ConvBn::twin),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode, track: Track) -> Result<Var> {
        let h = self.first.forward(tape, store, x, mode, track)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, store, h, mode, track)?;
        let shortcut = match &mut self.projection {
            Some(p) => p.forward(tape, store, x, mode, track)?,
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }
}

/// Stem plus four residual stages; one instance per resolution.
#[derive(Clone, Debug)]
struct Branch<T> {
    stem: ConvBn<T>,
    stages: Vec<ResidualBlock<T>>,
}

impl<T: Scalar> Branch<T> {
    fn new(store: &mut ParamStore<T>, channels: [usize; 4], seeds: &mut ChaCha8Rng) -> Self {
        let stem = ConvBn::new(store, "stem", 3, channels[0], 3, 2, seeds);
        let mut cin = channels[0];
        let stages = (1..=4)
            .map(|i| {
                let block = ResidualBlock::new(
                    store,
                    &format!("stage{i}"),
                    cin,
                    channels[i - 1],
                    BackboneConfig::stage_stride(i),
                    seeds,
                );
                cin = channels[i - 1];
                block
            })
            .collect();
        Branch { stem, stages }
    }

    /// Same parameters, independent batch-norm running statistics.
    fn twin(&self) -> Self {
        Branch {
            stem: self.stem.twin(),
            stages: self.stages.iter().map(ResidualBlock::twin).collect(),
        }
    }

    /// 3×3/2 conv, BN, ReLU, 2×2 max pool: overall stride 4.
    fn stem(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode, track: Track) -> Result<Var> {
        let y = self.stem.forward(tape, store, x, mode, track)?;
        let y = tape.relu(y);
        tape.max_pool2d(y, 2)
    }

    fn stage(&mut self, i: usize, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode, track: Track) -> Result<Var> {
        self.stages[i - 1].forward(tape, store, x, mode, track)
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2dLayer<T>> {
        let mut out = vec![&self.stem.bn];
        for s in &self.stages {
            out.push(&s.first.bn);
            out.push(&s.second.bn);
            if let Some(p) = &s.projection {
                out.push(&p.bn);
            }
        }
        out
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2dLayer<T>> {
        let mut out = vec![&mut self.stem.bn];
        for s in &mut self.stages {
            out.push(&mut s.first.bn);
            out.push(&mut s.second.bn);
            if let Some(p) = &mut s.projection {
                out.push(&mut p.bn);
            }
        }
        out
    }
}

/// Gradient routing per stream; used to isolate the contribution of one
/// branch to a shared weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchTracking {
    pub low: Track,
    pub high: Track,
}

impl Default for BranchTracking {
    fn default() -> Self {
        BranchTracking {
            low: Track::Grad,
            high: Track::Grad,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Pooled final low-resolution feature, `[N, C₄]`.
    pub embedding: Var,
    pub grids: BTreeMap<usize, Var>,
    pub heatmaps: BTreeMap<usize, Var>,
}

#[derive(Clone, Debug)]
pub struct TwoBranchModel<T> {
    config: BackboneConfig,
    depths: DepthSet,
    seed: u64,
    pub store: ParamStore<T>,
    low: Branch<T>,
    high: Branch<T>,
    sags: BTreeMap<usize, SagModule<T>>,
    classifier: LinearLayer,
}

/// Builds a model with the default normalisation placement.
pub fn build_model<T: Scalar>(config: &BackboneConfig, depths: DepthSet, seed: u64) -> Result<TwoBranchModel<T>> {
    let l2 = DepthSet::from_depths(&(1..=4).filter(|&d| default_l2_for_depth(d)).collect::<Vec<_>>())?;
    build_model_with_l2(config, depths, l2, seed)
}

/// Builds a model; `l2_depths` lists the depths whose SAG output is L2-normalised.
pub fn build_model_with_l2<T: Scalar>(
    config: &BackboneConfig,
    depths: DepthSet,
    l2_depths: DepthSet,
    seed: u64,
) -> Result<TwoBranchModel<T>> {
    config.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let low = Branch::new(&mut store, config.stage_channels, &mut seeds);
    let high = low.twin();
    let sags = depths
        .iter()
        .map(|d| {
            let m = SagModule::new(
                &mut store,
                &format!("sag{d}"),
                config.stage_channels[d - 1],
                l2_depths.contains(d),
                seeds.next_u64(),
            );
            (d, m)
        })
        .collect();
    let classifier = LinearLayer::new(
        &mut store,
        "classifier",
        config.embedding_dim(),
        config.num_classes,
        CLASSIFIER_INIT_STD,
        ParamGroup::Classifier,
        seeds.next_u64(),
    );
    Ok(TwoBranchModel {
        config: config.clone(),
        depths,
        seed,
        store,
        low,
        high,
        sags,
        classifier,
    })
}

impl<T: Scalar> TwoBranchModel<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn depths(&self) -> DepthSet {
        self.depths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sag(&self, depth: usize) -> Option<&SagModule<T>> {
        self.sags.get(&depth)
    }

    pub fn sag_mut(&mut self, depth: usize) -> Option<&mut SagModule<T>> {
        self.sags.get_mut(&depth)
    }

    /// Depths whose SAG output is L2-normalised.
    pub fn l2_depths(&self) -> DepthSet {
        let ds: Vec<usize> = self.sags.iter().filter(|(_, m)| m.apply_l2).map(|(&d, _)| d).collect();
        DepthSet::from_depths(&ds).expect("depths come from a DepthSet")
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardOutput> {
        self.forward_tracked(tape, x, mode, BranchTracking::default())
    }

    pub fn forward_tracked(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        tracking: BranchTracking,
    ) -> Result<ForwardOutput> {
        let shape = tape.shape(x).to_vec();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input_height || shape[3] != cfg.input_width {
            return Err(shape_err!(
                "model expects N×3×{}×{} input, got {shape:?}",
                cfg.input_height,
                cfg.input_width
            ));
        }
        let store = &self.store;
        let top = self.depths.max().unwrap_or(0);

        let mut low = self.low.stem(tape, store, x, mode, tracking.low)?;
        let mut high = if top > 0 {
            let up = tape.upsample2x(x)?;
            Some(self.high.stem(tape, store, up, mode, tracking.high)?)
        } else {
            None
        };

        let mut grids = BTreeMap::new();
        let mut heatmaps = BTreeMap::new();
        for i in 1..=4 {
            low = self.low.stage(i, tape, store, low, mode, tracking.low)?;
            if i <= top {
                let h = high.expect("high stream runs up to the deepest attention depth");
                high = Some(self.high.stage(i, tape, store, h, mode, tracking.high)?);
            }
            if let Some(sag) = self.sags.get_mut(&i) {
                let f1 = high.expect("high stream present");
                let out = sag.forward(tape, store, f1, low, mode, tracking.low)?;
                low = out.features;
                grids.insert(i, out.grid);
                heatmaps.insert(i, out.heatmap);
            }
        }
        let embedding = tape.global_avg_pool(low)?;
        let logits = self.classifier.forward(tape, store, embedding, tracking.low)?;
        Ok(ForwardOutput {
            logits,
            embedding,
            grids,
            heatmaps,
        })
    }

    /// Eval-mode pooled features, before the classifier.
    pub fn extract_embedding(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Eval-mode attention grids for every configured depth.
    pub fn attention_grids(&mut self, batch: &Tensor<T>) -> Result<BTreeMap<usize, AttentionGrid<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        out.grids
            .iter()
            .map(|(&d, &g)| Ok((d, AttentionGrid::new(tape.value(g).clone())?)))
            .collect()
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Named running-statistic buffers, in a fixed order.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut groups = vec![("low".to_string(), self.low.bn_layers()), ("high".to_string(), self.high.bn_layers())];
        groups.extend(self.sags.iter().map(|(d, m)| (format!("sag{d}"), vec![&m.bn])));
        let mut out = Vec::new();
        for (prefix, layers) in groups {
            for (i, bn) in layers.into_iter().enumerate() {
                out.push((format!("{prefix}.bn{i}.running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.bn{i}.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut groups = vec![
            ("low".to_string(), self.low.bn_layers_mut()),
            ("high".to_string(), self.high.bn_layers_mut()),
        ];
        groups.extend(self.sags.iter_mut().map(|(d, m)| (format!("sag{d}"), vec![&mut m.bn])));
        let mut out = Vec::new();
        for (prefix, layers) in groups {
            for (i, bn) in layers.into_iter().enumerate() {
                out.push((format!("{prefix}.bn{i}.running_mean"), &mut bn.running_mean));
                out.push((format!("{prefix}.bn{i}.running_var"), &mut bn.running_var));
            }
        }
        out
    }

    /// Element-type conversion of parameters and buffers.
    pub fn cast<U: Scalar>(&self) -> TwoBranchModel<U> {
        let mut out: TwoBranchModel<U> =
            build_model_with_l2(&self.config, self.depths, self.l2_depths(), self.seed).expect("config already validated");
        for (dst, src) in out.store.iter_mut().zip(self.store.iter()) {
            dst.value = src.value.cast();
        }
        let src_buffers: Vec<Tensor<U>> = self.buffers().into_iter().map(|(_, t)| t.cast()).collect();
        for ((_, dst), src) in out.buffers_mut().into_iter().zip(src_buffers) {
            *dst = src;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_set_parsing() {
        assert_eq!("none".parse::<DepthSet>().unwrap(), DepthSet::empty());
        let d: DepthSet = "1,2,3,4".parse().unwrap();
        assert_eq!(d.iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(d.to_string(), "1,2,3,4");
        assert!("5".parse::<DepthSet>().is_err());
        assert!("0".parse::<DepthSet>().is_err());
        assert!("x".parse::<DepthSet>().is_err());
        assert_eq!("4".parse::<DepthSet>().unwrap().label(), "D4");
        assert_eq!("1,2".parse::<DepthSet>().unwrap().label(), "D{1,2}");
    }

    #[test]
    fn stage_extents_for_default_input() {
        let cfg = BackboneConfig::new(10);
        let ext: Vec<_> = (1..=4).map(|i| cfg.stage_extent(i)).collect();
        assert_eq!(ext, vec![(40, 16), (20, 8), (10, 4), (5, 2)]);
    }

    #[test]
    fn branches_share_parameter_handles() {
        let m: TwoBranchModel<f32> = build_model(&BackboneConfig::tiny(3), "1,4".parse().unwrap(), 0).unwrap();
        assert_eq!(m.low.stem.conv.weight, m.high.stem.conv.weight);
        for (a, b) in m.low.stages.iter().zip(&m.high.stages) {
            assert_eq!(a.first.conv.weight, b.first.conv.weight);
            assert_eq!(a.second.bn.gamma, b.second.bn.gamma);
        }
    }

    #[test]
    fn l2_defaults_follow_depth_rule() {
        let m: TwoBranchModel<f32> = build_model(&BackboneConfig::tiny(3), "1,2,3,4".parse().unwrap(), 0).unwrap();
        assert_eq!(m.l2_depths().to_string(), "1,2,3");
        let m2: TwoBranchModel<f32> =
            build_model_with_l2(&BackboneConfig::tiny(3), "1,4".parse().unwrap(), "4".parse().unwrap(), 0).unwrap();
        assert!(!m2.sag(1).unwrap().apply_l2);
        assert!(m2.sag(4).unwrap().apply_l2);
    }

    #[test]
    fn rejects_wrong_input_extent() {
        let mut m: TwoBranchModel<f32> = build_model(&BackboneConfig::tiny(3), DepthSet::empty(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 3, 32, 16])).is_err());
    }
}
