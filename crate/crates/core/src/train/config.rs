//! Training hyperparameters and the step learning-rate policy.

use std::fmt::Write as _;

use crate::error::{Result, SagError};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub gamma: f64,
    pub step_size: usize,
    pub seed: u64,
    pub flip_probability: f64,
    pub erase_probability: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    /// Images per identity held out for validation.
    pub val_per_identity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_backbone: 0.01,
            lr_classifier: 0.1,
            gamma: 0.1,
            step_size: 30,
            seed: 0,
            flip_probability: 0.5,
            erase_probability: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
            val_per_identity: 1,
        }
    }
}

/// Per-group learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub backbone: f64,
    pub classifier: f64,
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| SagError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| SagError::Config(format!("{key} expects lo,hi")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "epochs",
        "batch_size",
        "momentum",
        "weight_decay",
        "lr_backbone",
        "lr_classifier",
        "gamma",
        "step_size",
        "seed",
        "flip_probability",
        "erase_probability",
        "erase_area",
        "erase_aspect",
        "val_per_identity",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "lr_backbone" => self.lr_backbone = parse_num(key, value)?,
            "lr_classifier" => self.lr_classifier = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "step_size" => self.step_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "flip_probability" => self.flip_probability = parse_num(key, value)?,
            "erase_probability" => self.erase_probability = parse_num(key, value)?,
            "erase_area" => self.erase_area = parse_range(key, value)?,
            "erase_aspect" => self.erase_aspect = parse_range(key, value)?,
            "val_per_identity" => self.val_per_identity = parse_num(key, value)?,
            _ => return Err(SagError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SagError::Config(format!("expected key=value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "lr_backbone={}", self.lr_backbone);
        let _ = writeln!(s, "lr_classifier={}", self.lr_classifier);
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "step_size={}", self.step_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "flip_probability={}", self.flip_probability);
        let _ = writeln!(s, "erase_probability={}", self.erase_probability);
        let _ = writeln!(s, "erase_area={},{}", self.erase_area.0, self.erase_area.1);
        let _ = writeln!(s, "erase_aspect={},{}", self.erase_aspect.0, self.erase_aspect.1);
        let _ = writeln!(s, "val_per_identity={}", self.val_per_identity);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SagError::Config(m));
        let rates = [
            ("momentum", self.momentum),
            ("lr_backbone", self.lr_backbone),
            ("lr_classifier", self.lr_classifier),
            ("gamma", self.gamma),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.step_size < 1 || self.batch_size < 1 {
            return fail("step_size and batch_size must be at least 1".into());
        }
        for (name, p) in [("flip_probability", self.flip_probability), ("erase_probability", self.erase_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let (a0, a1) = self.erase_area;
        if !(0.0 < a0 && a0 <= a1 && a1 < 1.0) {
            return fail(format!("erase_area must satisfy 0 < lo ≤ hi < 1, got {a0},{a1}"));
        }
        let (r0, r1) = self.erase_aspect;
        if !(0.0 < r0 && r0 <= r1) {
            return fail(format!("erase_aspect must satisfy 0 < lo ≤ hi, got {r0},{r1}"));
        }
        Ok(())
    }
}

/// `base · γ^⌊epoch / step⌋`, computed as `base / (1/γ)^m` so decade steps
/// land exactly on the decimal literals (0.01 → 0.001 → 0.0001).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> LearningRates {
    let m = (epoch / config.step_size) as i32;
    let div = (1.0 / config.gamma).powi(m);
    LearningRates {
        backbone: config.lr_backbone / div,
        classifier: config.lr_classifier / div,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig {
            seed: 9,
            erase_area: (0.1, 0.2),
            ..TrainConfig::default()
        };
        c.epochs = 7;
        let mut d = TrainConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let mut c = TrainConfig::default();
        c.apply_text("# header\nepochs = 3 # short run\n\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.apply_text("epoch=3").is_err());
        assert!(c.apply_text("epochs").is_err());
        assert!(c.apply_text("epochs=three").is_err());
    }

    #[test]
    fn validation_rejects_bad_rates() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { step_size: 0, ..Default::default() },
            TrainConfig { lr_backbone: 0.0, ..Default::default() },
            TrainConfig { momentum: -0.9, ..Default::default() },
            TrainConfig { erase_area: (0.5, 0.2), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn lr_steps_by_decades() {
        let c = TrainConfig::default();
        let at = |k| {
            let r = lr_at(&c, k);
            (r.backbone, r.classifier)
        };
        assert_eq!(at(0), (0.01, 0.1));
        assert_eq!(at(29), (0.01, 0.1));
        assert_eq!(at(30), (0.001, 0.01));
        assert_eq!(at(60), (1e-4, 1e-3));
    }
}
