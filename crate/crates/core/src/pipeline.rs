//! Manifest-level drivers shared by the command-line tool and the test suites.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{DatasetManifest, LabeledImages, Split};
use crate::error::Result;
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::model::{build_model, build_model_with_l2, BackboneConfig, DepthSet, TwoBranchModel};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig, TrainOutcome};

/// Fixed output tree below `--out`.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn create(root: &Path) -> Result<Self> {
        let layout = OutputLayout { root: root.to_path_buf() };
        for d in [layout.checkpoints(), layout.logs(), layout.reports(), layout.viz()] {
            fs::create_dir_all(d)?;
        }
        Ok(layout)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }
}

/// File-name friendly tag of a depth set: `baseline`, `d4`, `d1-2`.
pub fn run_name(depths: DepthSet) -> String {
    if depths.is_empty() {
        "baseline".into()
    } else {
        format!("d{}", depths.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-"))
    }
}

/// Grid extents of every depth, e.g. `(h=5,w=2)`; `-` for the baseline.
pub fn geometry_label(config: &BackboneConfig, depths: DepthSet) -> String {
    if depths.is_empty() {
        return "-".into();
    }
    depths
        .iter()
        .map(|d| {
            let (h, w) = config.stage_extent(d);
            format!("(h={h},w={w})")
        })
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub stage_channels: [usize; 4],
    pub depths: DepthSet,
    /// `None` keeps the default placement (depths 1–3).
    pub l2_depths: Option<DepthSet>,
}

impl ModelSpec {
    pub fn backbone(&self, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.stage_channels,
            ..BackboneConfig::new(num_classes)
        }
    }

    pub fn build<T: Scalar>(&self, num_classes: usize, seed: u64) -> Result<TwoBranchModel<T>> {
        let cfg = self.backbone(num_classes);
        match self.l2_depths {
            Some(l2) => build_model_with_l2(&cfg, self.depths, l2, seed),
            None => build_model(&cfg, self.depths, seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub outcome: TrainOutcome<T>,
    pub final_model: TwoBranchModel<T>,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Loads the training split, holds out validation images, trains, and writes
/// `logs/{name}.log`, `checkpoints/{name}-final.ckpt` and `checkpoints/{name}-best.ckpt`.
pub fn train_from_manifest<T: Scalar>(
    manifest: &DatasetManifest,
    spec: &ModelSpec,
    config: &TrainConfig,
    layout: &OutputLayout,
    name: &str,
    mut on_line: impl FnMut(&str),
) -> Result<TrainRun<T>> {
    config.validate()?;
    let all = LabeledImages::<T>::load(manifest, Split::Train)?;
    let (train_set, val_set) = all.hold_out(config.val_per_identity);
    let mut model = spec.build::<T>(manifest.num_train_ids(), config.seed)?;
    let log_path = layout.logs().join(format!("{name}.log"));
    let mut log = File::create(&log_path)?;
    let mut io_err = None;
    let outcome = train(&mut model, &train_set, &val_set, manifest.mean, config, |e| {
        let line = e.line();
        if let Err(err) = writeln!(log, "{line}") {
            io_err.get_or_insert(err);
        }
        on_line(&line);
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let final_checkpoint = layout.checkpoints().join(format!("{name}-final.ckpt"));
    let best_checkpoint = layout.checkpoints().join(format!("{name}-best.ckpt"));
    let last_epoch = config.epochs.saturating_sub(1);
    save_checkpoint(&model, &CheckpointMeta::for_model(&model, last_epoch, manifest.mean), &final_checkpoint)?;
    save_checkpoint(
        &outcome.best,
        &CheckpointMeta::for_model(&outcome.best, outcome.best_epoch, manifest.mean),
        &best_checkpoint,
    )?;
    Ok(TrainRun {
        outcome,
        final_model: model,
        log_path,
        final_checkpoint,
        best_checkpoint,
    })
}

/// Query-vs-gallery evaluation of a model on the manifest's test splits.
pub fn eval_on_manifest<T: Scalar>(
    model: &mut TwoBranchModel<T>,
    manifest: &DatasetManifest,
    mean: [f64; 3],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let query = LabeledImages::<T>::load(manifest, Split::Query)?;
    let gallery = LabeledImages::<T>::load(manifest, Split::Gallery)?;
    evaluate(model, &query, &gallery, mean, options)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub depths: DepthSet,
    pub geometry: String,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn line(&self) -> String {
        let m = &self.report.plain;
        let mut s = format!(
            "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            self.depths.label(),
            self.geometry,
            100.0 * m.rank(1),
            100.0 * m.rank(5),
            100.0 * m.rank(10),
            100.0 * m.map
        );
        if let Some(rr) = &self.report.reranked {
            s.push_str(&format!("\t{:.2}\t{:.2}", 100.0 * rr.rank(1), 100.0 * rr.map));
        }
        s
    }
}

pub const ABLATION_HEADER: &str = "config\tgrid\tR1\tR5\tR10\tmAP";

pub fn ablation_report(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    if rows.iter().any(|r| r.report.reranked.is_some()) {
        s.push_str("\tR1+RR\tmAP+RR");
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.line());
        s.push('\n');
    }
    s
}

/// Trains one ablation configuration and evaluates its best-validation weights.
pub fn ablation_row<T: Scalar>(
    manifest: &DatasetManifest,
    stage_channels: [usize; 4],
    depths: DepthSet,
    config: &TrainConfig,
    options: &EvalOptions,
    layout: &OutputLayout,
    on_line: impl FnMut(&str),
) -> Result<AblationRow> {
    let spec = ModelSpec {
        stage_channels,
        depths,
        l2_depths: None,
    };
    let mut run = train_from_manifest::<T>(manifest, &spec, config, layout, &run_name(depths), on_line)?;
    let report = eval_on_manifest(&mut run.outcome.best, manifest, manifest.mean, options)?;
    Ok(AblationRow {
        depths,
        geometry: geometry_label(run.outcome.best.config(), depths),
        report,
    })
}
