//! Dataset manifest: image records plus the training-split pixel mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ppm::load_image;

pub const MANIFEST_HEADER: &str = "SAGMANIFEST 1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    /// Market-1501 directory holding this split.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = SagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(SagError::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestItem {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub raw_pid: i64,
    /// Contiguous class index for training items; the raw pid otherwise.
    pub pid: i64,
    pub camid: i32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub items: Vec<ManifestItem>,
    /// Per-channel mean of training pixels, in `[0, 1]` units.
    pub mean: [f64; 3],
}

impl DatasetManifest {
    /// Builds a manifest, remapping training pids to `0..K` in order of first
    /// appearance of the sorted raw pids, and computing the training mean.
    pub fn from_records(root: &Path, records: Vec<(PathBuf, i64, i32, Split)>) -> Result<Self> {
        let train_pids: BTreeSet<i64> = records
            .iter()
            .filter(|r| r.3 == Split::Train)
            .map(|r| r.1)
            .collect();
        if train_pids.is_empty() {
            return Err(SagError::EmptyDataset("training split has no images".into()));
        }
        let remap: BTreeMap<i64, i64> = train_pids.iter().enumerate().map(|(i, &p)| (p, i as i64)).collect();
        let items = records
            .into_iter()
            .map(|(path, raw_pid, camid, split)| ManifestItem {
                pid: if split == Split::Train { remap[&raw_pid] } else { raw_pid },
                path,
                raw_pid,
                camid,
                split,
            })
            .collect();
        let mut m = DatasetManifest {
            root: root.to_path_buf(),
            items,
            mean: [0.0; 3],
        };
        m.mean = m.compute_mean()?;
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Number of training classes.
    pub fn num_train_ids(&self) -> usize {
        self.split(Split::Train).map(|it| it.pid).collect::<BTreeSet<_>>().len()
    }

    /// Distinct non-distractor identities in the query and gallery splits.
    pub fn num_test_ids(&self) -> usize {
        self.items
            .iter()
            .filter(|it| it.split != Split::Train && it.raw_pid >= 0)
            .map(|it| it.raw_pid)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn num_cameras(&self) -> usize {
        self.items.iter().map(|it| it.camid).collect::<BTreeSet<_>>().len()
    }

    pub fn resolve(&self, item: &ManifestItem) -> PathBuf {
        self.root.join(&item.path)
    }

    /// Pixel mean over every training image, accumulated in 64-bit.
    pub fn compute_mean(&self) -> Result<[f64; 3]> {
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for item in self.split(Split::Train) {
            let img: Tensor<f64> = load_image(&self.resolve(item))?;
            let plane = img.numel() / 3;
            for (c, s) in sums.iter_mut().enumerate() {
                *s += img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            count += plane;
        }
        if count == 0 {
            return Err(SagError::EmptyDataset("training split has no pixels".into()));
        }
        Ok(sums.map(|s| s / count as f64))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for it in &self.items {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                it.path.display(),
                it.raw_pid,
                it.pid,
                it.camid,
                it.split
            ));
        }
        for (name, v) in ["mean_r", "mean_g", "mean_b"].iter().zip(self.mean) {
            s.push_str(&format!("{name}\t{v:.9}\n"));
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(SagError::Format(format!("manifest must start with {MANIFEST_HEADER:?}")));
        }
        let bad = |line: &str| SagError::Format(format!("bad manifest line {line:?}"));
        let mut items = Vec::new();
        let mut mean = [None; 3];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                [key, v] => {
                    let slot = match *key {
                        "mean_r" => 0,
                        "mean_g" => 1,
                        "mean_b" => 2,
                        _ => return Err(bad(line)),
                    };
                    mean[slot] = Some(v.parse::<f64>().map_err(|_| bad(line))?);
                }
                [path, raw, pid, cam, split] => items.push(ManifestItem {
                    path: PathBuf::from(path),
                    raw_pid: raw.parse().map_err(|_| bad(line))?,
                    pid: pid.parse().map_err(|_| bad(line))?,
                    camid: cam.parse().map_err(|_| bad(line))?,
                    split: split.parse()?,
                }),
                _ => return Err(bad(line)),
            }
        }
        let [Some(r), Some(g), Some(b)] = mean else {
            return Err(SagError::Format("manifest is missing mean_r/mean_g/mean_b".into()));
        };
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            items,
            mean: [r, g, b],
        })
    }

    /// Writes `manifest.tsv` into the dataset root.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Reads `dir/manifest.tsv`, or the file itself when `path` is a file.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| SagError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", file.display()))))?;
        Self::parse(&root, &text)
    }
}

/// Images of one split with their labels, held in memory.
#[derive(Clone, Debug)]
pub struct LabeledImages<T> {
    pub images: Vec<Tensor<T>>,
    pub pids: Vec<i64>,
    pub camids: Vec<i32>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut set = LabeledImages {
            images: Vec::new(),
            pids: Vec::new(),
            camids: Vec::new(),
        };
        for item in manifest.split(split) {
            set.images.push(load_image(&manifest.resolve(item))?);
            set.pids.push(item.pid);
            set.camids.push(item.camid);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Holds out the last `per_identity` images of every identity; returns `(kept, held_out)`.
    /// Identities with no more images than that keep all of them.
    pub fn hold_out(&self, per_identity: usize) -> (Self, Self) {
        let mut remaining: BTreeMap<i64, usize> = BTreeMap::new();
        for &p in &self.pids {
            *remaining.entry(p).or_default() += 1;
        }
        let mut taken: BTreeMap<i64, usize> = BTreeMap::new();
        let mut held = vec![false; self.len()];
        for i in (0..self.len()).rev() {
            let p = self.pids[i];
            let t = taken.entry(p).or_default();
            if *t < per_identity && remaining[&p] > per_identity {
                *t += 1;
                held[i] = true;
            }
        }
        let pick = |want: bool| LabeledImages {
            images: (0..self.len()).filter(|&i| held[i] == want).map(|i| self.images[i].clone()).collect(),
            pids: (0..self.len()).filter(|&i| held[i] == want).map(|i| self.pids[i]).collect(),
            camids: (0..self.len()).filter(|&i| held[i] == want).map(|i| self.camids[i]).collect(),
        };
        (pick(false), pick(true))
    }
}
