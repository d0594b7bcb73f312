//! Market-1501 style directory scanning.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, SagError};

use super::manifest::{DatasetManifest, Split};

/// Parses `{pid}_c{cam}...` file names; `pid` may be `-1`.
pub fn parse_market_name(name: &str) -> Option<(i64, i32)> {
    let (pid, rest) = name.split_once('_')?;
    let pid: i64 = pid.parse().ok()?;
    let rest = rest.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let cam: i32 = digits.parse().ok()?;
    (pid >= -1).then_some((pid, cam))
}

#[derive(Clone, Debug)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    /// Files whose names did not parse (or distractors inside the training split).
    pub skipped: usize,
}

/// Scans `bounding_box_train/`, `query/` and `bounding_box_test/` under `root`.
pub fn scan_market_dir(root: &Path) -> Result<ScanOutcome> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            return Err(SagError::Format(format!("missing directory {}", dir.display())));
        }
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            match parse_market_name(&name) {
                Some((pid, cam)) if !(split == Split::Train && pid < 0) => {
                    records.push((PathBuf::from(split.dir_name()).join(&name), pid, cam, split));
                }
                _ => skipped += 1,
            }
        }
    }
    let manifest = DatasetManifest::from_records(root, records)?;
    Ok(ScanOutcome { manifest, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_market_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg"), Some((2, 1)));
        assert_eq!(parse_market_name("-1_c3s2_000000_00.jpg"), Some((-1, 3)));
        assert_eq!(parse_market_name("1501_c6s4_001877_01.ppm"), Some((1501, 6)));
        assert_eq!(parse_market_name("Thumbs.db"), None);
        assert_eq!(parse_market_name("0002_x1.jpg"), None);
        assert_eq!(parse_market_name("-2_c1s1.jpg"), None);
    }
}
