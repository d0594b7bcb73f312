//! Embedding sets, their file format, and end-to-end evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::LabeledImages;
use crate::error::{shape_err, Result, SagError};
use crate::model::TwoBranchModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::preprocess;

use super::metrics::{cmc_map, pairwise_l2, Labels, Metrics};
use super::rerank::{k_reciprocal_rerank, RerankParams};

pub const EMBEDDING_MAGIC: &[u8; 7] = b"SAGEMB1";
const EMBED_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    /// `[M, d]`.
    pub features: Tensor<T>,
    pub pids: Vec<i64>,
    pub camids: Vec<i32>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(features: Tensor<T>, pids: Vec<i64>, camids: Vec<i32>) -> Result<Self> {
        match *features.shape() {
            [m, _] if m == pids.len() && m == camids.len() => Ok(EmbeddingSet { features, pids, camids }),
            ref s => Err(shape_err!(
                "features {s:?} do not align with {} pids and {} camids",
                pids.len(),
                camids.len()
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// `SAGEMB1`, count and dimension as little-endian u64, then per item
    /// `(pid: i64, camid: i32, d × f32)`.
    pub fn encode(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = EMBEDDING_MAGIC.to_vec();
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for (i, row) in self.features.data().chunks(d).enumerate() {
            out.extend_from_slice(&self.pids[i].to_le_bytes());
            out.extend_from_slice(&self.camids[i].to_le_bytes());
            for v in row {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = || SagError::Format("malformed embedding file".into());
        if bytes.len() < 23 || &bytes[..7] != EMBEDDING_MAGIC {
            return Err(SagError::Format("not a SAGEMB1 embedding file".into()));
        }
        let m = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes")) as usize;
        let d = u64::from_le_bytes(bytes[15..23].try_into().expect("8 bytes")) as usize;
        let item = d.checked_mul(4).and_then(|x| x.checked_add(12)).ok_or_else(fail)?;
        if m == 0 || d == 0 || m.checked_mul(item).and_then(|x| x.checked_add(23)) != Some(bytes.len()) {
            return Err(fail());
        }
        let (mut pids, mut camids, mut feats) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m * d));
        for rec in bytes[23..].chunks_exact(item) {
            pids.push(i64::from_le_bytes(rec[..8].try_into().expect("8 bytes")));
            camids.push(i32::from_le_bytes(rec[8..12].try_into().expect("4 bytes")));
            feats.extend(rec[12..].chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)));
        }
        EmbeddingSet::new(Tensor::new(&[m, d], feats)?, pids, camids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Eval-mode embeddings of a labelled image set.
pub fn embed_images<T: Scalar>(
    model: &mut TwoBranchModel<T>,
    set: &LabeledImages<T>,
    mean: [f64; 3],
) -> Result<EmbeddingSet<T>> {
    if set.is_empty() {
        return Err(SagError::EmptyDataset("nothing to embed".into()));
    }
    let (h, w) = (model.config().input_height, model.config().input_width);
    let d = model.config().embedding_dim();
    let mut feats = Vec::with_capacity(set.len() * d);
    for start in (0..set.len()).step_by(EMBED_BATCH) {
        let end = (start + EMBED_BATCH).min(set.len());
        let batch: Vec<Tensor<T>> =
            set.images[start..end].iter().map(|im| preprocess(im, mean, h, w)).collect::<Result<_>>()?;
        feats.extend_from_slice(model.extract_embedding(&Tensor::stack(&batch)?)?.data());
    }
    EmbeddingSet::new(Tensor::new(&[set.len(), d], feats)?, set.pids.clone(), set.camids.clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub rerank: Option<RerankParams>,
    pub max_rank: usize,
    pub filter_same_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            rerank: None,
            max_rank: 20,
            filter_same_camera: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub plain: Metrics,
    pub reranked: Option<Metrics>,
}

fn metric_row(label: &str, m: &Metrics) -> String {
    format!(
        "{label}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
        100.0 * m.rank(1),
        100.0 * m.rank(5),
        100.0 * m.rank(10),
        100.0 * m.map
    )
}

pub const REPORT_HEADER: &str = "model\tR1\tR5\tR10\tmAP";

impl EvalReport {
    /// Percentages in the R1/R5/R10/mAP column layout; a `+RR` row follows when re-ranked.
    pub fn to_tsv(&self, label: &str) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        s.push_str(&self.rows(label));
        s
    }

    /// Table rows without the header.
    pub fn rows(&self, label: &str) -> String {
        let mut s = metric_row(label, &self.plain);
        if let Some(rr) = &self.reranked {
            s.push_str(&metric_row(&format!("{label}+RR"), rr));
        }
        s
    }

    /// Machine-readable `key=value` lines with fractions in `[0, 1]`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |prefix: &str, m: &Metrics| {
            for k in [1, 5, 10] {
                let _ = writeln!(s, "{prefix}r{k}={:.6}", m.rank(k));
            }
            let _ = writeln!(s, "{prefix}map={:.6}", m.map);
            let _ = writeln!(s, "{prefix}valid_queries={}", m.valid_queries);
        };
        put("", &self.plain);
        if let Some(rr) = &self.reranked {
            put("rr_", rr);
        }
        s
    }
}

pub fn evaluate_embeddings<T: Scalar>(
    query: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(SagError::EmptyDataset("query and gallery must be non-empty".into()));
    }
    let labels = Labels {
        q_pids: &query.pids,
        g_pids: &gallery.pids,
        q_camids: &query.camids,
        g_camids: &gallery.camids,
    };
    let dist = pairwise_l2(&query.features, &gallery.features)?;
    let plain = cmc_map(&dist, labels, options.max_rank, options.filter_same_camera)?;
    let reranked = match options.rerank {
        Some(p) => {
            let d = k_reciprocal_rerank(&query.features, &gallery.features, p)?;
            Some(cmc_map(&d, labels, options.max_rank, options.filter_same_camera)?)
        }
        None => None,
    };
    Ok(EvalReport { plain, reranked })
}

/// Embeds both sets in eval mode and scores the query against the gallery.
pub fn evaluate<T: Scalar>(
    model: &mut TwoBranchModel<T>,
    query: &LabeledImages<T>,
    gallery: &LabeledImages<T>,
    mean: [f64; 3],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(SagError::EmptyDataset("query and gallery must be non-empty".into()));
    }
    let q = embed_images(model, query, mean)?;
    let g = embed_images(model, gallery, mean)?;
    evaluate_embeddings(&q, &g, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_file_round_trip() {
        let f = Tensor::<f32>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let set = EmbeddingSet::new(f, vec![-1, 42], vec![3, 1]).unwrap();
        let bytes = set.encode();
        assert_eq!(&bytes[..7], b"SAGEMB1");
        assert_eq!(bytes.len(), 23 + 2 * (12 + 12));
        assert_eq!(EmbeddingSet::<f32>::decode(&bytes).unwrap(), set);
        assert!(EmbeddingSet::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        assert!(EmbeddingSet::new(Tensor::<f32>::zeros(&[2, 3]), vec![1], vec![1, 2]).is_err());
    }

    #[test]
    fn report_layout() {
        let m = Metrics {
            cmc: vec![0.5, 0.75, 1.0],
            map: 0.625,
            valid_queries: 4,
        };
        let r = EvalReport {
            plain: m.clone(),
            reranked: Some(m),
        };
        let tsv = r.to_tsv("D4");
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "model\tR1\tR5\tR10\tmAP");
        assert_eq!(lines[1], "D4\t50.00\t100.00\t100.00\t62.50");
        assert!(lines[2].starts_with("D4+RR\t"));
        assert!(r.to_kv().contains("rr_map=0.625000"));
    }
}
