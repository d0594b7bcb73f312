//! Pairwise distances and single-query CMC / mAP.

use crate::error::{shape_err, Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `[rows, cols]` matrix of 64-bit distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{rows}×{cols} distance matrix needs {} entries, got {}", rows * cols, data.len()));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column indices of row `i` by ascending distance, ties by index.
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        let row = self.row(i);
        let mut idx: Vec<usize> = (0..self.cols).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        idx
    }
}

fn rows_of<T: Scalar>(m: &Tensor<T>) -> Result<(usize, usize)> {
    match *m.shape() {
        [r, d] => Ok((r, d)),
        ref s => Err(shape_err!("feature matrix must be rank 2, got {s:?}")),
    }
}

/// `D[i][j] = ‖q_i − g_j‖₂`, accumulated in 64-bit from direct differences.
pub fn pairwise_l2<T: Scalar>(q: &Tensor<T>, g: &Tensor<T>) -> Result<DistanceMatrix> {
    let (nq, d) = rows_of(q)?;
    let (ng, dg) = rows_of(g)?;
    if d != dg {
        return Err(shape_err!("feature dimensions differ: {d} vs {dg}"));
    }
    let mut data = Vec::with_capacity(nq * ng);
    for qi in q.data().chunks(d) {
        for gj in g.data().chunks(d) {
            let s: f64 = qi.iter().zip(gj).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
            data.push(s.sqrt());
        }
    }
    DistanceMatrix::new(nq, ng, data)
}

/// Retrieval scores for one ranking of the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `cmc[k-1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries with at least one valid gallery match.
    pub valid_queries: usize,
}

impl Metrics {
    /// Rank-k accuracy; ranks past the computed range saturate at the last value.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Labels<'a> {
    pub q_pids: &'a [i64],
    pub g_pids: &'a [i64],
    pub q_camids: &'a [i32],
    pub g_camids: &'a [i32],
}

/// Single-query CMC and mAP.
///
/// Gallery entries with the query's pid and camera (when `filter_same_camera`)
/// and entries with negative pid are discarded before scoring. Queries with no
/// remaining match are left out of both averages.
pub fn cmc_map(dist: &DistanceMatrix, labels: Labels<'_>, max_rank: usize, filter_same_camera: bool) -> Result<Metrics> {
    if max_rank < 1 {
        return Err(SagError::InvalidArgument("max_rank must be at least 1".into()));
    }
    let Labels {
        q_pids,
        g_pids,
        q_camids,
        g_camids,
    } = labels;
    if q_pids.len() != dist.rows || q_camids.len() != dist.rows || g_pids.len() != dist.cols || g_camids.len() != dist.cols {
        return Err(shape_err!("labels do not match the {}×{} distance matrix", dist.rows, dist.cols));
    }
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for i in 0..dist.rows {
        let (qp, qc) = (q_pids[i], q_camids[i]);
        let mut matches_seen = 0usize;
        let mut position = 0usize;
        let mut first_hit = None;
        let mut precision_sum = 0.0;
        for j in dist.ranking(i) {
            let junk = g_pids[j] < 0 || (filter_same_camera && g_pids[j] == qp && g_camids[j] == qc);
            if junk {
                continue;
            }
            position += 1;
            if g_pids[j] == qp {
                matches_seen += 1;
                first_hit.get_or_insert(position);
                precision_sum += matches_seen as f64 / position as f64;
            }
        }
        let Some(first) = first_hit else { continue };
        valid += 1;
        ap_sum += precision_sum / matches_seen as f64;
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k + 1 {
                *h += 1;
            }
        }
    }
    if valid == 0 {
        return Err(SagError::EmptyDataset("no query has a valid gallery match".into()));
    }
    Ok(Metrics {
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        map: ap_sum / valid as f64,
        valid_queries: valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = pairwise_l2(&x, &x).unwrap();
        assert_eq!(d.data, vec![0.0, 5.0, 5.0, 0.0]);
        assert!(pairwise_l2(&x, &Tensor::<f64>::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn hand_enumerated_average_precision() {
        // matches at filtered positions 1 and 3 -> AP = (1 + 2/3) / 2
        let d = DistanceMatrix::new(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let labels = Labels {
            q_pids: &[7],
            g_pids: &[7, 1, 7, 2],
            q_camids: &[0],
            g_camids: &[1, 1, 1, 1],
        };
        let m = cmc_map(&d, labels, 4, true).unwrap();
        assert!((m.map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.cmc, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn junk_is_removed_before_ranking() {
        // the same-camera match and the distractor come first but do not count
        let d = DistanceMatrix::new(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let labels = Labels {
            q_pids: &[3],
            g_pids: &[3, -1, 5, 3],
            q_camids: &[1],
            g_camids: &[1, 2, 2, 2],
        };
        let m = cmc_map(&d, labels, 3, true).unwrap();
        assert_eq!(m.cmc, vec![0.0, 1.0, 1.0]);
        assert!((m.map - 0.5).abs() < 1e-15);
        let unfiltered = cmc_map(&d, labels, 3, false).unwrap();
        assert_eq!(unfiltered.cmc[0], 1.0);
    }

    #[test]
    fn queries_without_matches_are_excluded() {
        let d = DistanceMatrix::new(2, 2, vec![0.1, 0.2, 0.1, 0.2]).unwrap();
        let labels = Labels {
            q_pids: &[1, 9],
            g_pids: &[1, 2],
            q_camids: &[0, 0],
            g_camids: &[1, 1],
        };
        let m = cmc_map(&d, labels, 1, true).unwrap();
        assert_eq!(m.valid_queries, 1);
        assert_eq!(m.cmc, vec![1.0]);
        assert!(cmc_map(&d, labels, 0, true).is_err());
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let d = DistanceMatrix::new(1, 3, vec![1.0, 0.5, 0.5]).unwrap();
        assert_eq!(d.ranking(0), vec![1, 2, 0]);
    }
}
