//! k-reciprocal re-ranking with Jaccard distance over soft neighbour sets.

use crate::error::{shape_err, Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::metrics::DistanceMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, total: usize) -> Result<()> {
        if !(self.k1 > self.k2 && self.k2 >= 1) {
            return Err(SagError::InvalidArgument(format!(
                "re-ranking needs k1 > k2 ≥ 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SagError::InvalidArgument(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.k1 >= total {
            return Err(SagError::InvalidArgument(format!(
                "k1={} must be below the {total} query and gallery items",
                self.k1
            )));
        }
        Ok(())
    }
}

/// Indices `f` among the first `k + 1` neighbours of `i` that also have `i`
/// among their first `k + 1` neighbours, in rank order.
fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..k + 1]
        .iter()
        .copied()
        .filter(|&f| rank[f][..k + 1].contains(&i))
        .collect()
}

/// Re-ranked query-to-gallery distances.
///
/// Works on squared distances over the union of query and gallery, each row
/// divided by its maximum. Every item's k1-reciprocal set is expanded with the
/// round(k1/2)-reciprocal sets of its members when they overlap by more than
/// two thirds, turned into Gaussian-weighted assignment vectors, averaged over
/// the k2 nearest neighbours, and compared by Jaccard distance. The result is
/// `(1 − λ)·J + λ·D`.
pub fn k_reciprocal_rerank<T: Scalar>(q: &Tensor<T>, g: &Tensor<T>, params: RerankParams) -> Result<DistanceMatrix> {
    let (nq, d) = match *q.shape() {
        [n, d] => (n, d),
        ref s => return Err(shape_err!("query features must be rank 2, got {s:?}")),
    };
    let ng = match *g.shape() {
        [n, dg] if dg == d => n,
        ref s => return Err(shape_err!("gallery features {s:?} do not match dimension {d}")),
    };
    let n = nq + ng;
    params.validate(n)?;
    let feats: Vec<f64> = q.data().iter().chain(g.data()).map(|v| v.as_f64()).collect();
    let row = |i: usize| &feats[i * d..(i + 1) * d];

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = row(i).iter().zip(row(j)).map(|(a, b)| (a - b).powi(2)).sum();
        }
    }
    for r in dist.chunks_mut(n) {
        let max = r.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            r.iter_mut().for_each(|v| *v /= max);
        }
    }
    let rank: Vec<Vec<usize>> = dist
        .chunks(n)
        .map(|r| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let half = (params.k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        let base = reciprocal(&rank, i, params.k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = reciprocal(&rank, c, half);
            let overlap = cand.iter().filter(|x| base.contains(x)).count();
            if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend_from_slice(&cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-dist[i * n + j]).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expanded.iter().zip(weights) {
            v[i * n + j] = w / total;
        }
    }
    if params.k2 != 1 {
        let mut qe = vec![0.0f64; n * n];
        for i in 0..n {
            let out = &mut qe[i * n..(i + 1) * n];
            for &m in &rank[i][..params.k2] {
                for (o, &x) in out.iter_mut().zip(&v[m * n..(m + 1) * n]) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= params.k2 as f64);
        }
        v = qe;
    }

    let lambda = params.lambda;
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let vi = &v[i * n..(i + 1) * n];
        for j in nq..n {
            let vj = &v[j * n..(j + 1) * n];
            let shared: f64 = vi.iter().zip(vj).map(|(a, b)| a.min(*b)).sum();
            let jaccard = 1.0 - shared / (2.0 - shared);
            out.push((1.0 - lambda) * jaccard + lambda * dist[i * n + j]);
        }
    }
    DistanceMatrix::new(nq, ng, out)
}
