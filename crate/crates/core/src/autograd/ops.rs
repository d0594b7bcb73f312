//! Elementwise and reduction operations.

use crate::error::{shape_err, Result, SagError};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor};

use super::tape::{Op, OpKind, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// For every linear position of `shape`, the dot product of its
/// multi-index with `strides`.
pub(crate) fn strided_index(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel_of(shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Index map broadcasting `b_shape` onto `out_shape` (trailing-axis
/// alignment, extents equal or 1).
fn broadcast_index(out_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return Err(shape_err!("cannot broadcast {b_shape:?} onto {out_shape:?}"));
    }
    let lead = out_shape.len() - b_shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    let mut s = 1usize;
    for ax in (0..b_shape.len()).rev() {
        let (bd, od) = (b_shape[ax], out_shape[lead + ax]);
        if bd == od {
            strides[lead + ax] = s;
        } else if bd != 1 {
            return Err(shape_err!("cannot broadcast {b_shape:?} onto {out_shape:?}"));
        }
        s *= bd;
    }
    Ok(strided_index(out_shape, &strides))
}

fn combine<T: Scalar>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
    }
}

pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    b_index: Option<&[usize]>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let bv = |i: usize| match b_index {
        Some(map) => b.data()[map[i]],
        None => b.data()[i],
    };
    let ga = want_a.then(|| match kind {
        BinaryKind::Add | BinaryKind::Sub => g.clone(),
        BinaryKind::Mul => Tensor::from_fn(g.shape(), |i| g.data()[i] * bv(i)),
    });
    let gb = want_b.then(|| {
        let mut gb = Tensor::zeros(b.shape());
        let d = gb.data_mut();
        for (i, &gv) in g.data().iter().enumerate() {
            let j = b_index.map_or(i, |m| m[i]);
            d[j] += match kind {
                BinaryKind::Add => gv,
                BinaryKind::Sub => -gv,
                BinaryKind::Mul => gv * a.data()[i],
            };
        }
        gb
    });
    (ga, gb)
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > T::zero() {
            g.data()[i]
        } else {
            T::zero()
        }
    })
}

pub(crate) fn reduce_backward<T: Scalar>(
    kind: ReduceKind,
    a: &Tensor<T>,
    out_index: &[usize],
    argmax: &[usize],
    count: usize,
    g: &Tensor<T>,
) -> Tensor<T> {
    match kind {
        ReduceKind::Sum => Tensor::from_fn(a.shape(), |i| g.data()[out_index[i]]),
        ReduceKind::Mean => {
            let inv = T::one() / T::lit(count as f64);
            Tensor::from_fn(a.shape(), |i| g.data()[out_index[i]] * inv)
        }
        ReduceKind::Max => {
            let mut ga = Tensor::zeros(a.shape());
            let d = ga.data_mut();
            for (slot, &src) in argmax.iter().enumerate() {
                d[src] += g.data()[slot];
            }
            ga
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (value, b_index) = if av.shape() == bv.shape() {
            let v = Tensor::from_fn(av.shape(), |i| combine(kind, av.data()[i], bv.data()[i]));
            (v, None)
        } else {
            let map = broadcast_index(av.shape(), bv.shape())?;
            let v = Tensor::from_fn(av.shape(), |i| combine(kind, av.data()[i], bv.data()[map[i]]));
            (v, Some(map))
        };
        let op_kind = match kind {
            BinaryKind::Add => OpKind::Add,
            BinaryKind::Sub => OpKind::Sub,
            BinaryKind::Mul => OpKind::Mul,
        };
        Ok(self.push(op_kind, value, Op::Binary { kind, a, b, b_index }, &[a, b]))
    }

    /// `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product, with `b` broadcast onto the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(OpKind::Relu, value, Op::Relu(a), &[a])
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|v| v * k);
        self.push(OpKind::Scale, value, Op::Scale(a, k), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(OpKind::Reshape, value, Op::Reshape(a), &[a]))
    }

    /// Reduction over `axes`; reduced extents are dropped unless `keep_dims`.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(SagError::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&ax| !reduced[ax]).map(|ax| in_shape[ax]).collect();
        let mut strides = vec![0usize; rank];
        let mut s = 1usize;
        for ax in (0..rank).rev() {
            if !reduced[ax] {
                strides[ax] = s;
                s *= in_shape[ax];
            }
        }
        let out_index = strided_index(&in_shape, &strides);
        let out_len = numel_of(&kept);
        let count = numel_of(&in_shape) / out_len;
        let data = self.value(a).data();

        let mut out = vec![T::zero(); out_len];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, &v) in data.iter().enumerate() {
                    out[out_index[i]] += v;
                }
                if kind == ReduceKind::Mean {
                    let inv = T::one() / T::lit(count as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                // Strict comparison in increasing index order keeps the
                // first maximal element on ties.
                let mut seen = vec![false; out_len];
                argmax = vec![0usize; out_len];
                for (i, &v) in data.iter().enumerate() {
                    let o = out_index[i];
                    if !seen[o] || v > out[o] {
                        seen[o] = true;
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        let out_shape: Vec<usize> = if keep_dims {
            (0..rank).map(|ax| if reduced[ax] { 1 } else { in_shape[ax] }).collect()
        } else {
            kept
        };
        let op_kind = match kind {
            ReduceKind::Sum => OpKind::Sum,
            ReduceKind::Mean => OpKind::Mean,
            ReduceKind::Max => OpKind::Max,
        };
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(
            op_kind,
            value,
            Op::Reduce {
                kind,
                a,
                out_index,
                argmax,
                count,
            },
            &[a],
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceKind::Sum, a, &axes, false)
            .expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceKind::Mean, a, &axes, false)
            .expect("all axes are valid")
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceKind::Max, a, &axes, false)
            .expect("all axes are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity_and_mul_is_elementwise() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, 3.0]), false);
        let z = tape.leaf(Tensor::zeros(&[2]), false);
        let y = tape.leaf(t(&[2], &[4.0, 5.0]), false);
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let p = tape.mul(x, y).unwrap();
        assert_eq!(tape.value(p).data(), &[8.0, 15.0]);
    }

    #[test]
    fn broadcast_over_channel_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64), true);
        let b = tape.leaf(t(&[2, 1, 2], &[1.0, 10.0, 100.0, 1000.0]), true);
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).at(&[0, 2, 1]), 5.0 * 10.0);
        assert_eq!(tape.value(m).at(&[1, 1, 0]), 8.0 * 100.0);
        let loss = tape.sum_all(m);
        let g = tape.backward(loss).unwrap();
        // d/db sums a over the broadcast axis.
        assert_eq!(g.get(b).unwrap().data(), &[0.0 + 2.0 + 4.0, 1.0 + 3.0 + 5.0, 6.0 + 8.0 + 10.0, 7.0 + 9.0 + 11.0]);
    }

    #[test]
    fn non_broadcastable_shapes_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(tape.add(a, b), Err(SagError::ShapeMismatch(_))));
    }

    #[test]
    fn sum_along_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let s = tape.reduce(ReduceKind::Sum, x, &[1], false).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(s), &[2]);
        let k = tape.reduce(ReduceKind::Sum, x, &[0], true).unwrap();
        assert_eq!(tape.shape(k), &[1, 2]);
        assert_eq!(tape.value(k).data(), &[4.0, 6.0]);
    }

    #[test]
    fn max_routes_gradient_to_first_tie() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[5.0, 5.0, 1.0]), true);
        let m = tape.max_all(x);
        assert_eq!(tape.value(m).item(), 5.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_of_ones_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[4]), false);
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m).item(), 1.0);
    }

    #[test]
    fn invalid_axis_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[4]), false);
        assert!(matches!(
            tape.reduce(ReduceKind::Sum, x, &[1], false),
            Err(SagError::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_of_linear_form_gives_input() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
        let x = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(SagError::NonScalarLoss(_))));
    }

    #[test]
    fn strided_index_enumerates_row_major() {
        assert_eq!(strided_index(&[2, 3], &[3, 1]), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(strided_index(&[2, 3], &[1, 0]), vec![0, 0, 0, 1, 1, 1]);
    }
}
