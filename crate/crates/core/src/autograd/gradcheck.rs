//! Central-difference gradient oracle.

use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-element `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
///
/// Meant for `f64` inputs; in `f32` the truncation and rounding errors are
/// of the same order as the derivatives being checked.
pub fn finite_difference_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_eps = eps + eps;
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_eps);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// reporting huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Result of [`check_param_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
    /// Entries whose first bracket was not smooth and were probed again.
    pub reprobed: usize,
}

/// Compares the gradients `loss(store, true)` accumulates into `store` with
/// central differences over the selected entries.
///
/// `loss(store, grad)` evaluates the loss and, when `grad` is set, also runs
/// the backward pass into `store`. It must not change anything the loss
/// depends on besides the probed parameter.
///
/// ReLU and max-pool make losses piecewise smooth. When `x ± eps` straddles
/// a kink the second difference `f(x+e) − 2f(x) + f(x−e)` is of order `e`
/// rather than `e²` and bounds the error the kink adds to the central
/// difference; such entries are probed again with steps `eps/10`,
/// `eps/100`, `eps/1000` until the bracket is smooth. Relative errors use
/// `max(|a|, |b|, 1e-3·scale)` as denominator, with `scale` the largest
/// gradient magnitude seen, so exact zeros compare in absolute terms.
pub fn check_param_gradients<T: Scalar>(
    store: &mut ParamStore<T>,
    params: &[(ParamId, Vec<usize>)],
    eps: f64,
    tolerance: f64,
    mut loss: impl FnMut(&mut ParamStore<T>, bool) -> f64,
) -> GradCheckReport {
    store.zero_grad();
    let mid = loss(store, true);
    let mut probe = |store: &mut ParamStore<T>, id: ParamId, i: usize, eps: f64| {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + T::lit(eps);
        let up = loss(store, false);
        store.get_mut(id).value.data_mut()[i] = orig - T::lit(eps);
        let down = loss(store, false);
        store.get_mut(id).value.data_mut()[i] = orig;
        ((up - down) / (2.0 * eps), (up - 2.0 * mid + down).abs() / (2.0 * eps))
    };
    let mut probes = Vec::new();
    for (id, entries) in params {
        for &i in entries {
            let (central, kink) = probe(store, *id, i, eps);
            probes.push((*id, i, store.grad(*id).data()[i].as_f64(), central, kink));
        }
    }
    let scale = probes.iter().map(|p| p.2.abs().max(p.3.abs())).fold(0.0f64, f64::max);
    let floor = (1e-3 * scale).max(1e-10);
    let smooth = |central: f64, kink: f64| kink <= 0.5 * tolerance * central.abs().max(floor);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries: probes.len(),
        reprobed: 0,
    };
    for (id, i, analytic, mut central, kink) in probes {
        if !smooth(central, kink) {
            report.reprobed += 1;
            central = [10.0, 100.0, 1000.0]
                .iter()
                .map(|&k| probe(store, id, i, eps / k))
                .find(|&(c, k)| smooth(c, k))
                .map_or(central, |(c, _)| c);
        }
        let err = relative_error(analytic, central, floor);
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((store.get(id).name.clone(), i));
        }
    }
    report
}
