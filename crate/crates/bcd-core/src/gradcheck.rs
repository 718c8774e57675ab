//! Finite-difference gradients and comparison against tape gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `point`:
/// (f(x + eps) - f(x - eps)) / (2 eps), one coordinate at a time.
pub fn finite_diff_gradient<T, F>(mut f: F, point: &Tensor<T>, eps: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    let two = T::one() + T::one();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (two * eps);
    }
    grad
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub coords: usize,
    /// Fraction of coordinates whose relative error stays under the
    /// relative tolerance (near-zero pairs count when the absolute gap is
    /// itself below the relative tolerance).
    pub frac_within_rel: f64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Accept when at least `min_frac` of coordinates meet the relative
    /// tolerance and every coordinate meets the absolute tolerance.
    pub fn passes(&self, min_frac: f64, abs_tol: f64) -> bool {
        self.frac_within_rel >= min_frac && self.max_abs_err <= abs_tol
    }
}

/// Compare coordinate-wise. The relative error of a pair (a, n) is
/// |a - n| / max(|a|, |n|); pairs where both magnitudes are below `rel_tol`
/// are treated as matching zeros.
pub fn compare_gradients<T: Scalar>(
    analytic: &Tensor<T>,
    numeric: &Tensor<T>,
    rel_tol: f64,
) -> GradCheckReport {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut within = 0usize;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let n = analytic.numel();
    for i in 0..n {
        let a = analytic.data()[i].to_f64().unwrap();
        let b = numeric.data()[i].to_f64().unwrap();
        let abs = (a - b).abs();
        max_abs = max_abs.max(abs);
        let scale = a.abs().max(b.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        max_rel = max_rel.max(rel);
        if rel < rel_tol || abs < rel_tol {
            within += 1;
        }
    }
    GradCheckReport {
        coords: n,
        frac_within_rel: if n == 0 { 1.0 } else { within as f64 / n as f64 },
        max_abs_err: max_abs,
        max_rel_err: max_rel,
    }
}
