//! Central finite-difference validation of analytic gradients.
//!
//! Run in f64: the default step of 1e-5 leaves ~1e-10 truncation error,
//! which is far below the tolerances asserted by the tests.

use super::Tensor;
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Outcome of a finite-difference probe sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (tensor index, coordinate, analytic, numeric) of the worst probe.
    pub worst: (usize, usize, f64, f64),
    pub probes: usize,
}

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares `analytic` gradients of `f` against central finite differences
/// at randomly probed coordinates and returns the maximum relative error.
///
/// The relative error uses `|a - n| / max(floor, |a|, |n|)` with a floor of
/// 1e-3, so near-zero coordinates are held to an absolute ~1e-3·tol instead
/// of blowing up the ratio.
pub fn gradient_check<T: Scalar>(
    f: &mut dyn FnMut(&[Tensor<T>]) -> T,
    inputs: &[Tensor<T>],
    analytic: &[Tensor<T>],
    probes_per_tensor: usize,
    step: f64,
    rng: &mut RngStream,
) -> GradCheckReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0, 0.0, 0.0), probes: 0 };

    for ti in 0..inputs.len() {
        assert_eq!(inputs[ti].shape(), analytic[ti].shape(), "gradient shape mismatch");
        let n = inputs[ti].numel();
        let probes = probes_per_tensor.min(n);
        // Sample distinct coordinates when probing fewer than all of them.
        let coords: Vec<usize> = if probes == n {
            (0..n).collect()
        } else {
            let mut perm = rng.permutation(n);
            perm.truncate(probes);
            perm
        };
        for &ci in &coords {
            let orig = work[ti].data()[ci];
            let h = T::from_f64(step);

            work[ti].data_mut()[ci] = orig + h;
            let f_plus = f(&work).as_f64();
            work[ti].data_mut()[ci] = orig - h;
            let f_minus = f(&work).as_f64();
            work[ti].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[ti].data()[ci].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ci, a, numeric);
            }
        }
    }
    report
}
