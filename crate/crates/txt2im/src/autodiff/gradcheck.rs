//! Central finite-difference gradient checking, double precision.

use ndarray::ArrayD;

/// Worst relative error between analytic gradients and central differences.
///
/// `eval` recomputes the scalar loss from scratch for a given parameter set;
/// `analytic` holds the backprop gradients in the same order as `params`.
/// At most `max_per_tensor` coordinates per tensor are probed, spread evenly.
pub fn max_relative_error(
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    mut eval: impl FnMut(&[ArrayD<f64>]) -> f64,
    max_per_tensor: usize,
    h: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..params.len() {
        let len = params[ti].len();
        if len == 0 {
            continue;
        }
        let stride = (len / max_per_tensor.max(1)).max(1);
        let mut ci = 0;
        while ci < len {
            let orig = work[ti].as_slice().unwrap()[ci];
            work[ti].as_slice_mut().unwrap()[ci] = orig + h;
            let fp = eval(&work);
            work[ti].as_slice_mut().unwrap()[ci] = orig - h;
            let fm = eval(&work);
            work[ti].as_slice_mut().unwrap()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[ti].as_slice().unwrap()[ci];
            let denom = (an.abs() + fd.abs()).max(1e-6);
            let err = (an - fd).abs() / denom;
            if err > worst {
                worst = err;
            }
            ci += stride;
        }
    }
    worst
}
