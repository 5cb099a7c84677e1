//! Central finite-difference checks for analytic gradients.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / (|numeric| + eps)`; the report carries the
/// maximum over all coordinates. `f` must be deterministic.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    eps: f64,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (ti, (p, g)) in params.iter().zip(analytic).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape for tensor {ti}");
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (g.data()[ei] - numeric).abs() / (numeric.abs() + eps);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
            }
        }
    }
    report
}
