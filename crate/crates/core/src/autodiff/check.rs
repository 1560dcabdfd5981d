//! Central-difference gradient checking.

use crate::autodiff::params::{GradMap, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("objective produced a non-finite value during gradient check")]
    NonFinite,
}

/// Compare analytic gradients against central differences.
///
/// `f` must be a deterministic map from parameters to a scalar. For each
/// coordinate the relative error is `|a - n| / max(|a|, |n|, 1e-6)`;
/// the maximum over all coordinates is returned. The denominator floor
/// sits above central-difference round-off noise (about `1e-11` for a
/// unit-scale objective at the default step), so coordinates whose true
/// gradient is unmeasurably small are graded absolutely instead of
/// drowning the report in noise.
pub fn grad_check<T, F>(
    f: F,
    params: &ParamSet<T>,
    analytic: &GradMap<T>,
    eps: T,
) -> Result<T, GradCheckError>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> T,
{
    assert!(eps > T::zero(), "grad_check: eps must be positive");
    let floor = T::from_f64(1e-6);
    let mut worst = T::zero();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        for i in 0..params.get(&name).numel() {
            let orig = probe.get(&name).data()[i];
            probe.get_mut(&name).data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.get_mut(&name).data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.get_mut(&name).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GradCheckError::NonFinite);
            }
            let numeric = (up - down) / (eps + eps);
            let a = analytic.get(&name).data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
