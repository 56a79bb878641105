//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the check is independent of
//! every backward pass it is applied to.

use super::ParamBlock;
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that gradients that are zero
/// analytically are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, rel: f64, label: impl FnOnce() -> String) {
        self.checked += 1;
        if self.worst.is_empty() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = label();
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares the gradients already accumulated in `params` against central
/// differences of `loss` with step `h` over every scalar parameter.
pub fn check_param_gradients<F>(params: &mut ParamBlock, h: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamBlock) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.value(id).len() {
            let orig = params.value(id).as_slice()[k];
            params.value_mut(id).as_mut_slice()[k] = orig + h;
            let plus = loss(params)?;
            params.value_mut(id).as_mut_slice()[k] = orig - h;
            let minus = loss(params)?;
            params.value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = params.grad(id).as_slice()[k];
            let rel = relative_error(analytic, numeric);
            report.record(rel, || format!("{}[{k}]", params.name(id)));
        }
    }
    Ok(report)
}

/// Central-difference gradient of `f` with respect to the vector `x`.
pub fn numeric_gradient<F>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe)?;
        probe[k] = x[k] - h;
        let minus = f(&probe)?;
        probe[k] = x[k];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Compares an analytic vector gradient against [`numeric_gradient`].
pub fn check_vector_gradient<F>(x: &[f64], analytic: &[f64], h: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let numeric = numeric_gradient(x, h, f)?;
    let mut report = GradCheckReport::default();
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        report.record(relative_error(*a, *n), || format!("input[{k}]"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn quadratic_parameter_gradient() {
        let mut p = ParamBlock::new();
        let id = p.add("w", Matrix::from_vec(1, 2, vec![1.5, -2.0]).unwrap());
        // L = w0² + 3 w1
        p.grad_mut(id).as_mut_slice().copy_from_slice(&[3.0, 3.0]);
        let report = check_param_gradients(&mut p, FD_STEP, |p| {
            let w = p.value(id).as_slice();
            Ok(w[0] * w[0] + 3.0 * w[1])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 2);
        assert_eq!(p.value(id).as_slice(), &[1.5, -2.0], "values restored");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut p = ParamBlock::new();
        let id = p.add("w", Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        p.grad_mut(id).set(0, 0, 1.0);
        let report = check_param_gradients(&mut p, FD_STEP, |p| Ok(p.value(id).get(0, 0).powi(2))).unwrap();
        assert!(report.max_rel_error > 0.5);
        assert_eq!(report.worst, "w[0]");
    }
}
