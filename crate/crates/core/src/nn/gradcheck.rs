//! Central-difference gradient checking for `f64` models.

use super::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a floor that keeps near-zero gradients from dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` (already stored in `store` grads) against central
/// differences of `loss` for every `stride`-th element of each trainable param.
pub fn check_params(
    store: &mut ParamStore<f64>,
    eps: f64,
    stride: usize,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let stride = stride.max(1);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for id in ids {
        let n = store.get(id).value.len();
        for i in (0..n).step_by(stride) {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = loss(store);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = loss(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report
}
