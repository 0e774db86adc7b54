//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst deviation.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Relative error with an absolute short-circuit: deviations below 1e-9 are
/// treated as finite-difference roundoff, not gradient defects.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients against central finite differences
/// (f(p+eps) - f(p-eps)) / (2 eps) for every coordinate of `ids`.
///
/// `f` must be a deterministic pure function of the store (dropout off);
/// it returns the loss value together with per-id gradients when asked.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Vec<Tensor>)>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (base, analytic) = f(store, true)?;
    if !base.is_finite() {
        return Err(Error::Numeric("loss is non-finite at the base point".into()));
    }
    if analytic.len() != ids.len() {
        return Err(Error::Usage(format!(
            "f returned {} gradients for {} parameters",
            analytic.len(),
            ids.len()
        )));
    }
    // determinism guard: a second evaluation must reproduce the loss exactly
    let (again, _) = f(store, false)?;
    if again != base {
        return Err(Error::Usage(
            "loss is not deterministic (dropout or other randomness active); check invalid".into(),
        ));
    }

    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst: None, tol, coords_checked: 0 };
    for (slot, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        for coord in 0..n {
            let orig = store.get(id).data()[coord];
            store.get_mut(id).data_mut()[coord] = orig + eps;
            let (plus, _) = f(store, false)?;
            store.get_mut(id).data_mut()[coord] = orig - eps;
            let (minus, _) = f(store, false)?;
            store.get_mut(id).data_mut()[coord] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[slot].data()[coord], fd);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), coord));
            }
        }
    }
    Ok(report)
}
