use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter; all of them when the parameter is smaller.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the objective at the store's current values and accumulates
/// its analytic gradient into the store's grad buffers. The error of one
/// coordinate is `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grad();
    let base = f(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("objective value {base}")));
    }
    let analytic: Vec<Matrix> = store.iter().map(|p| p.grad.clone()).collect();
    if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient of {}", p.name)));
    }

    let mut rng = crate::seed::rng(cfg.seed, &[0x6772_6164]);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let n = grad.data().len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.h;
            let plus = f(store)?;
            store.value_mut(id).data_mut()[i] = orig - cfg.h;
            let minus = f(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective near {}[{i}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    // leave the store as the caller handed it over, with the analytic grads
    store.zero_grad();
    for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(&analytic) {
        store.accumulate(id, g)?;
    }
    Ok(report)
}
