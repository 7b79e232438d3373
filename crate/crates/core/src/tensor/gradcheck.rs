//! Central finite-difference gradient checks.
//!
//! The analytic gradient comes from [`Tape::backward`]; the numeric one only
//! ever runs forward passes, so the two routes share nothing but the
//! forward definitions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    tape.value(loss).item()
}

/// Compares analytic and numeric gradients of the scalar built by `f` with
/// respect to every parameter in `store`. At most `max_per_param` entries
/// (chosen with `seed`) are probed per parameter.
pub fn check_params<F>(
    store: &mut ParamStore,
    f: F,
    step: f64,
    max_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_param_grads(store.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for k in picks {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(store, &f)?;
            store.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(store, &f)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[k]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Autodiff(format!(
                    "non-finite gradient for {}",
                    store.name(id)
                )));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst_param = format!("{}[{k}]", store.name(id));
                }
            }
        }
    }
    Ok(report)
}
