//! Central finite-difference check of tape gradients.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Step used for the difference quotient.
pub const FD_STEP: f64 = 1e-5;

/// Entries whose analytic and numeric gradients differ by less than this
/// are accepted outright: when the true gradient is zero the quotient is
/// pure round-off, around 1e-10 at this step size.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

/// Compares `backward` against central differences. `limit` caps the number
/// of entries checked, drawn uniformly over all parameters with `rng`.
pub fn gradient_check<R: Rng + ?Sized>(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph) -> Result<Var>,
    limit: Option<usize>,
    rng: &mut R,
) -> Result<GradCheck> {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut entries = Vec::new();
    for id in store.ids() {
        for k in 0..store.value(id).data().len() {
            entries.push((id, k));
        }
    }
    if let Some(n) = limit.filter(|&n| n < entries.len()) {
        let mut pick: Vec<usize> = sample_indices(rng, entries.len(), n).into_vec();
        pick.sort_unstable();
        entries = pick.into_iter().map(|i| entries[i]).collect();
    }

    let mut report = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (id, k) in entries {
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + FD_STEP;
        let lp = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig - FD_STEP;
        let lm = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let an = analytic.get(id).map_or(0.0, |t| t.data()[k]);
        let diff = (fd - an).abs();
        report.checked += 1;
        if diff < ABS_FLOOR {
            continue;
        }
        let rel = diff / fd.abs().max(an.abs());
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("{}[{k}]: analytic {an} vs numeric {fd}", store.name(id));
        }
    }
    Ok(report)
}
