//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::neural::graph::{Graph, Var};
use crate::neural::tensor::{Grads, ParamStore};

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Analytic gradient of the scalar built by `f`.
pub fn analytic_grads<F>(store: &ParamStore, f: &F) -> Result<Grads>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let mut grads = store.zero_grads();
    g.backward(loss, &mut grads)?;
    Ok(grads)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    Ok(g.scalar(loss))
}

/// Checks the tape gradient of `f` against central differences with step `eps`
/// on every coordinate of every unfrozen parameter.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = analytic_grads(store, &f)?;
    compare_with_numeric(store, &f, &grads, eps)
}

/// Compares supplied gradients (possibly tampered with) against central differences.
pub fn compare_with_numeric<F>(
    store: &ParamStore,
    f: &F,
    grads: &Grads,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let len = store.get(id).len();
        let analytic = grads.dense(id, len);
        for k in 0..len {
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&probe, f)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&probe, f)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[k], numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.param(id).name.clone(), k));
                report.analytic = analytic[k];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tensor::Tensor;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::row_vector(vec![0.3, -1.2, 2.0]));
        let report = grad_check(
            &ps,
            |g| {
                let wv = g.param(w);
                let s = g.scale(wv, 3.0);
                Ok(g.sum(s))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }
}
