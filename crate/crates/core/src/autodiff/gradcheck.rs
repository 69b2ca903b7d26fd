//! Central finite-difference gradient checking.
//!
//! The checker only ever runs the forward closure; it never looks at the
//! tape's backward rules, so it stays an independent oracle for them.

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::{ParamId, ParamStore};
use crate::error::Result;

/// Gradients smaller than this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter name, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// Compares tape gradients of `forward`'s scalar output against central
/// differences with step `h` on up to `max_entries` entries of each listed
/// parameter (evenly strided).
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f32,
    max_entries: usize,
    mut forward: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    g.backward_into(loss, store)?;
    drop(g);

    let mut report = GradCheckReport::default();
    for id in ids {
        let analytic = match store.get(*id).grad() {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; store.get(*id).numel()],
        };
        let n = analytic.len();
        let stride = (n / max_entries.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(max_entries) {
            let x0 = store.get(*id).data()[idx];
            let plus = x0 + h;
            let minus = x0 - h;
            store.get_mut(*id).data_mut()[idx] = plus;
            let fp = eval(store, &mut forward)?;
            store.get_mut(*id).data_mut()[idx] = minus;
            let fm = eval(store, &mut forward)?;
            store.get_mut(*id).data_mut()[idx] = x0;
            let numeric = (fp - fm) / (f64::from(plus) - f64::from(minus));
            let a = f64::from(analytic[idx]);
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((store.name(*id).to_string(), idx, a, numeric));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

fn eval<F>(store: &ParamStore, forward: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    Ok(g.scalar(loss))
}
