//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over every parameter entry.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares the tape's gradients of `f` against central differences with step `eps`.
///
/// `f` builds a scalar loss from the parameters and must be deterministic.
pub fn grad_check<F>(params: &ParameterStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic = g.param_grads();

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for name in params.names() {
        let len = params.get(name).map_or(0, |t| t.numel());
        for i in 0..len {
            let orig = params.get(name).unwrap().data()[i];
            set_entry(&mut probe, name, i, orig + eps);
            let up = eval(&probe)?;
            set_entry(&mut probe, name, i, orig - eps);
            let down = eval(&probe)?;
            set_entry(&mut probe, name, i, orig);

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = Some((name.to_string(), i));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

fn set_entry(store: &mut ParameterStore, name: &str, i: usize, value: f64) {
    store.get_mut(name).expect("name taken from the store").data_mut()[i] = value;
}
