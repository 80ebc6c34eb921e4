use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub max_abs_grad: f64,
    /// Frozen parameters, never perturbed.
    pub excluded: Vec<String>,
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every trainable coordinate of `store`.
pub fn grad_check<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {step}")));
    }
    let graph = Graph::new();
    let bound = store.bind(&graph);
    let loss = f(&graph, &bound)?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!("loss is {} at the base point", loss.item())));
    }
    graph.backward(loss)?;
    let analytic = bound.grads(store);
    drop(bound);

    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let b = s.bind(&g);
        Ok(f(&g, &b)?.item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        max_abs_grad: 0.0,
        excluded: Vec::new(),
    };
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.frozen, p.name.clone())).collect();
    for (id, frozen, name) in ids {
        if frozen {
            report.excluded.push(name);
            continue;
        }
        let n = store.get(id).value.len();
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss when perturbing {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()].data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Coordinate {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
