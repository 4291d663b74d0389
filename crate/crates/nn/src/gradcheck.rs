//! Central finite-difference oracle for reverse-mode gradients, run in `f64`.

use crate::error::NnError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(param name, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor, so coordinates whose true gradient
/// is numerically zero do not divide rounding noise by zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_per_tensor: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            floor: 1e-6,
            max_per_tensor: usize::MAX,
        }
    }
}

impl GradCheck {
    /// Compare `backward()` against central differences for every parameter
    /// in `store`. `build` must be a pure function of the store (fix any RNG
    /// seeds inside it).
    pub fn params<F>(&self, store: &ParamStore<f64>, build: F) -> Result<GradCheckReport, NnError>
    where
        F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, NnError>,
    {
        let mut g = Graph::new();
        let loss = build(store, &mut g)?;
        let grads = g.backward(loss)?;
        let mut work = store.clone();
        let mut report = GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for id in 0..store.len() {
            let n = store.get_by_id(id).numel();
            let analytic: Vec<f64> = match grads.get(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; n],
            };
            let step = n.div_ceil(self.max_per_tensor.min(n).max(1));
            for i in (0..n).step_by(step.max(1)) {
                let orig = work.get_by_id(id).data()[i];
                work.get_by_id_mut(id).data_mut()[i] = orig + self.eps;
                let plus = eval(&work, &build)?;
                work.get_by_id_mut(id).data_mut()[i] = orig - self.eps;
                let minus = eval(&work, &build)?;
                work.get_by_id_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let err = rel_err(analytic[i], numeric, self.floor);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = err.max(report.max_rel_err);
                    if err >= report.max_rel_err {
                        report.worst = Some((store.name(id).to_string(), i, analytic[i], numeric));
                    }
                }
            }
        }
        Ok(report)
    }
}

fn eval<F>(store: &ParamStore<f64>, build: &F) -> Result<f64, NnError>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    Ok(g.value(loss).item())
}
