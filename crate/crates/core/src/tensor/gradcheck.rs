//! Finite-difference verification of reverse-mode gradients (64-bit only).

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Flat coordinate (across all checked tensors) with the largest error.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Per checked tensor: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub tensor_rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_tensor_rel_error(&self) -> f64 {
        self.tensor_rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

struct Tracker {
    max: f64,
    worst: usize,
    analytic: f64,
    numeric: f64,
    count: usize,
    // squared norms of (difference, analytic, numeric) per tensor
    norms: Vec<[f64; 3]>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            max: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
            count: 0,
            norms: Vec::new(),
        }
    }

    fn begin_tensor(&mut self) {
        self.norms.push([0.0; 3]);
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.max || !e.is_finite() {
            self.max = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = self.count;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.count += 1;
        if let Some(n) = self.norms.last_mut() {
            n[0] += (analytic - numeric).powi(2);
            n[1] += analytic * analytic;
            n[2] += numeric * numeric;
        }
    }

    fn finish(self, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            passed: self.max < tolerance,
            max_rel_error: self.max,
            worst_index: self.worst,
            analytic_at_worst: self.analytic,
            numeric_at_worst: self.numeric,
            checked: self.count,
            tensor_rel_errors: self
                .norms
                .iter()
                .map(|[d, a, n]| {
                    let e = d.sqrt() / a.sqrt().max(n.sqrt()).max(1e-12);
                    if e.is_finite() {
                        e
                    } else {
                        f64::INFINITY
                    }
                })
                .collect(),
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    g.value(v).item().ok_or_else(|| {
        Error::invalid(format!(
            "function must return a scalar, got {:?}",
            g.value(v).shape()
        ))
    })
}

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with step `step`, element by element.
pub fn grad_check<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let first = eval(point)?;
    if first.to_bits() != eval(point)?.to_bits() {
        return Err(Error::invalid("function is not deterministic"));
    }

    let mut g = Graph::new();
    let x = g.input(point.clone());
    let out = f(&mut g, x)?;
    let grads = g.gradients(out)?;
    let analytic = match &grads[x.0] {
        Some(t) => t.clone(),
        None => Tensor::zeros(point.shape()),
    };

    let mut tracker = Tracker::new();
    tracker.begin_tensor();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        tracker.record(analytic.data()[i], (up - down) / (2.0 * step));
    }
    Ok(tracker.finish(tolerance))
}

/// Same comparison over every element of every parameter in `store`; `f`
/// builds the scalar output from the store's current values.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let first = eval(store)?;
    if first.to_bits() != eval(store)?.to_bits() {
        return Err(Error::invalid("function is not deterministic"));
    }

    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.param_gradients(out, store.len())?;

    let mut tracker = Tracker::new();
    let mut probe = store.clone();
    for id in 0..store.len() {
        let n = store.by_id(id).value.len();
        tracker.begin_tensor();
        for i in 0..n {
            let orig = probe.by_id(id).value.data()[i];
            probe.by_id_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.by_id_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.by_id_mut(id).value.data_mut()[i] = orig;
            let a = grads[id].as_ref().map_or(0.0, |t| t.data()[i]);
            tracker.record(a, (up - down) / (2.0 * step));
        }
    }
    Ok(tracker.finish(tolerance))
}
