//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute slack for gradients whose magnitude is near zero.
    pub abs_tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl GradCheck {
    /// Compares the tape gradient of the scalar `f(inputs)` with central differences.
    ///
    /// `elements` limits how many entries per input are probed (evenly strided); `None`
    /// probes all of them.
    pub fn run(&self, inputs: &[Tensor], elements: Option<usize>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradReport {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };

        let mut report = GradReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ii, input) in inputs.iter().enumerate() {
            let n = input.len();
            let stride = match elements {
                Some(k) if k > 0 && k < n => n.div_ceil(k),
                _ => 1,
            };
            for e in (0..n).step_by(stride) {
                let orig = input.data()[e];
                work[ii].data_mut()[e] = orig + self.step;
                let plus = eval(&work);
                work[ii].data_mut()[e] = orig - self.step;
                let minus = eval(&work);
                work[ii].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[ii].data()[e];
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let rel = if scale > 0.0 { diff / scale } else { 0.0 };
                report.checked += 1;
                if diff > self.abs_tol {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    if rel > self.rel_tol {
                        report.mismatches.push(Mismatch {
                            input: ii,
                            element: e,
                            analytic: a,
                            numeric,
                        });
                    }
                }
            }
        }
        report
    }
}
