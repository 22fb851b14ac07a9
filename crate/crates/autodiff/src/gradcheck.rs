//! Central finite-difference gradient checks at double precision.

use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the inputs, each measured as
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` (absolute error
    /// when both norms vanish).
    pub max_rel_error: f64,
    /// Index of the input with the largest error.
    pub worst_input: usize,
    pub forward_evaluations: usize,
}

pub const STEP: f64 = 1e-6;

/// Compares the gradients of the scalar built by `f` from `inputs` against
/// central differences with step `STEP · max(1, |x|)`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], fault: Option<OpKind>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    g.inject_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        forward_evaluations: 1,
    };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for k in 0..inputs[i].len() {
            let x = inputs[i].data()[k];
            let h = STEP * x.abs().max(1.0);
            work[i].data_mut()[k] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x;
            report.forward_evaluations += 2;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        let err = if scale < 1e-8 { diff.sqrt() } else { diff.sqrt() / scale };
        if i == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_input = i;
        }
    }
    Ok(report)
}
