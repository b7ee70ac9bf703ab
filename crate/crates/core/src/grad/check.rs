//! Central finite-difference checks against [`Graph::backward`].

use super::{GradError, Graph, Tensor, Var};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares backward gradients of `f` with respect to every input against
/// `(f(x + h) - f(x - h)) / 2h`, one element at a time.
///
/// `f` receives the graph and one leaf per input, and returns a scalar.
pub fn check_gradients<F, E>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<GradError>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t)).collect();
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i][j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
