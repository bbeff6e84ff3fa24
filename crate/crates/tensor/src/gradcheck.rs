//! Central finite-difference checks for 64-bit graphs.

use crate::{Graph, Result, Var};

/// Largest relative disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is zero are judged on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Differentiates `f` at `inputs` both ways.
///
/// Non-scalar outputs are reduced with fixed weights `cos(1.3 i + 0.7)` so
/// that every output element contributes a distinct direction.
pub fn check<F>(inputs: &[(Vec<f64>, Vec<usize>)], h: f64, floor: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>], grads: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| g.leaf(v.clone(), shape, true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        let value = g.scalar(loss);
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad(v).map(|x| x.to_vec())).collect()))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic) = eval(&base, true)?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (i, (vals, _)) in inputs.iter().enumerate() {
        for j in 0..vals.len() {
            let mut plus = base.clone();
            plus[i][j] += h;
            let mut minus = base.clone();
            minus[i][j] -= h;
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, floor));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

fn reduce(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    if n == 1 {
        return g.reshape(out, &[]);
    }
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).cos()).collect();
    let shape = g.shape(out).to_vec();
    let wv = g.constant(w, &shape)?;
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}
