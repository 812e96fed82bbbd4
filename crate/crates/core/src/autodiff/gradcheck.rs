//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many elements per input (evenly strided); `None`
    /// checks every element.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstElement {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<WorstElement>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare analytic gradients of `f` at `inputs` with central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output element contributes to the checked gradient.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |g: &mut Graph<f64>, xs: &[Tensor<f64>]| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(g, &vars)?;
        let n = g.value(y).len();
        let loss = if n == 1 {
            y
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let proj: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = g.constant(Tensor::new(g.shape(y).to_vec(), proj)?);
            let m = g.mul(y, p)?;
            g.sum(m)?
        };
        Ok((loss, vars))
    };

    let mut g = Graph::new();
    let (loss, vars) = eval(&mut g, inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.len()], |gr| gr.into_data())
        })
        .collect();

    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, an) in analytic.iter().enumerate() {
        let len = inputs[input].len();
        let stride = opts.max_elements.map_or(1, |m| len.div_ceil(m.max(1)));
        for index in (0..len).step_by(stride) {
            let orig = point[input].data()[index];
            point[input].data_mut()[index] = orig + opts.step;
            let mut gp = Graph::new();
            let (lp, _) = eval(&mut gp, &point)?;
            let plus = gp.value(lp).data()[0];
            point[input].data_mut()[index] = orig - opts.step;
            let mut gm = Graph::new();
            let (lm, _) = eval(&mut gm, &point)?;
            let minus = gm.value(lm).data()[0];
            point[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(an[index], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstElement {
                    input,
                    index,
                    analytic: an[index],
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}
