//! Finite-difference gradient checking.
//!
//! The check rebuilds the computation from scratch for every perturbed
//! entry, so it only depends on the forward values of the graph ops and is
//! independent of their backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over all checked entries.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// Relative error with the `1e-8` floor on the denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("objective must be scalar, got {:?}", v.shape()),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, h, None, 0)
}

/// Like [`grad_check`], but checks at most `max_per_param` randomly chosen
/// entries of each parameter (chosen with `seed`).
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match grads.get(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.len()],
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let entries: Vec<usize> = match max_per_param {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][e];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, e));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
