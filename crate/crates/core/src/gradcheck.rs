//! Central-difference gradient checking against the tape's analytic
//! gradients.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error `tol * floor`.
    pub floor: f64,
    /// Check at most this many coordinates per parameter, sampled with
    /// `seed`. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// `(param index, flat element range)` pairs that are not trainable.
    pub exclude: Vec<(usize, Range<usize>)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
            exclude: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(f: &mut F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnMut(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.variable(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars).map_err(non_finite_to_check)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::GradCheck("computation is not scalar-valued".into()));
    }
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss).map_err(non_finite_to_check)?;
    let analytic = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, analytic))
}

fn non_finite_to_check(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::GradCheck(format!("non-finite value in {op}")),
        other => other,
    }
}

fn scalar_only<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars).map_err(non_finite_to_check)?;
    Ok(g.value(loss).data()[0])
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences `(f(x+ε) − f(x−ε)) / 2ε` on every (or a sampled subset of)
/// coordinate(s). `f` receives one graph variable per entry of `params`
/// and must be deterministic.
pub fn grad_check<F>(params: &[Tensor], mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::GradCheck(format!(
            "eps {} outside [1e-6, 1e-4]",
            opts.eps
        )));
    }
    let (_, analytic) = eval_loss(&mut f, params)?;
    let mut rng = Rng::new(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_err: 0.0,
        tol: opts.tol,
        passed: true,
    };

    for (pi, grad) in analytic.iter().enumerate() {
        let excluded = |i: usize| {
            opts.exclude
                .iter()
                .any(|(p, r)| *p == pi && r.contains(&i))
        };
        let mut coords: Vec<usize> = (0..params[pi].numel()).filter(|&i| !excluded(i)).collect();
        if let Some(k) = opts.max_coords {
            if coords.len() > k {
                rng.shuffle(&mut coords);
                coords.truncate(k);
                coords.sort_unstable();
            }
        }
        let mut check = ParamCheck {
            index: pi,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: None,
        };
        for &i in &coords {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let plus = scalar_only(&mut f, &work)?;
            work[pi].data_mut()[i] = orig - opts.eps;
            let minus = scalar_only(&mut f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if !numeric.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite difference at param {pi} coord {i}"
                )));
            }
            let err = relative_error(grad.data()[i], numeric, opts.floor);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_coord = Some(i);
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    report.passed = report.max_rel_err <= opts.tol;
    Ok(report)
}
