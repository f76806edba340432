use super::array::Array;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose perturbation crossed a rectifier kink.
    pub skipped: usize,
    /// `(input, coordinate)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Checks the gradient of a scalar function at `point` coordinate by
/// coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// with `floor = 1e-4 · max(1, |f(point)|)`, which keeps near-zero
/// gradients from being judged on rounding noise. A coordinate is skipped
/// when the rectifier activation pattern differs between `x + h` and `x - h`.
pub fn grad_check<F>(f: F, point: &[Array], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_step(f, point, tol, DEFAULT_STEP)
}

pub fn grad_check_with_step<F>(f: F, point: &[Array], tol: f64, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Array]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.scalar(out), tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|a| tape.constant(a.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.scalar(root);
    let grads = tape.backward(root)?;
    let floor = 1e-4 * base.abs().max(1.0);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
        passed: true,
    };
    let mut shifted = point.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point[input].len()]);
        for coord in 0..point[input].len() {
            let orig = point[input].data()[coord];
            shifted[input].data_mut()[coord] = orig + h;
            let (fp, pat_p) = eval(&shifted)?;
            shifted[input].data_mut()[coord] = orig - h;
            let (fm, pat_m) = eval(&shifted)?;
            shifted[input].data_mut()[coord] = orig;
            if pat_p != pat_m {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[coord];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((input, coord));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Central-difference check of `f` with respect to the parameter tensors of
/// a model. `store` exposes the parameters of a scratch copy, which is
/// perturbed in place. At most `per_tensor` evenly spaced coordinates of
/// each tensor are compared (all when `None`). Worst positions are
/// `(parameter index, coordinate)`.
pub fn grad_check_params<M, S, F>(model: &M, store: S, f: F, tol: f64, per_tensor: Option<usize>) -> Result<GradCheckReport>
where
    M: Clone,
    S: Fn(&mut M) -> &mut ParamStore,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let h = DEFAULT_STEP;
    let mut work = model.clone();
    let mut tape = Tape::new();
    let root = f(&work, &mut tape)?;
    let base = tape.scalar(root);
    let grads = tape.backward(root)?.param_grads(store(&mut work));
    let floor = 1e-4 * base.abs().max(1.0);
    let eval = |m: &M| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let out = f(m, &mut tape)?;
        Ok((tape.scalar(out), tape.relu_pattern()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
        passed: true,
    };
    let ids: Vec<ParamId> = store(&mut work).ids().collect();
    for id in ids {
        let len = store(&mut work).get(id).len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        for coord in coords {
            let orig = store(&mut work).get(id).data()[coord];
            store(&mut work).get_mut(id).data_mut()[coord] = orig + h;
            let (fp, pat_p) = eval(&work)?;
            store(&mut work).get_mut(id).data_mut()[coord] = orig - h;
            let (fm, pat_m) = eval(&work)?;
            store(&mut work).get_mut(id).data_mut()[coord] = orig;
            if pat_p != pat_m {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads[id.index()].as_ref().map_or(0.0, |g| g[coord]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((id.index(), coord));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
