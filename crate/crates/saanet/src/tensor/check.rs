//! Finite-difference gradient verification.
//!
//! The universal oracle for the automatic differentiation engine: every
//! backward rule in the crate is validated against central differences,
//! either directly ([`grad_check`]) or end-to-end over a model's parameter
//! set ([`grad_check_params`]).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
///
/// `max_rel` is the worst per-coordinate deviation
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1)` — relative for
/// gradients of magnitude ≥ 1, absolute below that, so near-zero gradients
/// do not inflate the ratio. `pass` is `max_rel ≤ tol`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs: f64,
    pub max_rel: f64,
    pub n_coords: usize,
    pub pass: bool,
    /// Parameter name and flat coordinate of the worst deviation.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_abs: 0.0,
            max_rel: 0.0,
            n_coords: 0,
            pass: true,
            worst: None,
        }
    }

    fn fold(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64, tol: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1.0);
        self.n_coords += 1;
        self.max_abs = self.max_abs.max(abs);
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = Some((name.to_string(), coord));
        }
        if rel > tol {
            self.pass = false;
        }
    }
}

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences at every coordinate of `x`.
///
/// `f` must be deterministic; it is re-evaluated `2·numel(x)` times on
/// non-recording tapes after the single analytic pass.
pub fn grad_check(
    f: impl Fn(&Tensor, &Tape) -> Result<Tensor>,
    x: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let leaf = x.detached().requiring_grad();
    let tape = Tape::new();
    let y = f(&leaf, &tape)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check target must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    tape.backward(&y)?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| Error::Contract("function output does not depend on input".into()))?;

    let mut report = GradCheckReport::empty();
    for i in 0..leaf.numel() {
        let numeric = central_difference(|t, tape| f(t, tape), &leaf, i, step)?;
        report.fold("x", i, analytic[i], numeric, tol);
    }
    Ok(report)
}

/// End-to-end gradient check over named parameters.
///
/// Runs one analytic backward pass of `f` (which closes over the parameters),
/// then central-differences a random subsample of up to `coords_per_param`
/// coordinates of each parameter. Parameters that receive no gradient (e.g.
/// unused branches) are reported as failures via a contract error, not
/// silently skipped.
pub fn grad_check_params(
    f: impl Fn(&Tape) -> Result<Tensor>,
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
    coords_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let y = f(&tape)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check target must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    tape.backward(&y)?;

    let mut report = GradCheckReport::empty();
    for (name, p) in params {
        let analytic = p
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {name} received no gradient")))?;
        let n = p.numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in coords {
            p.nudge(i, step);
            let plus = eval_scalar(&f)?;
            p.nudge(i, -2.0 * step);
            let minus = eval_scalar(&f)?;
            p.nudge(i, step);
            let numeric = (plus - minus) / (2.0 * step);
            report.fold(name, i, analytic[i], numeric, tol);
        }
    }
    Ok(report)
}

fn eval_scalar(f: &impl Fn(&Tape) -> Result<Tensor>) -> Result<f64> {
    let tape = Tape::inference();
    Ok(f(&tape)?.item())
}

fn central_difference(
    f: impl Fn(&Tensor, &Tape) -> Result<Tensor>,
    x: &Tensor,
    coord: usize,
    step: f64,
) -> Result<f64> {
    x.nudge(coord, step);
    let plus = f(x, &Tape::inference())?.item();
    x.nudge(coord, -2.0 * step);
    let minus = f(x, &Tape::inference())?.item();
    x.nudge(coord, step);
    Ok((plus - minus) / (2.0 * step))
}
