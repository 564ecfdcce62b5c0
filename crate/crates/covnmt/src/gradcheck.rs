//! Finite-difference verification of tape gradients.
//!
//! The builder closure reconstructs the scalar objective from scratch on a
//! fresh tape each evaluation, so the numeric side never touches the
//! gradients it is checking. Run this in wide (`f64`) precision.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck<F> {
    pub max_rel_err: F,
    /// (parameter index, entry index) of the worst disagreement.
    pub worst: (usize, usize),
}

/// Compares tape gradients of `build`'s scalar output against central
/// differences over every entry of every parameter.
///
/// Relative error per entry is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, B>(params: &[Tensor<F>], step: F, mut build: B) -> Result<GradCheck<F>>
where
    F: Real,
    B: FnMut(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    if step <= F::zero() {
        return Err(Error::config("grad_check step must be positive"));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::config("grad_check objective must be scalar"));
    }
    if !tape.item(loss).is_finite() {
        return Err(Error::numeric("objective is non-finite at the base point"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![F::zero(); p.len()]))
        .collect();
    for (pi, g) in analytic.iter().enumerate() {
        if let Some(ei) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "analytic gradient non-finite at parameter {pi}, entry {ei}"
            )));
        }
    }

    let mut eval = |ps: &[Tensor<F>]| -> Result<F> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let out = build(&mut t, &vs)?;
        Ok(t.item(out))
    };

    let mut work: Vec<Tensor<F>> = params.to_vec();
    for w in &mut work {
        w.requires_grad = false;
    }

    let two = F::from_f64(2.0);
    let mut max_rel = F::zero();
    let mut worst = (0, 0);
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + step;
            let fp = eval(&work)?;
            work[pi].data[ei] = orig - step;
            let fm = eval(&work)?;
            work[pi].data[ei] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::numeric(format!(
                    "objective non-finite while perturbing parameter {pi}, entry {ei}"
                )));
            }
            let numeric = (fp - fm) / (two * step);
            let a = analytic[pi][ei];
            let denom = F::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = (pi, ei);
            }
        }
    }
    Ok(GradCheck {
        max_rel_err: max_rel,
        worst,
    })
}
