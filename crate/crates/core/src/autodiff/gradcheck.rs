//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{NodeId, Tape, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// When set, only this many parameter elements (drawn across all
    /// parameters) are perturbed.
    pub subsample: Option<usize>,
    pub seed: u64,
    /// Relative errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// When set, each element is also differenced with half the step. If the
    /// two estimates differ by more than this relative amount, the step is
    /// halved again (up to [`STABILITY_HALVINGS`] times) and the last two
    /// estimates are compared. An element with no agreeing pair is unresolved
    /// (a ReLU kink very close to the point, or roundoff dominating a tiny
    /// entry) and is counted instead of compared.
    pub stability: Option<f64>,
}

/// Step halvings tried by the stability screen.
pub const STABILITY_HALVINGS: usize = 2;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, subsample: None, seed: 0, floor: 1e-8, stability: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Elements skipped by the stability screen.
    pub unresolved: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub loss: f64,
    pub checked: usize,
    pub unresolved: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    /// Fraction of perturbed elements skipped by the stability screen.
    pub fn unresolved_fraction(&self) -> f64 {
        let total = self.checked + self.unresolved;
        if total == 0 {
            0.0
        } else {
            self.unresolved as f64 / total as f64
        }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    Ok((tape, ids, loss))
}

/// Compares backprop gradients of the scalar built by `f` against central
/// differences, perturbing each parameter element (or a random subsample).
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (mut tape, ids, loss) = evaluate(&f, params)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).item();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|id| tape.grad(*id)).collect();
    drop(tape);

    let total: usize = params.iter().map(Tensor::numel).sum();
    let flat: Vec<usize> = match opts.subsample {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut v = sample(&mut rng, total, n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };

    let mut checks: Vec<ParamCheck> = (0..params.len())
        .map(|param| ParamCheck { param, checked: 0, unresolved: 0, max_rel_err: 0.0, max_abs_err: 0.0 })
        .collect();
    let mut work: Vec<Tensor> = params.to_vec();
    for idx in flat {
        let (mut p, mut e) = (0, idx);
        while e >= params[p].numel() {
            e -= params[p].numel();
            p += 1;
        }
        let mut diff = |h: f64| -> Result<f64> {
            let orig = work[p].data[e];
            work[p].data[e] = orig + h;
            let (t, _, l) = evaluate(&f, &work)?;
            let plus = t.value(l).item();
            work[p].data[e] = orig - h;
            let (t, _, l) = evaluate(&f, &work)?;
            let minus = t.value(l).item();
            work[p].data[e] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let mut numeric = diff(opts.step)?;
        if let Some(stability) = opts.stability {
            // a kink between h/2 and h from the point spoils only the larger
            // step, so halve up to STABILITY_HALVINGS times before giving up
            let mut h = opts.step;
            let mut resolved = false;
            for _ in 0..STABILITY_HALVINGS {
                h /= 2.0;
                let half = diff(h)?;
                let stable = (numeric - half).abs() / numeric.abs().max(half.abs()).max(opts.floor) <= stability;
                numeric = half;
                if stable {
                    resolved = true;
                    break;
                }
            }
            if !resolved {
                checks[p].unresolved += 1;
                continue;
            }
        }
        let c = &mut checks[p];
        let a = analytic[p][e];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        c.checked += 1;
        c.max_abs_err = c.max_abs_err.max(abs);
        c.max_rel_err = c.max_rel_err.max(rel);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let checked = checks.iter().map(|c| c.checked).sum();
    let unresolved = checks.iter().map(|c| c.unresolved).sum();
    Ok(GradCheckReport { params: checks, max_rel_err, loss: loss_value, checked, unresolved })
}
