//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Which parameter entries to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    All,
    /// Up to `per_tensor` entries of each parameter, drawn with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares tape gradients of the scalar produced by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for the selected entries of `params`.
///
/// `f` must be deterministic and build its whole computation on the tape it
/// is given.
pub fn grad_check<F>(params: &ParamStore, h: f64, selection: Selection, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for id in params.ids() {
        let Some(grad) = analytic.param(id) else { continue };
        for entry in entries(params, id, selection) {
            let orig = work.get(id).data()[entry];
            work.get_mut(id).data_mut()[entry] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[entry] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[entry] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[entry];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), entry));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn entries(params: &ParamStore, id: ParamId, selection: Selection) -> Vec<usize> {
    let n = params.get(id).len();
    match selection {
        Selection::All => (0..n).collect(),
        Selection::Sample { per_tensor, seed } => {
            if per_tensor >= n {
                return (0..n).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut picked = sample(&mut rng, n, per_tensor).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}
