//! Central finite-difference checks against the tape's reverse sweep.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Absolute floor on the relative-error denominator, so that gradients that
/// are zero on both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates in total, sampled uniformly.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Compare reverse-mode gradients of `f` with central differences.
///
/// `f` must rebuild the computation from the given leaves on a fresh tape and
/// return a 1×1 loss. Any randomness inside `f` must be frozen by the caller.
pub fn grad_check<F>(f: F, leaves: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(l, t)| (0..t.len()).map(move |k| (l, k)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(m) if m < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut pick: Vec<usize> = sample(&mut rng, coords.len(), m).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut leaves_rep: Vec<LeafReport> = (0..leaves.len())
        .map(|leaf| LeafReport {
            leaf,
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        })
        .collect();
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (l, k) in chosen {
        let orig = work[l].data()[k];
        work[l].data_mut()[k] = orig + opts.h;
        let plus = eval(&work)?;
        work[l].data_mut()[k] = orig - opts.h;
        let minus = eval(&work)?;
        work[l].data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[l].data()[k];
        let rep = &mut leaves_rep[l];
        rep.checked += 1;
        rep.max_rel_error = rep.max_rel_error.max(relative_error(a, numeric));
        rep.max_abs_error = rep.max_abs_error.max((a - numeric).abs());
    }
    let max_rel_error = leaves_rep.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        leaves: leaves_rep,
        max_rel_error,
        tol: opts.tol,
        passed: max_rel_error < opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let rep = grad_check(
            |t, v| {
                let s = t.square(v[0]);
                Ok(t.sum(s))
            },
            &[Tensor::scalar(3.0)],
            &opts,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn linear_map_is_tight() {
        let opts = GradCheckOptions {
            tol: 1e-8,
            ..Default::default()
        };
        let w = Tensor::from_fn(3, 2, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
        let x = Tensor::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.25);
        let rep = grad_check(
            |t, v| {
                let y = t.matmul(v[1], v[0])?;
                Ok(t.sum(y))
            },
            &[w, x],
            &opts,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
