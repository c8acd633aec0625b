//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default step for 64-bit central differences.
pub const FD_STEP: f64 = 1e-5;
/// Agreement good enough that narrower stencils are not tried.
const RETRY_BELOW: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a small absolute floor so that coordinates whose true
/// derivative is ~0 are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `f` at `x`, on at most
/// `max_coords` coordinates picked deterministically from `seed`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    max_coords: usize,
    seed: u64,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let idx: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, x.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = x.to_vec();
    let mut out = GradCheck {
        checked: idx.len(),
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for &i in &idx {
        let orig = probe[i];
        let mut e = f64::INFINITY;
        // A ReLU kink lying inside the stencil spoils the difference quotient;
        // narrower stencils step over it, while a wrong gradient stays wrong.
        for step in [FD_STEP, FD_STEP * 1e-1, FD_STEP * 1e-2] {
            probe[i] = orig + step;
            let fp = f(&probe);
            probe[i] = orig - step;
            let fm = f(&probe);
            probe[i] = orig;
            e = e.min(rel_err(analytic[i], (fp - fm) / (2.0 * step)));
            if e < RETRY_BELOW {
                break;
            }
        }
        if e > out.max_rel_err {
            out.max_rel_err = e;
            out.worst_index = i;
        }
    }
    out
}
