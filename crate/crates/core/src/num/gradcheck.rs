//! Finite-difference validation of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Number of coordinates actually checked.
    pub checked: usize,
    /// Count of non-finite analytic or numeric entries (always failures).
    pub non_finite: usize,
    pub pass: bool,
}

/// Compare an analytic gradient against central finite differences of `f`
/// at `x`.
///
/// The relative error per coordinate is |a − n| / (max(|a|, |n|) + 1e-6);
/// the report passes iff the maximum over checked coordinates is below
/// `tolerance` and every value involved is finite. `sample` optionally
/// restricts the check to a deterministic random subset of coordinates,
/// which keeps whole-model checks cheap.
pub fn gradient_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    sample: Option<(usize, u64)>,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    assert!(step > 0.0, "step must be positive");

    let coords: Vec<usize> = match sample {
        Some((n, seed)) if n < x.len() => {
            let mut all: Vec<usize> = (0..x.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            all.shuffle(&mut rng);
            all.truncate(n);
            all
        }
        _ => (0..x.len()).collect(),
    };

    let mut xp = x.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut worst_index = 0;
    let mut non_finite = 0;
    for &i in &coords {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            non_finite += 1;
            continue;
        }
        let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
        non_finite,
        pass: non_finite == 0 && max_rel_err < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::tape::Tape;
    use std::sync::Arc;

    #[test]
    fn quadratic_passes() {
        // f(x) = x^2 at x = 3: analytic gradient 6.
        let mut f = |x: &[f64]| x[0] * x[0];
        let report = gradient_check(&mut f, &[3.0], &[6.0], 1e-6, 1e-6, None);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn reports_failure_on_wrong_gradient() {
        let mut f = |x: &[f64]| x[0] * x[0];
        let report = gradient_check(&mut f, &[3.0], &[5.0], 1e-6, 1e-6, None);
        assert!(!report.pass);
    }

    #[test]
    fn kl_of_softmax_composition() {
        // f = KL(softmax(x) || q) for fixed q, via generic tape ops.
        let x0: Vec<f64> = (0..8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let q: Vec<f64> = {
            let raw: Vec<f64> = (0..8).map(|i| 0.4 + (i as f64 * 0.13).sin().abs()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let ln_q: Vec<f64> = q.iter().map(|v| v.ln()).collect();

        let eval = |x: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let xv = tape.param(Arc::new(x.to_vec()), 1, 8, true);
            let p = tape.softmax_rows(xv, 1.0);
            let lnp = tape.ln_floored(p);
            let lnq = tape.constant(ln_q.clone(), 1, 8);
            let neg = tape.scale(lnq, -1.0);
            let diff = tape.add(lnp, neg);
            let prod = tape.mul(p, diff);
            let loss = tape.sum(prod);
            let value = tape.scalar(loss);
            if want_grad {
                let mut gs = tape.backward(loss);
                (value, gs.take(xv))
            } else {
                (value, None)
            }
        };

        let (_, grad) = eval(&x0, true);
        let grad = grad.unwrap();
        let mut f = |x: &[f64]| eval(x, false).0;
        let report = gradient_check(&mut f, &x0, &grad, 1e-6, 1e-4, None);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
