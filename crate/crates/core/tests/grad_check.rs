//! Analytic tree gradients checked against central finite differences on
//! randomly generated expressions.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use symreg_core::expr::skeletonize;
use symreg_core::generator::{sample_function, GeneratorConfig};

/// Central finite difference of f(theta) w.r.t. slot k, step scaled by the
/// constant's magnitude. Returns None when a perturbed point leaves the
/// domain.
fn central_diff(
    sk: &symreg_core::Skeleton,
    theta: &[f64],
    k: usize,
    x: &[f64],
    scale: f64,
) -> Option<f64> {
    let h = scale * theta[k].abs().max(1.0);
    let mut plus = theta.to_vec();
    plus[k] += h;
    let mut minus = theta.to_vec();
    minus[k] -= h;
    let fp = sk.substitute(&plus).evaluate(x).ok()?;
    let fm = sk.substitute(&minus).evaluate(x).ok()?;
    Some((fp - fm) / (2.0 * h))
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let cfg = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked_pairs = 0usize;
    let mut attempts = 0usize;

    while checked_pairs < 1000 {
        attempts += 1;
        assert!(attempts < 100_000, "generator kept producing unusable pairs");
        let f = sample_function(&cfg, &mut rng);
        let x: Vec<f64> = (0..f.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let Ok(value) = f.expr.evaluate(&x) else { continue };
        // Skip wildly scaled points where O(h^2) truncation swamps the
        // comparison; the tolerance is meant for sane magnitudes.
        if value.abs() > 1e8 {
            continue;
        }
        let Ok(analytic) = f.expr.grad_constants(&x) else { continue };
        if analytic.iter().any(|g| g.abs() > 1e8) {
            continue;
        }

        let (sk, theta) = skeletonize(&f.expr);
        // The finite-difference oracle is only valid where it is
        // self-consistent: estimates at step h and h/2 must agree, otherwise
        // the truncation error dominates (e.g. cos of a huge argument) and
        // the pair is skipped.
        let mut usable = true;
        let mut fds = Vec::with_capacity(theta.len());
        for k in 0..theta.len() {
            let (Some(fd1), Some(fd2)) =
                (central_diff(&sk, &theta, k, &x, 1e-6), central_diff(&sk, &theta, k, &x, 5e-7))
            else {
                usable = false;
                break;
            };
            if (fd1 - fd2).abs() > 1e-5 * fd2.abs().max(1.0) {
                usable = false;
                break;
            }
            // Roundoff in fp - fm is ~eps*|f|; skip slots where that noise
            // alone exceeds half the comparison tolerance.
            let h = 1e-6 * theta[k].abs().max(1.0);
            if f64::EPSILON * value.abs() / h > 5e-5 * fd2.abs().max(1.0) {
                usable = false;
                break;
            }
            fds.push(fd2);
        }
        if !usable {
            continue;
        }

        for (k, (an, fd)) in analytic.iter().zip(&fds).enumerate() {
            let denom = an.abs().max(fd.abs()).max(1.0);
            assert!(
                (an - fd).abs() / denom <= 1e-4,
                "slot {k}: analytic {an} vs fd {fd} for {} at {x:?}",
                f.expr.prefix()
            );
        }
        checked_pairs += 1;
    }
}
