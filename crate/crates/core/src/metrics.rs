//! Evaluation metrics: R² with clamping and accuracy-to-tolerance with the
//! 5% worst-point discard.

use serde::{Deserialize, Serialize};

/// Raw and clamped R². Raw follows the usual definition; clamped maps
/// non-finite or negative values to 0 so averages stay bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2 {
    pub raw: f64,
    pub clamped: f64,
    /// True when the target had zero variance and the score was defined by
    /// the exact-match rule.
    pub zero_variance: bool,
}

pub fn r2_score(y: &[f64], y_hat: &[f64]) -> R2 {
    assert_eq!(y.len(), y_hat.len());
    assert!(y.len() >= 2, "R2 needs at least two points");
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        let exact = y.iter().zip(y_hat).all(|(a, b)| a == b);
        let raw = if exact { 1.0 } else { 0.0 };
        return R2 { raw, clamped: raw, zero_variance: true };
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let raw = 1.0 - ss_res / ss_tot;
    let clamped = if raw.is_finite() && raw > 0.0 { raw } else { 0.0 };
    R2 { raw, clamped, zero_variance: false }
}

/// Relative error with a floor on |y| so zero targets stay finite.
fn rel_err(y: f64, y_hat: f64) -> f64 {
    (y_hat - y).abs() / y.abs().max(1e-12)
}

/// 1 iff the maximum relative error is within `tau` after discarding the
/// ceil(0.05 N) worst points (discard active only for N >= 20).
pub fn acc_tau(y: &[f64], y_hat: &[f64], tau: f64) -> u8 {
    assert_eq!(y.len(), y_hat.len());
    let n = y.len();
    let mut errs: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| rel_err(*a, *b)).collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let discard = if n >= 20 { (0.05 * n as f64).ceil() as usize } else { 0 };
    let kept = &errs[..n - discard];
    let worst = kept.last().copied().unwrap_or(0.0);
    // Tiny slack so errors sitting exactly on the tolerance are not rejected
    // for float rounding in the ratio.
    u8::from(worst.is_finite() && worst <= tau * (1.0 + 1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction_scores_one() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r2_score(&y, &y).raw, 1.0);
        assert_eq!(acc_tau(&y, &y, 0.001), 1);
    }

    #[test]
    fn mean_predictor_scores_zero() {
        let y = [1.0, 2.0, 3.0];
        let y_hat = [2.0, 2.0, 2.0];
        let r = r2_score(&y, &y_hat);
        assert_eq!(r.raw, 0.0);
        assert_eq!(r.clamped, 0.0);
    }

    #[test]
    fn hand_computed_negative_r2_clamps() {
        // y=[1,2,3], yhat=[1,2,9]: raw = 1 - 36/2 = -17
        let r = r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 9.0]);
        assert_eq!(r.raw, -17.0);
        assert_eq!(r.clamped, 0.0);
    }

    #[test]
    fn zero_variance_target() {
        let r = r2_score(&[2.0, 2.0], &[2.0, 2.0]);
        assert!(r.zero_variance);
        assert_eq!(r.raw, 1.0);
        let r = r2_score(&[2.0, 2.0], &[2.0, 3.0]);
        assert_eq!(r.raw, 0.0);
    }

    #[test]
    fn acc_tau_boundary_without_discard() {
        // N=2 < 20: no discard; max rel err exactly 0.1 passes at tau=0.1.
        let y = [1.0, 2.0];
        let y_hat = [1.05, 2.2];
        assert_eq!(acc_tau(&y, &y_hat, 0.1), 1);
        assert_eq!(acc_tau(&y, &y_hat, 0.01), 0);
    }

    #[test]
    fn discard_absorbs_single_outlier_at_n200() {
        let mut y = vec![1.0; 200];
        let mut y_hat = vec![1.0; 200];
        y[17] = 1.0;
        y_hat[17] = 11.0; // rel err 10
        assert_eq!(acc_tau(&y, &y_hat, 0.1), 1);
    }

    #[test]
    fn acc_tau_monotone_in_tau() {
        let y: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let y_hat: Vec<f64> = y.iter().map(|v| v * 1.02).collect();
        let taus = [0.001, 0.01, 0.1, 1.0];
        let accs: Vec<u8> = taus.iter().map(|t| acc_tau(&y, &y_hat, *t)).collect();
        for w in accs.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn permutation_invariant() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let y_hat = [1.1, 2.1, 3.1, 4.1];
        let yp = [4.0, 3.0, 2.0, 1.0];
        let yp_hat = [4.1, 3.1, 2.1, 1.1];
        assert_eq!(r2_score(&y, &y_hat).raw, r2_score(&yp, &yp_hat).raw);
        assert_eq!(acc_tau(&y, &y_hat, 0.1), acc_tau(&yp, &yp_hat, 0.1));
    }

    #[test]
    fn zero_target_uses_floored_denominator() {
        let y = [0.0, 1.0];
        let y_hat = [1e-6, 1.0];
        // |1e-6| / 1e-12 = 1e6 >> tau
        assert_eq!(acc_tau(&y, &y_hat, 0.1), 0);
        assert_eq!(acc_tau(&y, &[0.0, 1.0], 0.1), 1);
    }
}
