//! Lower real branch of the Lambert W function.

use std::f64::consts::E;

const BRANCH_POINT: f64 = -1.0 / E;
const MAX_ITER: usize = 64;

/// W₋₁(x): the solution w ≤ -1 of w·eʷ = x for x in [-1/e, 0).
///
/// Returns `None` outside that domain. Starts from the branch-point series
/// near -1/e or the asymptotic expansion near 0⁻ and refines with Halley's
/// method until the relative step drops below 1e-15.
pub fn lambert_wm1(x: f64) -> Option<f64> {
    if !(BRANCH_POINT..0.0).contains(&x) {
        // Accept values a rounding error below the branch point.
        if x < BRANCH_POINT && x > BRANCH_POINT - 4.0 * f64::EPSILON {
            return Some(-1.0);
        }
        return None;
    }
    if x == BRANCH_POINT {
        return Some(-1.0);
    }

    let mut w = initial_guess(x);
    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let next = (w - f / denom).min(-1.0);
        let done = (next - w).abs() <= 1e-15 * next.abs();
        w = next;
        if done {
            break;
        }
    }
    Some(w)
}

fn initial_guess(x: f64) -> f64 {
    if x < -0.25 {
        // Series in p = -sqrt(2(e·x + 1)) around the branch point.
        let p = -(2.0 * (E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        let l1 = (-x).ln();
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    }
}
