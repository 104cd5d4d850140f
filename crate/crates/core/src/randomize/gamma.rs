//! Gamma(shape, 1) sampling and quantiles, both carried in log space.
//!
//! Tiny shapes (down to ~1e-5) are a working regime here: the draws and
//! quantiles underflow `f64` long before they stop mattering relative to
//! each other, so callers receive `ln x` and normalize afterwards.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// `ln` of a Gamma(`shape`, 1) draw.
///
/// For `shape < 1` uses the boost `G = G' · U^{1/shape}` with
/// `G' ~ Gamma(shape + 1, 1)`, evaluated as a sum of logs.
pub fn sample_ln_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        g.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0)
            .expect("positive shape")
            .sample(rng);
        // (0, 1]
        let u: f64 = 1.0 - rng.random::<f64>();
        g.ln() + u.ln() / shape
    }
}

/// `ln P(a, e^{ln_x})`, the log regularized lower incomplete gamma.
pub fn ln_lower_regularized(a: f64, ln_x: f64) -> f64 {
    if ln_x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let x = ln_x.exp();
    if x < a + 1.0 {
        // P = x^a e^{-x} / Γ(a) · Σ_k x^k / (a (a+1) ... (a+k))
        let mut term = 1.0 / a;
        let mut sum = term;
        for k in 1..MAX_ITER {
            term *= x / (a + k as f64);
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        a * ln_x - x - ln_gamma(a) + sum.ln()
    } else {
        (-upper_regularized_cf(a, x, ln_x)).ln_1p()
    }
}

/// Q(a, x) by modified Lentz continued fraction; valid for x ≥ a + 1.
fn upper_regularized_cf(a: f64, x: f64, ln_x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (a * ln_x - x - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn lower_regularized(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ln_lower_regularized(a, x.ln()).exp()
}

/// `ln` of the Gamma(`a`, 1) quantile at probability `u ∈ (0, 1)`.
///
/// Bisection on `t = ln x` with absolute tolerance `tol` (relative
/// tolerance on `x`). The lower bracket comes from the bound
/// `P(a, x) ≤ x^a / Γ(a + 1)`.
pub fn ln_gamma_quantile(a: f64, u: f64, tol: f64) -> f64 {
    assert!(
        a > 0.0 && u > 0.0 && u < 1.0,
        "quantile needs a > 0 and u in (0,1)"
    );
    let target = u.ln();
    let f = |t: f64| ln_lower_regularized(a, t) - target;

    let mut lo = (target + ln_gamma(a + 1.0)) / a;
    if f(lo) > 0.0 {
        // only reachable through rounding at the bound itself
        let mut step = 1.0;
        while f(lo) > 0.0 {
            lo -= step;
            step *= 2.0;
        }
    }
    let mut hi = lo.max((a + 1.0).ln()) + 1.0;
    let mut step = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi += step;
        step *= 2.0;
    }
    for _ in 0..400 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
