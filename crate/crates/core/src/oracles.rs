//! Independent reference computations used by the tests and the validation suite.
//!
//! Nothing here shares code with the production kernels it checks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::model::ChannelSet;

/// Minimizes `½cθ² − t ln(s + cθ)` over `θ > −s/c` by bisection on the derivative.
///
/// This is the prox problem restricted to the line `v + θΥ`; the orthogonal part of the
/// objective is minimized at zero displacement, so the restriction is exact.
pub fn prox_theta_1d(s: f64, c: f64, t: f64) -> f64 {
    let dq = |th: f64| c * th - t * c / (s + c * th);
    let mut lo = -s / c;
    let mut hi = lo.abs().max(1.0);
    while s + c * hi <= 0.0 || dq(hi) <= 0.0 {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if s + c * mid <= 0.0 || dq(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `(f(h) − f(−h)) / 2h` for a vector-valued `f`.
pub fn central_diff<F: FnMut(f64) -> DVector<f64>>(h: f64, mut f: F) -> DVector<f64> {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn central_diff_scalar<F: FnMut(f64) -> f64>(h: f64, mut f: F) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖b‖∞, floor)` with `b` the reference.
pub fn rel_err(a: &[f64], reference: &[f64], floor: f64) -> f64 {
    let num = a
        .iter()
        .zip(reference)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = reference
        .iter()
        .map(|y| y.abs())
        .fold(0.0, f64::max)
        .max(floor);
    num / den
}

/// Golden-section search on `[a, b]` after locating the best cell of a uniform scan.
fn scan_golden<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, cells: usize) -> (f64, f64) {
    let step = (b - a) / cells as f64;
    let mut best = (a, f(a));
    for j in 1..=cells {
        let x = a + step * j as f64;
        let y = f(x);
        if y < best.1 {
            best = (x, y);
        }
    }
    let (mut lo, mut hi) = ((best.0 - step).max(a), (best.0 + step).min(b));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (lo + hi);
    let y = f(x);
    if y < best.1 {
        (x, y)
    } else {
        best
    }
}

/// Downlink power needed when user `i` is served along the MMSE direction of virtual
/// uplink powers `q`, or `+∞` if those directions cannot meet the targets.
pub fn downlink_power_for_uplink(ch: &ChannelSet, gamma: &[f64], n0: f64, q: &[f64]) -> f64 {
    let k = ch.users();
    let n = ch.antennas();
    let f: Vec<DVector<Complex64>> = (0..k).map(|i| ch.channel(i).map(|z| z.conj())).collect();
    let mut sigma = DMatrix::<Complex64>::identity(n, n) * Complex64::from(n0);
    for (fi, &qi) in f.iter().zip(q) {
        sigma += fi * fi.adjoint() * Complex64::from(qi);
    }
    let Some(inv) = sigma.try_inverse() else {
        return f64::INFINITY;
    };
    let u: Vec<DVector<Complex64>> = f
        .iter()
        .map(|fi| {
            let d = &inv * fi;
            let nrm = d.norm();
            d / Complex64::from(nrm)
        })
        .collect();
    // p_i |h_iᵀu_i|²/Γ_i − Σ_{k≠i} p_k |h_iᵀu_k|² = N0
    let h: Vec<DVector<Complex64>> = (0..k).map(|i| ch.channel(i)).collect();
    let a = DMatrix::from_fn(k, k, |i, j| {
        let g = h[i].dot(&u[j]).norm_sqr();
        if i == j {
            g / gamma[i]
        } else {
            -g
        }
    });
    let Some(p) = a.lu().solve(&DVector::from_element(k, n0)) else {
        return f64::INFINITY;
    };
    if p.iter().any(|&x| !(x > 0.0)) {
        return f64::INFINITY;
    }
    p.sum()
}

/// Minimum block-level power for two users by nested golden-section search over the
/// log virtual uplink powers.
pub fn blp_power_two_users(ch: &ChannelSet, gamma: &[f64], n0: f64) -> f64 {
    assert_eq!(ch.users(), 2, "two-user oracle");
    let scale = (gamma[0].max(gamma[1]) * n0).ln();
    let (a, b) = (scale - 12.0, scale + 8.0);
    let inner = |l1: f64| {
        scan_golden(
            |l2| downlink_power_for_uplink(ch, gamma, n0, &[l1.exp(), l2.exp()]),
            a,
            b,
            80,
        )
        .1
    };
    scan_golden(inner, a, b, 80).1
}
