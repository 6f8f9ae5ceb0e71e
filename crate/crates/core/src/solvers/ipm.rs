//! Strict-phase SLP by equality elimination and log-barrier Newton continuation.
//!
//! The K equality rows `a_i = ΩᵀΥ_i` are eliminated with an orthonormal null-space basis
//! `Z` from a full QR of `Aᵀ`. Writing `v1 = Zw`, the problem becomes
//! `min ‖w‖²  s.t.  b_iᵀw ≥ g_i` with `b_i = ZᵀΥ_i`, solved by barrier continuation.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{stationarity_residual, SolveOptions, SolveReport, SolveStatus};
use crate::error::{invalid, Error, Result};
use crate::model::{im_residual, re_margin, skew, skew_dot, LiftedProblem, RealPrecoder};

/// Margin target of the phase-1 point built from the thresholds. A point from the cone
/// fallback is scaled to margins `g_i` instead, because its direction may be nearly
/// tangent to some constraint.
const PHASE1_DELTA: f64 = 1e-6;
/// Squared scaled Newton decrement treated as exactly centered.
const CENTERED: f64 = 1e-12;
/// Below this decrement, a non-decreasing step means the rounding floor was hit.
const STALL: f64 = 1e-6;

/// Damped Newton on `f = φ + τ·barrier`, where `f/τ` is self-concordant.
///
/// `value` returns `+∞` outside the domain, `derivs` returns `(∇f, ∇²f)` and `max_step`
/// the largest step along `dx` that stays strictly inside the linear constraints. Returns
/// the iteration count. Inside
/// the quadratic region (scaled Newton decrement below ¼) full steps are taken without a
/// line search, since rounding in `f` would otherwise stall Armijo near the solution.
#[allow(clippy::too_many_arguments)]
fn damped_newton(
    x: &mut DVector<f64>,
    tau: f64,
    max_iter: usize,
    gtol: f64,
    mut stop_early: impl FnMut(&DVector<f64>) -> bool,
    value: impl Fn(&DVector<f64>) -> f64,
    derivs: impl Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    max_step: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
) -> usize {
    let mut f = value(x);
    let mut last_dec2 = f64::INFINITY;
    for it in 0..max_iter {
        if stop_early(x) {
            return it;
        }
        let (grad, hess) = derivs(x);
        if grad.amax() <= gtol {
            return it;
        }
        let Some(chol) = hess.cholesky() else {
            return it;
        };
        let dx = -chol.solve(&grad);
        let slope = grad.dot(&dx);
        let dec2 = -slope / tau;
        // quadratic convergence ended: the floor set by rounding was reached
        if dec2 <= CENTERED || (dec2 < STALL && dec2 >= last_dec2) {
            return it;
        }
        last_dec2 = dec2;
        let mut alpha = max_step(x, &dx).min(1.0);
        if dec2 < 0.0625 {
            *x += &dx * alpha;
            f = value(x);
            continue;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &*x + &dx * alpha;
            let ft = value(&trial);
            if ft <= f + 0.25 * alpha * slope {
                *x = trial;
                f = ft;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return it + 1;
        }
    }
    max_iter
}

/// Largest `α ≤ 1`-scaled step keeping `b_iᵀ(x + α dx) − shift_i` positive, with a 0.99 margin.
fn ratio_test(slacks: &[f64], rates: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for (&s, &r) in slacks.iter().zip(rates) {
        if r < 0.0 {
            alpha = alpha.min(-0.99 * s / r);
        }
    }
    alpha
}

/// Finds `w` with `b_iᵀw > 0` for all `i` by maximizing `σ` subject to `b_iᵀw ≥ σ`,
/// `‖w‖ ≤ 1`, or returns `None` when the best `σ` is zero to working precision.
fn cone_direction(b: &[DVector<f64>], iterations: &mut usize) -> Option<DVector<f64>> {
    let nd = b[0].len();
    let k = b.len();
    let scale = b.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let mut y = DVector::zeros(nd + 1);
    y[nd] = -scale;
    let mut tau = scale;
    for _ in 0..200 {
        let slacks = |y: &DVector<f64>| -> Vec<f64> {
            let w = y.rows(0, nd);
            b.iter().map(|bi| bi.dot(&w) - y[nd]).collect()
        };
        let value = |y: &DVector<f64>| {
            let e = slacks(y);
            let q = 1.0 - y.rows(0, nd).norm_squared();
            if q <= 0.0 || e.iter().any(|&x| x <= 0.0) {
                return f64::INFINITY;
            }
            -y[nd] - tau * (e.iter().map(|x| x.ln()).sum::<f64>() + q.ln())
        };
        let derivs = |y: &DVector<f64>| {
            let e = slacks(y);
            let w = y.rows(0, nd).into_owned();
            let q = 1.0 - w.norm_squared();
            let mut grad = DVector::zeros(nd + 1);
            let mut hess = DMatrix::zeros(nd + 1, nd + 1);
            grad[nd] = -1.0;
            for (bi, &ei) in b.iter().zip(&e) {
                let mut c = DVector::zeros(nd + 1);
                c.rows_mut(0, nd).copy_from(bi);
                c[nd] = -1.0;
                grad.axpy(-tau / ei, &c, 1.0);
                hess.ger(tau / (ei * ei), &c, &c, 1.0);
            }
            let mut hw = hess.view_mut((0, 0), (nd, nd));
            for j in 0..nd {
                hw[(j, j)] += 2.0 * tau / q;
            }
            hw.ger(4.0 * tau / (q * q), &w, &w, 1.0);
            grad.rows_mut(0, nd).axpy(2.0 * tau / q, &w, 1.0);
            (grad, hess)
        };
        let max_step = |y: &DVector<f64>, dy: &DVector<f64>| {
            let dw = dy.rows(0, nd);
            let rates: Vec<f64> = b.iter().map(|bi| bi.dot(&dw) - dy[nd]).collect();
            ratio_test(&slacks(y), &rates)
        };
        *iterations += damped_newton(
            &mut y,
            tau,
            100,
            1e-13 * scale,
            |y| y[nd] > 0.0,
            value,
            derivs,
            max_step,
        );
        if y[nd] > 0.0 {
            return Some(y.rows(0, nd).into_owned());
        }
        // σ* ≤ σ + (K + 1)τ on the central path
        if y[nd] + (k as f64 + 1.0) * tau <= 1e-12 * scale {
            return None;
        }
        tau *= 0.2;
    }
    None
}

/// Scales a direction with positive `b_iᵀw` until every margin reaches `δ_i`, then checks
/// the margins as computed, since cancellation can erase a margin that is small relative
/// to `‖w‖`.
fn scale_to_interior(
    b: &[DVector<f64>],
    g: &[f64],
    w: &DVector<f64>,
    delta: impl Fn(f64) -> f64,
) -> Option<DVector<f64>> {
    let mut alpha: f64 = 0.0;
    for (bi, &gi) in b.iter().zip(g) {
        let d = bi.dot(w);
        if !(d > 0.0) {
            return None;
        }
        alpha = alpha.max((gi + delta(gi)) / d);
    }
    let w = w * alpha;
    let interior = alpha.is_finite() && b.iter().zip(g).all(|(bi, &gi)| bi.dot(&w) - gi > 0.0);
    interior.then_some(w)
}

/// Least-squares equality multipliers for fixed `μ`: `Aᵀλ = Σ μ_i Υ_i − 2v1`, with `AAᵀ = G`.
fn equality_multipliers(lp: &LiftedProblem, v1: &DVector<f64>, mu: &[f64]) -> Result<Vec<f64>> {
    let k = lp.users();
    let mut r = v1 * -2.0;
    for (u, &m) in lp.rows().iter().zip(mu) {
        r.axpy(m, u, 1.0);
    }
    let gram = DMatrix::from_fn(k, k, |i, j| lp.upsilon(i).dot(lp.upsilon(j)));
    let ar = DVector::from_iterator(k, lp.rows().iter().map(|u| skew_dot(u, &r)));
    let lambda = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("channel Gram matrix is singular".into()))?
        .solve(&ar);
    Ok(lambda.iter().copied().collect())
}

/// Multipliers from the stationarity system restricted to the near-active set
/// `{i : m_i < √τ}`. The barrier estimate `τ/m_i` loses accuracy as `m_i` approaches the
/// rounding level of `Υ_iᵀv1`, while this solve does not.
fn polish_duals(
    lp: &LiftedProblem,
    v1: &DVector<f64>,
    margins: &[f64],
    tau: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let k = lp.users();
    let active: Vec<usize> = (0..k).filter(|&i| margins[i] < tau.sqrt()).collect();
    let cols = k + active.len();
    if cols > lp.dim() {
        return None;
    }
    let c = DMatrix::from_fn(lp.dim(), cols, |r, j| {
        if j < k {
            skew(lp.upsilon(j))[r]
        } else {
            lp.upsilon(active[j - k])[r]
        }
    });
    let sol = c.svd(true, true).solve(&(v1 * 2.0), 1e-12).ok()?;
    let mut mu = vec![0.0; k];
    for (slot, &i) in active.iter().enumerate() {
        if sol[k + slot] < 0.0 {
            return None;
        }
        mu[i] = sol[k + slot];
    }
    Some((mu, sol.rows(0, k).iter().copied().collect()))
}

pub fn solve_slp_strict(lp: &LiftedProblem, opts: &SolveOptions) -> Result<SolveReport> {
    opts.validate()?;
    let start = Instant::now();
    let k = lp.users();
    let d = lp.dim();
    if k > d {
        return Err(invalid(format!(
            "{k} users exceed the lifted dimension {d}"
        )));
    }
    let at = DMatrix::from_fn(d, k, |r, i| -skew(lp.upsilon(i))[r]);
    let qr = at.qr();
    let rdiag = qr.r().diagonal().map(f64::abs);
    if rdiag.min() <= 1e-12 * rdiag.max().max(1.0) {
        return Err(Error::Numerical(
            "phase constraints are linearly dependent".into(),
        ));
    }
    let nd = d - k;
    if nd == 0 {
        return Ok(SolveReport::infeasible(
            d,
            k,
            0,
            start.elapsed().as_secs_f64(),
        ));
    }
    let mut qt = DMatrix::identity(d, d);
    qr.q_tr_mul(&mut qt);
    let z = qt.rows(k, nd).transpose();
    let b: Vec<DVector<f64>> = lp.rows().iter().map(|u| z.tr_mul(u)).collect();
    let g = lp.thresholds();

    let mut iterations = 0;
    let heuristic = {
        let mut v0 = DVector::zeros(d);
        for (u, &gi) in lp.rows().iter().zip(g) {
            v0.axpy(gi / u.norm_squared(), u, 1.0);
        }
        scale_to_interior(&b, g, &z.tr_mul(&v0), |_| PHASE1_DELTA)
    };
    let w0 = match heuristic {
        Some(w) => Some(w),
        None => cone_direction(&b, &mut iterations)
            .and_then(|dir| scale_to_interior(&b, g, &dir, |gi| gi)),
    };
    let Some(mut w) = w0 else {
        return Ok(SolveReport::infeasible(
            d,
            k,
            iterations,
            start.elapsed().as_secs_f64(),
        ));
    };

    let margins =
        |w: &DVector<f64>| -> Vec<f64> { b.iter().zip(g).map(|(bi, gi)| bi.dot(w) - gi).collect() };
    let mut tau = opts.mu0;
    let mut finished = false;
    for _ in 0..opts.max_outer {
        let value = |w: &DVector<f64>| {
            let m = margins(w);
            if m.iter().any(|&x| x <= 0.0) {
                return f64::INFINITY;
            }
            w.norm_squared() - tau * m.iter().map(|x| x.ln()).sum::<f64>()
        };
        let derivs = |w: &DVector<f64>| {
            let m = margins(w);
            let mut grad = w * 2.0;
            let mut hess = DMatrix::identity(nd, nd) * 2.0;
            for (bi, &mi) in b.iter().zip(&m) {
                grad.axpy(-tau / mi, bi, 1.0);
                hess.ger(tau / (mi * mi), bi, bi, 1.0);
            }
            (grad, hess)
        };
        let max_step = |w: &DVector<f64>, dw: &DVector<f64>| {
            let rates: Vec<f64> = b.iter().map(|bi| bi.dot(dw)).collect();
            ratio_test(&margins(w), &rates)
        };
        let gtol = 0.1 * opts.tol * w.amax().max(1.0);
        iterations += damped_newton(
            &mut w,
            tau,
            opts.max_newton,
            gtol,
            |_| false,
            value,
            derivs,
            max_step,
        );
        // an inexact centering step is tolerated: the final KKT check decides the status
        if k as f64 * tau <= opts.tol {
            finished = true;
            break;
        }
        tau *= opts.mu_shrink;
    }

    let v1 = &z * &w;
    let m = margins(&w);
    let barrier_mu: Vec<f64> = m.iter().map(|&mi| tau / mi).collect();
    let barrier_lambda = equality_multipliers(lp, &v1, &barrier_mu)?;
    let (duals_mu, duals_lambda) = match polish_duals(lp, &v1, &m, tau) {
        Some((mu, lambda))
            if stationarity_residual(lp, &v1, &mu, &lambda)
                < stationarity_residual(lp, &v1, &barrier_mu, &barrier_lambda) =>
        {
            (mu, lambda)
        }
        _ => (barrier_mu, barrier_lambda),
    };

    let eq = (0..k)
        .map(|i| im_residual(lp, &v1, i).abs())
        .fold(0.0, f64::max);
    let min_margin = (0..k)
        .map(|i| re_margin(lp, &v1, i))
        .fold(f64::INFINITY, f64::min);
    let stat = stationarity_residual(lp, &v1, &duals_mu, &duals_lambda);
    let verified =
        eq <= opts.tol && min_margin >= -opts.tol && stat <= opts.tol * v1.amax().max(1.0);
    let status = if finished && verified {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    let power = v1.norm_squared();
    Ok(SolveReport {
        v1: RealPrecoder::new(v1)?,
        power,
        duals_mu,
        duals_lambda,
        status,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
