//! Log-barrier for a single half-space `Υᵀx ≥ g` and its proximity operator.
//!
//! The prox of `t·B` with `B(x) = −ln(Υᵀx − g)` moves `v` along `Υ`:
//! `Φ = v + θΥ`, where `θ > 0` is the positive root of `cθ² + sθ − t = 0`,
//! `s = Υᵀv − g`, `c = ‖Υ‖²`, `t = γμ`. The resulting margin `(s + r)/2`,
//! `r = √(s² + 4tc)`, is always strictly positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, invalid, Error, Result};
use crate::model::LiftedProblem;

/// Arguments of a single half-space prox.
#[derive(Clone, Copy, Debug)]
pub struct ProxInputs<'a> {
    pub v1: &'a DVector<f64>,
    pub upsilon: &'a DVector<f64>,
    pub threshold: f64,
    pub gamma: f64,
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxResult {
    pub phi: DVector<f64>,
    /// Margin before the prox, `Υᵀv − g`.
    pub s: f64,
    pub r: f64,
    pub theta: f64,
    /// `‖Υ‖²`.
    pub c: f64,
}

impl ProxResult {
    /// Margin after the prox, `(s + r)/2`.
    pub fn margin(&self) -> f64 {
        0.5 * (self.s + self.r)
    }
}

/// Which root of the stationarity quadratic to take.
///
/// `Printed` is the negative root `(s − r)/(2c)`. It does not solve the prox problem and is
/// kept only so the validation suite can show that its oracle check catches it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProxRoot {
    #[default]
    Stationary,
    Printed,
}

/// `−ln(Υ_iᵀv − g_i)`, or `+∞` outside the open half-space.
pub fn barrier_value(lp: &LiftedProblem, v1: &DVector<f64>, i: usize) -> f64 {
    let m = lp.upsilon(i).dot(v1) - lp.threshold(i);
    if m > 0.0 {
        -m.ln()
    } else {
        f64::INFINITY
    }
}

pub fn prox_barrier(inp: ProxInputs<'_>) -> Result<ProxResult> {
    prox_barrier_with_root(inp, ProxRoot::Stationary)
}

pub fn prox_barrier_with_root(inp: ProxInputs<'_>, root: ProxRoot) -> Result<ProxResult> {
    check_len("prox upsilon", inp.v1.len(), inp.upsilon.len())?;
    let t = inp.gamma * inp.mu;
    if !(inp.gamma > 0.0 && inp.mu > 0.0 && t.is_finite()) {
        return Err(invalid(format!(
            "barrier step needs γ > 0 and μ > 0, got γ={} μ={}",
            inp.gamma, inp.mu
        )));
    }
    let c = inp.upsilon.norm_squared();
    if c == 0.0 {
        return Err(invalid("prox direction Υ is zero"));
    }
    let s = inp.upsilon.dot(inp.v1) - inp.threshold;
    let r = s.hypot(2.0 * (t * c).sqrt());
    if r == 0.0 || !r.is_finite() {
        return Err(Error::Numerical(format!(
            "prox discriminant degenerate (s={s}, t={t}, c={c})"
        )));
    }
    let theta = match root {
        // both branches are the same root; pick the one without cancellation
        ProxRoot::Stationary if s >= 0.0 => 2.0 * t / (s + r),
        ProxRoot::Stationary => (r - s) / (2.0 * c),
        ProxRoot::Printed => (s - r) / (2.0 * c),
    };
    let phi = inp.v1 + inp.upsilon * theta;
    Ok(ProxResult {
        phi,
        s,
        r,
        theta,
        c,
    })
}

/// `∂Φ/∂v = I + (s/r − 1)/(2c) ΥΥᵀ`.
pub fn prox_jacobian_v(res: &ProxResult, upsilon: &DVector<f64>, c: f64) -> DMatrix<f64> {
    let n = upsilon.len();
    let a = (res.s / res.r - 1.0) / (2.0 * c);
    DMatrix::from_fn(n, n, |i, k| {
        a * (upsilon[i] * upsilon[k]) + if i == k { 1.0 } else { 0.0 }
    })
}

/// `∂Φ/∂μ = (γ/r) Υ`.
pub fn prox_grad_mu(res: &ProxResult, upsilon: &DVector<f64>, gamma: f64) -> DVector<f64> {
    upsilon * (gamma / res.r)
}

/// `∂Φ/∂γ = (μ/r) Υ` (barrier weight held fixed).
pub fn prox_grad_gamma(res: &ProxResult, upsilon: &DVector<f64>, mu: f64) -> DVector<f64> {
    upsilon * (mu / res.r)
}

/// Pulls `x̄ = ∂ℓ/∂Φ` back to `(∂ℓ/∂v, ∂ℓ/∂t)` with `t = γμ`.
pub fn prox_vjp(
    res: &ProxResult,
    upsilon: &DVector<f64>,
    xbar: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let ux = upsilon.dot(xbar);
    let a = (res.s / res.r - 1.0) / (2.0 * res.c);
    (xbar + upsilon * (a * ux), ux / res.r)
}

/// Applies the per-user prox for `i = 0..K` in index order.
pub fn prox_sweep(
    v1: &DVector<f64>,
    lp: &LiftedProblem,
    gamma: f64,
    mu: &[f64],
) -> Result<(DVector<f64>, Vec<ProxResult>)> {
    check_len("barrier weights", lp.users(), mu.len())?;
    check_len("precoder", lp.dim(), v1.len())?;
    let mut v = v1.clone();
    let mut out = Vec::with_capacity(mu.len());
    for (i, &m) in mu.iter().enumerate() {
        let res = prox_barrier(ProxInputs {
            v1: &v,
            upsilon: lp.upsilon(i),
            threshold: lp.threshold(i),
            gamma,
            mu: m,
        })?;
        v.copy_from(&res.phi);
        out.push(res);
    }
    Ok((v, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{central_diff, prox_theta_1d};
    use proptest::prelude::*;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn run(v: &DVector<f64>, u: &DVector<f64>, g: f64, gamma: f64, mu: f64) -> ProxResult {
        prox_barrier(ProxInputs {
            v1: v,
            upsilon: u,
            threshold: g,
            gamma,
            mu,
        })
        .unwrap()
    }

    #[test]
    fn barrier_values() {
        let lp = LiftedProblem::new(vec![dv(&[1.0, 0.0])], vec![1.0], 1.0).unwrap();
        assert_eq!(barrier_value(&lp, &dv(&[2.0, 0.0]), 0), 0.0);
        assert_eq!(barrier_value(&lp, &dv(&[1.0, 5.0]), 0), f64::INFINITY);
        let e = std::f64::consts::E;
        assert!((barrier_value(&lp, &dv(&[1.0 + e, 0.0]), 0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn golden_ratio_example() {
        let r = run(&dv(&[0.0, 0.0]), &dv(&[1.0, 0.0]), 1.0, 1.0, 1.0);
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((r.theta - golden).abs() < 1e-15);
        assert!((r.phi[0] - 1.618_033_988_749_895).abs() < 1e-15);
        assert_eq!(r.phi[1], 0.0);
    }

    #[test]
    fn vanishing_barrier_keeps_feasible_point() {
        let r = run(&dv(&[1.0, 0.0]), &dv(&[1.0, 0.0]), 0.0, 1e-12, 1.0);
        assert!((r.phi[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn input_validation() {
        let v = dv(&[1.0, 0.0]);
        let bad = |u: &DVector<f64>, gamma: f64, mu: f64| {
            prox_barrier(ProxInputs {
                v1: &v,
                upsilon: u,
                threshold: 1.0,
                gamma,
                mu,
            })
            .is_err()
        };
        assert!(bad(&dv(&[0.0, 0.0]), 1.0, 1.0));
        assert!(bad(&dv(&[1.0, 0.0]), 0.0, 1.0));
        assert!(bad(&dv(&[1.0, 0.0]), 1.0, -1.0));
        assert!(bad(&dv(&[1.0, 0.0, 0.0]), 1.0, 1.0));
    }

    #[test]
    fn printed_root_violates_the_half_space() {
        let v = dv(&[0.0, 0.0]);
        let u = dv(&[1.0, 0.0]);
        let inp = ProxInputs {
            v1: &v,
            upsilon: &u,
            threshold: 1.0,
            gamma: 1.0,
            mu: 1.0,
        };
        let p = prox_barrier_with_root(inp, ProxRoot::Printed).unwrap();
        assert!(u.dot(&p.phi) - 1.0 < 0.0);
    }

    #[test]
    fn jacobian_examples() {
        // s = 0, t = 1, c = 1 → s/r = 0 → diag(1/2, 1)
        let u = dv(&[1.0, 0.0]);
        let r = run(&dv(&[1.0, 0.0]), &u, 1.0, 1.0, 1.0);
        assert_eq!(r.s, 0.0);
        let j = prox_jacobian_v(&r, &u, r.c);
        assert!((j[(0, 0)] - 0.5).abs() < 1e-15 && (j[(1, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(j[(0, 1)], 0.0);
        let gm = prox_grad_mu(&r, &u, 1.0);
        assert!((gm[0] - 0.5).abs() < 1e-15 && gm[1] == 0.0);

        // vanishing barrier far inside: J → I, ∂Φ/∂γ → 0 as μ → 0
        let r = run(&dv(&[5.0, 0.0]), &u, 1.0, 1e-3, 1e-9);
        let j = prox_jacobian_v(&r, &u, r.c);
        assert!((j - DMatrix::identity(2, 2)).amax() < 1e-9);
        assert!(prox_grad_gamma(&r, &u, 1e-9).amax() < 1e-9);
    }

    #[test]
    fn sweep_single_user_matches_prox() {
        let lp = LiftedProblem::new(vec![dv(&[0.3, -1.2, 0.7, 0.1])], vec![2.0], 0.5).unwrap();
        let v = dv(&[0.1, 0.2, -0.3, 0.4]);
        let (out, cache) = prox_sweep(&v, &lp, 0.3, &[0.7]).unwrap();
        let direct = run(&v, lp.upsilon(0), lp.threshold(0), 0.3, 0.7);
        assert_eq!(out, direct.phi);
        assert_eq!(cache[0], direct);
    }

    #[test]
    fn sweep_orthogonal_rows_is_order_independent() {
        let u1 = dv(&[1.0, 2.0, 0.0, 0.0]);
        let u2 = dv(&[0.0, 0.0, -3.0, 0.5]);
        let v = dv(&[0.4, -0.1, 0.2, 0.9]);
        let fwd = LiftedProblem::new(vec![u1.clone(), u2.clone()], vec![1.0, 2.0], 1.0).unwrap();
        let rev = LiftedProblem::new(vec![u2, u1], vec![2.0, 1.0], 1.0).unwrap();
        let (a, _) = prox_sweep(&v, &fwd, 0.2, &[0.5, 1.5]).unwrap();
        let (b, _) = prox_sweep(&v, &rev, 0.2, &[1.5, 0.5]).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn sweep_generic_orders_end_feasible_for_last_constraint() {
        let u1 = dv(&[1.0, 0.5, 0.2, -0.4]);
        let u2 = dv(&[0.3, 1.0, -0.6, 0.2]);
        let v = dv(&[-1.0, -1.0, 0.0, 0.0]);
        for rows in [vec![u1.clone(), u2.clone()], vec![u2.clone(), u1.clone()]] {
            let lp = LiftedProblem::new(rows, vec![4.0, 4.0], 1.0).unwrap();
            let (out, _) = prox_sweep(&v, &lp, 0.1, &[0.1, 0.1]).unwrap();
            assert!(lp.upsilon(1).dot(&out) - lp.threshold(1) > 0.0);
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64, f64)> {
        (
            proptest::collection::vec(-3.0..3.0f64, 8),
            proptest::collection::vec(-2.0..2.0f64, 8),
            0.01..5.0f64,
            0.01..2.0f64,
            0.01..4.0f64,
        )
            .prop_filter("nonzero direction", |(_, u, ..)| {
                u.iter().map(|x| x * x).sum::<f64>() > 1e-2
            })
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle_and_is_stationary((v, u, g, gamma, mu) in instance()) {
            let (v, u) = (dv(&v), dv(&u));
            let r = run(&v, &u, g, gamma, mu);
            let theta = prox_theta_1d(r.s, r.c, gamma * mu);
            prop_assert!((r.theta - theta).abs() <= 1e-8, "s={} c={} t={} θ={} oracle={}", r.s, r.c, gamma * mu, r.theta, theta);
            prop_assert!(r.margin() > 0.0 && r.theta > 0.0);
            prop_assert!(u.dot(&r.phi) - g > 0.0);
            // ∇[½‖x − v‖² − t ln(Υᵀx − g)] at Φ
            let grad = &r.phi - &v - &u * (gamma * mu / (u.dot(&r.phi) - g));
            prop_assert!(grad.norm() <= 1e-8 * (1.0 + v.norm()));
        }

        #[test]
        fn firmly_nonexpansive((v, u, g, gamma, mu) in instance(), w in proptest::collection::vec(-3.0..3.0f64, 8)) {
            let (v, u, w) = (dv(&v), dv(&u), dv(&w));
            let a = run(&v, &u, g, gamma, mu).phi;
            let b = run(&w, &u, g, gamma, mu).phi;
            let d = &a - &b;
            prop_assert!(d.norm() <= (&v - &w).norm() * (1.0 + 1e-12));
            prop_assert!(d.norm_squared() <= d.dot(&(&v - &w)) + 1e-12);
        }

        #[test]
        fn derivatives_match_finite_differences((v, u, g, gamma, mu) in instance()) {
            let (v, u) = (dv(&v), dv(&u));
            let r = run(&v, &u, g, gamma, mu);
            let h = 1e-6;
            let j = prox_jacobian_v(&r, &u, r.c);
            let mut fd = DMatrix::zeros(8, 8);
            for k in 0..8 {
                let col = central_diff(h, |e| {
                    let mut x = v.clone();
                    x[k] += e;
                    run(&x, &u, g, gamma, mu).phi
                });
                fd.set_column(k, &col);
            }
            prop_assert!((&j - &fd).amax() <= 1e-5 * fd.amax().max(1.0));
            let fmu = central_diff(h, |e| run(&v, &u, g, gamma, mu + e).phi);
            let gm = prox_grad_mu(&r, &u, gamma);
            prop_assert!((&gm - &fmu).amax() <= 1e-5 * fmu.amax().max(1e-8));
            let fg = central_diff(h, |e| run(&v, &u, g, gamma + e, mu).phi);
            let gg = prox_grad_gamma(&r, &u, mu);
            prop_assert!((&gg - &fg).amax() <= 1e-5 * fg.amax().max(1e-8));
            // symmetric with spectrum in [0, 1]
            let eig = j.clone().symmetric_eigenvalues();
            prop_assert!((&j - j.transpose()).amax() == 0.0);
            prop_assert!(eig.iter().all(|&l| (-1e-12..=1.0 + 1e-12).contains(&l)));
        }

        #[test]
        fn vjp_agrees_with_jacobian((v, u, g, gamma, mu) in instance(), xb in proptest::collection::vec(-1.0..1.0f64, 8)) {
            let (v, u, xb) = (dv(&v), dv(&u), dv(&xb));
            let r = run(&v, &u, g, gamma, mu);
            let (vb, tb) = prox_vjp(&r, &u, &xb);
            let j = prox_jacobian_v(&r, &u, r.c);
            prop_assert!((vb - j.transpose() * &xb).amax() <= 1e-12);
            // ∂Φ/∂t = Υ / r
            prop_assert!((tb - u.dot(&xb) / r.r).abs() <= 1e-12);
        }
    }
}
