//! Geometry of the strict-phase subspace `{x : Υ_iᵀ Ω x = 0 ∀i}` and the joint prox of the
//! K half-space barriers restricted to it.
//!
//! With `a_i = ΩᵀΥ_i`, the equality rows satisfy `AAᵀ = G = ΥΥᵀ`, so the orthogonal projector
//! onto the subspace is `P = I − AᵀG⁻¹A`. The joint prox
//!
//! ```text
//!     x* = argmin_{Ax = 0} ½‖x − w‖² − Σ_i t_i ln(Υ_iᵀx − g_i)
//! ```
//!
//! has the form `x* = Pw + Σ_i θ_i Υ̂_i` with `Υ̂_i = PΥ_i`, where `θ > 0` solves the
//! K-dimensional complementarity system `θ_i (s_i + (Mθ)_i) = t_i`, `s = Υ̂w − g`,
//! `M_ij = Υ̂_iᵀΥ̂_j`. For one user this is the closed-form prox applied after projection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_len, invalid, Error, Result};
use crate::model::{skew, skew_dot};

/// Stopping rule for the joint prox Newton iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointProxOptions {
    /// Relative tolerance on both the linear and the complementarity residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for JointProxOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointProxResult {
    pub x: DVector<f64>,
    pub theta: DVector<f64>,
    /// `Υ_iᵀx − g_i`.
    pub margins: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct PhaseSubspace {
    rows: Vec<DVector<f64>>,
    g: Vec<f64>,
    gram: Cholesky<f64, Dyn>,
    proj_rows: Vec<DVector<f64>>,
    m: DMatrix<f64>,
}

impl PhaseSubspace {
    pub fn new(rows: Vec<DVector<f64>>, g: Vec<f64>) -> Result<Self> {
        let k = rows.len();
        check_len("thresholds", k, g.len())?;
        if k == 0 {
            return Err(invalid("at least one constraint is required"));
        }
        let dim = rows[0].len();
        if k > dim {
            return Err(invalid(format!(
                "{k} equality rows do not fit in dimension {dim}"
            )));
        }
        let gram = DMatrix::from_fn(k, k, |i, j| rows[i].dot(&rows[j]));
        let gram = Cholesky::new(gram)
            .ok_or_else(|| Error::Numerical("channel Gram matrix is singular".into()))?;
        let mut sub = Self {
            rows,
            g,
            gram,
            proj_rows: Vec::new(),
            m: DMatrix::zeros(k, k),
        };
        sub.proj_rows = sub.rows.iter().map(|u| sub.project(u)).collect();
        sub.m = DMatrix::from_fn(k, k, |i, j| sub.proj_rows[i].dot(&sub.proj_rows[j]));
        Ok(sub)
    }

    pub fn users(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.g
    }

    /// `PΥ_i`.
    pub fn projected_rows(&self) -> &[DVector<f64>] {
        &self.proj_rows
    }

    /// `M = ΥPΥᵀ`.
    pub fn reduced_gram(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `A w` with rows `Υ_iᵀΩ`.
    pub fn equality_residuals(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.users(), self.rows.iter().map(|u| skew_dot(u, w)))
    }

    /// Orthogonal projection onto the strict-phase subspace.
    pub fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        let kappa = self.gram.solve(&self.equality_residuals(w));
        // Aᵀκ = −Ω Σ κ_i Υ_i
        let mut acc = DVector::zeros(w.len());
        for (u, &kk) in self.rows.iter().zip(kappa.iter()) {
            acc.axpy(kk, u, 1.0);
        }
        w + skew(&acc)
    }

    /// Dense projector `P`, for tests and diagnostics.
    pub fn projector(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut p = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            p.set_column(j, &self.project(&e));
        }
        p
    }

    /// Margins `Υ̂_iᵀw − g_i` of the projected point.
    fn projected_margins(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.users(),
            self.proj_rows
                .iter()
                .zip(&self.g)
                .map(|(u, g)| u.dot(w) - g),
        )
    }

    pub fn joint_prox(
        &self,
        w: &DVector<f64>,
        t: &[f64],
        warm: Option<&DVector<f64>>,
        opts: &JointProxOptions,
    ) -> JointProxResult {
        let k = self.users();
        let s = self.projected_margins(w);
        let m_mat = &self.m;
        let mut theta = match warm {
            Some(th) => th.map(|x| x.max(1e-300)),
            None => DVector::from_fn(k, |i, _| (t[i] / m_mat[(i, i)].max(1e-300)).sqrt()),
        };
        let lin = &s + m_mat * &theta;
        let mut m = DVector::from_fn(k, |i, _| lin[i].max(t[i] / theta[i]));
        let s_scale = 1.0 + s.amax();
        let mut converged = false;
        let mut iterations = 0;
        let mut jac = DMatrix::zeros(k, k);
        for it in 0..=opts.max_iter {
            let rp = &m - &s - m_mat * &theta;
            let rc = theta.component_mul(&m) - DVector::from_column_slice(t);
            let rc_rel = rc
                .iter()
                .zip(t)
                .map(|(r, ti)| (r / ti).abs())
                .fold(0.0, f64::max);
            if rp.amax() <= opts.tol * s_scale && rc_rel <= opts.tol {
                converged = true;
                iterations = it;
                break;
            }
            if it == opts.max_iter {
                iterations = it;
                break;
            }
            for i in 0..k {
                for j in 0..k {
                    jac[(i, j)] = theta[i] * m_mat[(i, j)];
                }
                jac[(i, i)] += m[i];
            }
            let rhs = -rc + theta.component_mul(&rp);
            let Some(dth) = jac.clone().lu().solve(&rhs) else {
                iterations = it;
                break;
            };
            let dm = m_mat * &dth - &rp;
            let mut alpha: f64 = 1.0;
            for i in 0..k {
                if dth[i] < 0.0 {
                    alpha = alpha.min(-0.99 * theta[i] / dth[i]);
                }
                if dm[i] < 0.0 {
                    alpha = alpha.min(-0.99 * m[i] / dm[i]);
                }
            }
            theta.axpy(alpha, &dth, 1.0);
            m.axpy(alpha, &dm, 1.0);
            if !theta.iter().chain(m.iter()).all(|x| x.is_finite()) {
                iterations = it + 1;
                break;
            }
        }
        let margins = &s + m_mat * &theta;
        if margins.iter().any(|&x| !(x > 0.0)) {
            converged = false;
        }
        let mut x = self.project(w);
        for (u, &th) in self.proj_rows.iter().zip(theta.iter()) {
            x.axpy(th, u, 1.0);
        }
        JointProxResult {
            x,
            theta,
            margins,
            iterations,
            converged,
        }
    }

    fn kkt_matrix(&self, res: &JointProxResult) -> DMatrix<f64> {
        let k = self.users();
        DMatrix::from_fn(k, k, |i, j| {
            res.theta[i] * self.m[(i, j)] + if i == j { res.margins[i] } else { 0.0 }
        })
    }

    /// Pulls `x̄ = ∂ℓ/∂x*` back to `(∂ℓ/∂w, ∂ℓ/∂t)` by implicit differentiation of the
    /// complementarity system at the computed solution.
    pub fn joint_prox_vjp(
        &self,
        res: &JointProxResult,
        xbar: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let k = self.users();
        let theta_bar = DVector::from_iterator(k, self.proj_rows.iter().map(|u| u.dot(xbar)));
        let y = self
            .kkt_matrix(res)
            .transpose()
            .lu()
            .solve(&theta_bar)
            .ok_or_else(|| Error::Numerical("joint prox system is singular".into()))?;
        let mut wbar = self.project(xbar);
        for i in 0..k {
            wbar.axpy(-res.theta[i] * y[i], &self.proj_rows[i], 1.0);
        }
        Ok((wbar, y))
    }

    /// Dense Jacobians `(∂x*/∂w, ∂x*/∂t)`.
    pub fn joint_prox_jacobians(
        &self,
        res: &JointProxResult,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = self.users();
        let d = self.dim();
        let jinv = self
            .kkt_matrix(res)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("joint prox system is singular".into()))?;
        let uhat = DMatrix::from_fn(k, d, |i, j| self.proj_rows[i][j]);
        let dt = uhat.transpose() * &jinv;
        let theta_diag = DMatrix::from_diagonal(&res.theta);
        let dw = self.projector() - &dt * theta_diag * &uhat;
        Ok((dw, dt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{draw_channels, rotate_and_lift, PskSymbols};
    use crate::oracles::{central_diff, prox_theta_1d};
    use crate::prox::{prox_barrier, ProxInputs};
    use proptest::prelude::*;

    fn subspace(k: usize, n: usize, seed: u64) -> PhaseSubspace {
        let ch = draw_channels(k, n, seed).unwrap();
        let idx: Vec<u32> = (0..k as u32).map(|i| (i * 3 + seed as u32) % 4).collect();
        let sym = PskSymbols::from_indices(4, &idx).unwrap();
        let lp = rotate_and_lift(&ch, &sym, &vec![2.0; k], 1.0).unwrap();
        PhaseSubspace::new(lp.rows().to_vec(), lp.thresholds().to_vec()).unwrap()
    }

    #[test]
    fn projector_is_orthogonal_onto_the_null_space() {
        let sp = subspace(3, 4, 1);
        let p = sp.projector();
        assert!((&p * &p - &p).amax() < 1e-12);
        assert!((&p - p.transpose()).amax() < 1e-12);
        assert!((p.trace() - 5.0).abs() < 1e-12);
        let w = DVector::from_fn(8, |i, _| (i as f64).sin());
        assert!(sp.equality_residuals(&sp.project(&w)).amax() < 1e-12);
    }

    #[test]
    fn reduced_gram_identity() {
        // M = G + S G⁻¹ S with S_ij = Υ_iᵀΩΥ_j
        let sp = subspace(3, 3, 4);
        let k = 3;
        let g = DMatrix::from_fn(k, k, |i, j| sp.rows[i].dot(&sp.rows[j]));
        let s = DMatrix::from_fn(k, k, |i, j| skew_dot(&sp.rows[i], &sp.rows[j]));
        let m = &g + &s * g.clone().try_inverse().unwrap() * &s;
        assert!((m - sp.reduced_gram()).amax() < 1e-10);
    }

    #[test]
    fn single_user_matches_closed_form_after_projection() {
        let sp = subspace(1, 3, 2);
        let w = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.7);
        let res = sp.joint_prox(&w, &[0.4], None, &JointProxOptions::default());
        assert!(res.converged);
        let z = sp.project(&w);
        let closed = prox_barrier(ProxInputs {
            v1: &z,
            upsilon: &sp.projected_rows()[0],
            threshold: sp.thresholds()[0],
            gamma: 0.4,
            mu: 1.0,
        })
        .unwrap();
        assert!((res.x - closed.phi).amax() < 1e-12);
        let s = sp.projected_rows()[0].dot(&z) - sp.thresholds()[0];
        assert!((res.theta[0] - prox_theta_1d(s, sp.reduced_gram()[(0, 0)], 0.4)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_geometry_is_reported() {
        // K = 2N with generic channels leaves only x = 0 in the subspace
        let sp = subspace(4, 2, 3);
        let res = sp.joint_prox(
            &DVector::zeros(4),
            &[0.1; 4],
            None,
            &JointProxOptions::default(),
        );
        assert!(!res.converged);
    }

    fn case() -> impl Strategy<Value = (usize, u64, Vec<f64>, Vec<f64>)> {
        (
            1usize..=4,
            any::<u64>(),
            proptest::collection::vec(-2.0..2.0f64, 8),
            proptest::collection::vec(0.01..1.0f64, 4),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn solution_is_a_stationary_point((k, seed, w, t) in case()) {
            let sp = subspace(k, 4, seed);
            let w = DVector::from_vec(w);
            let t = &t[..k];
            let res = sp.joint_prox(&w, t, None, &JointProxOptions::default());
            prop_assert!(res.converged);
            prop_assert!(res.margins.iter().all(|&m| m > 0.0));
            prop_assert!(sp.equality_residuals(&res.x).amax() <= 1e-10 * (1.0 + w.norm()));
            // no feasible perturbation inside the subspace lowers the prox objective
            let obj = |x: &DVector<f64>| {
                let mut f = 0.5 * (x - &w).norm_squared();
                for ((u, &g), &ti) in sp.rows().iter().zip(sp.thresholds()).zip(t) {
                    let m = u.dot(x) - g;
                    if m <= 0.0 {
                        return f64::INFINITY;
                    }
                    f -= ti * m.ln();
                }
                f
            };
            let f0 = obj(&res.x);
            let step = 1e-3 * res.margins.min() / sp.rows().iter().map(|u| u.norm()).fold(0.0, f64::max);
            for j in 0..sp.dim() {
                let mut d = DVector::zeros(sp.dim());
                d[j] = step;
                let d = sp.project(&d);
                prop_assert!(obj(&(&res.x + &d)) >= f0 - 1e-12 * (1.0 + f0.abs()));
                prop_assert!(obj(&(&res.x - &d)) >= f0 - 1e-12 * (1.0 + f0.abs()));
            }
        }

        #[test]
        fn warm_start_reaches_the_same_point((k, seed, w, t) in case()) {
            let sp = subspace(k, 4, seed);
            let w = DVector::from_vec(w);
            let opts = JointProxOptions::default();
            let cold = sp.joint_prox(&w, &t[..k], None, &opts);
            let w2 = &w * 1.05;
            let warm = sp.joint_prox(&w2, &t[..k], Some(&cold.theta), &opts);
            let fresh = sp.joint_prox(&w2, &t[..k], None, &opts);
            prop_assert!((warm.x - fresh.x).amax() <= 1e-8 * (1.0 + w.norm()));
        }

        #[test]
        fn vjp_and_jacobians_match_finite_differences((k, seed, w, t) in case(), xb in proptest::collection::vec(-1.0..1.0f64, 8)) {
            let sp = subspace(k, 4, seed);
            let w = DVector::from_vec(w);
            let t = t[..k].to_vec();
            let opts = JointProxOptions { tol: 1e-13, max_iter: 200 };
            let res = sp.joint_prox(&w, &t, None, &opts);
            // finite differences are meaningless next to a near-active barrier
            prop_assume!(res.converged && res.margins.min() > 1e-3);
            let (jw, jt) = sp.joint_prox_jacobians(&res).unwrap();
            let h = 1e-6;
            for c in 0..8 {
                let fd = central_diff(h, |e| {
                    let mut x = w.clone();
                    x[c] += e;
                    sp.joint_prox(&x, &t, None, &opts).x
                });
                prop_assert!((jw.column(c) - &fd).amax() <= 1e-5 * (1.0 + fd.amax()));
            }
            for c in 0..k {
                let fd = central_diff(h * t[c], |e| {
                    let mut tt = t.clone();
                    tt[c] += e;
                    sp.joint_prox(&w, &tt, None, &opts).x
                });
                prop_assert!((jt.column(c) - &fd).amax() <= 1e-5 * (1.0 + fd.amax()));
            }
            let xb = DVector::from_vec(xb);
            let (wb, tb) = sp.joint_prox_vjp(&res, &xb).unwrap();
            prop_assert!((wb - jw.transpose() * &xb).amax() <= 1e-9 * (1.0 + jw.amax()));
            prop_assert!((tb - jt.transpose() * &xb).amax() <= 1e-9 * (1.0 + jt.amax()));
        }
    }
}
