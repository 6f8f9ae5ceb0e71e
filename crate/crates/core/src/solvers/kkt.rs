//! Exact strict-phase SLP solution by enumerating active sets.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{SolveReport, SolveStatus};
use crate::error::{invalid, Result};
use crate::model::{skew, LiftedProblem, RealPrecoder};

const MAX_USERS: usize = 12;

/// Power, precoder, `μ`, `λ`.
type Candidate = (f64, DVector<f64>, Vec<f64>, Vec<f64>);

/// For every subset `S` of inequalities (with `K + |S| ≤ 2N`), solves the least-norm
/// system `[A; Υ_S] v1 = [0; g_S]` and keeps the cheapest candidate that is primal
/// feasible with nonnegative multipliers. Ties go to the smaller active set.
pub fn kkt_oracle(lp: &LiftedProblem) -> Result<SolveReport> {
    let start = Instant::now();
    let k = lp.users();
    let d = lp.dim();
    if k > MAX_USERS {
        return Err(invalid(format!(
            "active-set enumeration is limited to {MAX_USERS} users, got {k}"
        )));
    }
    if k > d {
        return Err(invalid(format!(
            "{k} users exceed the lifted dimension {d}"
        )));
    }
    let eq_rows: Vec<DVector<f64>> = lp.rows().iter().map(|u| -skew(u)).collect();
    let g = lp.thresholds();
    let gscale = g.iter().cloned().fold(0.0, f64::max).max(1.0);

    let mut subsets: Vec<u32> = (0..1u32 << k)
        .filter(|s| k + s.count_ones() as usize <= d)
        .collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));

    let mut best: Option<Candidate> = None;
    for &set in &subsets {
        let active: Vec<usize> = (0..k).filter(|i| set >> i & 1 == 1).collect();
        let rows: Vec<&DVector<f64>> = eq_rows
            .iter()
            .chain(active.iter().map(|&i| lp.upsilon(i)))
            .collect();
        let m = rows.len();
        let c = DMatrix::from_fn(m, d, |r, j| rows[r][j]);
        let rhs = DVector::from_fn(m, |r, _| if r < k { 0.0 } else { g[active[r - k]] });
        let Some(chol) = (&c * c.transpose()).cholesky() else {
            continue;
        };
        let nu = chol.solve(&rhs) * 2.0;
        let v = c.tr_mul(&nu) * 0.5;
        let vscale = v.amax().max(1.0);
        // multipliers: 2v = Cᵀν with ν = [−λ; μ_S]
        let mut mu = vec![0.0; k];
        for (slot, &i) in active.iter().enumerate() {
            mu[i] = nu[k + slot];
        }
        if mu.iter().any(|&x| x < -1e-9 * vscale) {
            continue;
        }
        let feasible = (0..k).all(|i| lp.upsilon(i).dot(&v) - g[i] >= -1e-9 * gscale.max(vscale));
        if !feasible {
            continue;
        }
        let power = v.norm_squared();
        let better = best
            .as_ref()
            .is_none_or(|(p, ..)| power < p * (1.0 - 1e-12));
        if better {
            let lambda: Vec<f64> = (0..k).map(|i| -nu[i]).collect();
            best = Some((
                power,
                v,
                mu.into_iter().map(|x| x.max(0.0)).collect(),
                lambda,
            ));
        }
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(match best {
        Some((power, v, duals_mu, duals_lambda)) => SolveReport {
            v1: RealPrecoder::new(v)?,
            power,
            duals_mu,
            duals_lambda,
            status: SolveStatus::Optimal,
            iterations: subsets.len(),
            wall_time: wall,
        },
        None => SolveReport::infeasible(d, k, subsets.len(), wall),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{db_to_linear, draw_channels, rotate_and_lift, PskSymbols};
    use crate::solvers::{check_feasibility, dual_to_primal, stationarity_residual};

    #[test]
    fn single_user_closed_form() {
        let lp =
            LiftedProblem::new(vec![DVector::from_vec(vec![1.0, 0.0])], vec![10.0], 1.0).unwrap();
        let rep = kkt_oracle(&lp).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert!((rep.power - 10.0).abs() < 1e-12);
        assert!((rep.duals_mu[0] - 2.0 * 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn oracle_duals_reproduce_the_primal() {
        for seed in 0..30 {
            let ch = draw_channels(3, 4, seed).unwrap();
            let sym = PskSymbols::from_indices(4, &[(seed % 4) as u32, 1, 2]).unwrap();
            let lp =
                rotate_and_lift(&ch, &sym, &[db_to_linear(5.0 + seed as f64); 3], 1.0).unwrap();
            let rep = kkt_oracle(&lp).unwrap();
            assert_eq!(rep.status, SolveStatus::Optimal);
            let v = rep.v1.as_vector();
            assert!(check_feasibility(&lp, v, 1e-8 * v.amax().max(1.0)).feasible);
            let back = dual_to_primal(&rep.duals_mu, &rep.duals_lambda, &lp).unwrap();
            assert!((back.as_vector() - v).amax() <= 1e-9 * v.amax().max(1.0));
            assert!(
                stationarity_residual(&lp, v, &rep.duals_mu, &rep.duals_lambda)
                    <= 1e-8 * v.amax().max(1.0)
            );
        }
    }

    #[test]
    fn enumeration_bound() {
        let rows = (0..13)
            .map(|i| DVector::from_fn(26, |j, _| ((i * 31 + j) as f64).sin()))
            .collect();
        let lp = LiftedProblem::new(rows, vec![1.0; 13], 1.0).unwrap();
        assert!(kkt_oracle(&lp).is_err());
    }
}
