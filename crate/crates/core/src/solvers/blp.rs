//! Conventional block-level power minimization via uplink-downlink duality.
//!
//! The optimal downlink beams are the MMSE receivers of a virtual uplink with powers `q`,
//! where `q` is the fixed point of
//!
//! ```text
//!     q_i = Γ_i / ((1 + Γ_i) f_iᴴ (N0 I + Σ_k q_k f_k f_kᴴ)⁻¹ f_i),   f_i = conj(h_i).
//! ```
//!
//! Each iteration forms the MMSE directions for the current `q` and, when it has a positive
//! solution, solves the uplink power system that meets every target with equality for those
//! directions; otherwise it takes a plain fixed-point step. Both maps share the fixed point.
//! Downlink powers then come from the K×K system
//! `p_i |h_iᵀu_i|²/Γ_i − Σ_{k≠i} p_k |h_iᵀu_k|² = N0`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::SolveStatus;
use crate::error::{check_len, invalid, Result};
use crate::model::ChannelSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlpOptions {
    /// Relative change of `q` that ends the iteration.
    pub tol: f64,
    pub max_iter: usize,
    /// `Σq` beyond this multiple of the single-user powers counts as divergence.
    pub divergence: f64,
}

impl Default for BlpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            divergence: 1e10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlpReport {
    /// Per-user downlink precoders `√p_i u_i`.
    pub precoders: Vec<DVector<Complex64>>,
    pub power: f64,
    pub downlink_powers: Vec<f64>,
    pub uplink_powers: Vec<f64>,
    /// Achieved downlink SINR per user.
    pub sinr: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub wall_time: f64,
}

struct Beams {
    dirs: Vec<DVector<Complex64>>,
    /// `gains[(i, k)] = |h_iᵀ u_k|²`.
    gains: DMatrix<f64>,
    /// `f_iᴴ Σ⁻¹ f_i`.
    quad: Vec<f64>,
}

fn mmse_beams(h: &[DVector<Complex64>], q: &[f64], n0: f64) -> Option<Beams> {
    let n = h[0].len();
    let k = h.len();
    let f: Vec<DVector<Complex64>> = h.iter().map(|x| x.map(|z| z.conj())).collect();
    let mut sigma = DMatrix::<Complex64>::identity(n, n) * Complex64::from(n0);
    for (fi, &qi) in f.iter().zip(q) {
        sigma.ger(
            Complex64::from(qi),
            fi,
            &fi.map(|z| z.conj()),
            Complex64::from(1.0),
        );
    }
    let chol = sigma.cholesky()?;
    let mut dirs = Vec::with_capacity(k);
    let mut quad = Vec::with_capacity(k);
    for fi in &f {
        let d = chol.solve(fi);
        quad.push(fi.dotc(&d).re);
        let nrm = d.norm();
        if !(nrm > 0.0 && nrm.is_finite()) {
            return None;
        }
        dirs.push(d / Complex64::from(nrm));
    }
    let gains = DMatrix::from_fn(k, k, |i, j| h[i].dot(&dirs[j]).norm_sqr());
    Some(Beams { dirs, gains, quad })
}

/// Powers meeting all targets with equality for fixed directions; `transpose` selects the
/// uplink system. `None` when the system is singular or needs a non-positive power.
fn equal_sinr_powers(
    gains: &DMatrix<f64>,
    gamma: &[f64],
    n0: f64,
    transpose: bool,
) -> Option<DVector<f64>> {
    let k = gamma.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        let gij = if transpose {
            gains[(j, i)]
        } else {
            gains[(i, j)]
        };
        if i == j {
            gij / gamma[i]
        } else {
            -gij
        }
    });
    let p = a.lu().solve(&DVector::from_element(k, n0))?;
    p.iter().all(|&x| x > 0.0 && x.is_finite()).then_some(p)
}

pub fn solve_blp(ch: &ChannelSet, gamma: &[f64], n0: f64, opts: &BlpOptions) -> Result<BlpReport> {
    let start = Instant::now();
    let k = ch.users();
    check_len("SINR targets", k, gamma.len())?;
    if !(n0 > 0.0) || gamma.iter().any(|&g| !(g > 0.0)) {
        return Err(invalid("SINR targets and noise power must be positive"));
    }
    let h: Vec<DVector<Complex64>> = (0..k).map(|i| ch.channel(i)).collect();
    let single: f64 = h
        .iter()
        .zip(gamma)
        .map(|(hi, g)| g * n0 / hi.norm_squared())
        .sum();
    let limit = opts.divergence * single;

    let failed = |status, iterations| BlpReport {
        precoders: Vec::new(),
        power: f64::NAN,
        downlink_powers: Vec::new(),
        uplink_powers: Vec::new(),
        sinr: Vec::new(),
        status,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    };

    let mut q: Vec<f64> = gamma.iter().map(|g| g / n0).collect();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let Some(beams) = mmse_beams(&h, &q, n0) else {
            return Ok(failed(SolveStatus::Infeasible, it));
        };
        let next: Vec<f64> = match equal_sinr_powers(&beams.gains, gamma, n0, true) {
            Some(p) => p.iter().copied().collect(),
            None => (0..k)
                .map(|i| gamma[i] / ((1.0 + gamma[i]) * beams.quad[i]))
                .collect(),
        };
        let diff: f64 = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q = next;
        if q.iter().sum::<f64>() > limit || q.iter().any(|x| !x.is_finite()) {
            return Ok(failed(SolveStatus::Infeasible, it));
        }
        if diff <= opts.tol * norm {
            converged = true;
            break;
        }
    }
    if !converged {
        return Ok(failed(SolveStatus::MaxIter, iterations));
    }
    let Some(beams) = mmse_beams(&h, &q, n0) else {
        return Ok(failed(SolveStatus::Infeasible, iterations));
    };
    let Some(p) = equal_sinr_powers(&beams.gains, gamma, n0, false) else {
        return Ok(failed(SolveStatus::Infeasible, iterations));
    };
    let sinr = (0..k)
        .map(|i| {
            let interference: f64 = (0..k)
                .filter(|&j| j != i)
                .map(|j| p[j] * beams.gains[(i, j)])
                .sum();
            p[i] * beams.gains[(i, i)] / (interference + n0)
        })
        .collect();
    let precoders = beams
        .dirs
        .iter()
        .zip(p.iter())
        .map(|(u, &pi)| u * Complex64::from(pi.sqrt()))
        .collect();
    Ok(BlpReport {
        precoders,
        power: p.sum(),
        downlink_powers: p.iter().copied().collect(),
        uplink_powers: q,
        sinr,
        status: SolveStatus::Optimal,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
