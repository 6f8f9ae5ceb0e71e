//! Experiment drivers: SINR sweeps, per-sample timing and the invariant suite.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::error::{invalid, Result};
use crate::model::{
    db_to_linear, draw_channels, rotate_and_lift, skew_dot, LiftedProblem, PskSymbols,
    RotationConvention,
};
use crate::net::{
    grad_e, loss, loss_gradient, network_forward, NetConfig, NetProblem, NetworkParams,
    ProxComposition,
};
use crate::oracles::{central_diff, central_diff_scalar, prox_theta_1d, rel_err};
use crate::prox::{
    prox_barrier_with_root, prox_grad_gamma, prox_grad_mu, prox_jacobian_v, ProxInputs, ProxRoot,
};
use crate::solvers::{
    dual_to_primal, feasible_relative, kkt_oracle, solve_blp, solve_slp_strict, BlpOptions,
    SolveOptions, SolveStatus,
};
use crate::subspace::JointProxOptions;
use crate::train::{Predictor, FEASIBILITY_REL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Blp,
    SlpIpm,
    SlpSdnet,
    KktOracle,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Blp,
        Method::SlpIpm,
        Method::SlpSdnet,
        Method::KktOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Blp => "blp",
            Method::SlpIpm => "slp_ipm",
            Method::SlpSdnet => "slp_sdnet",
            Method::KktOracle => "kkt_oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown method `{s}` (expected blp, slp_ipm, slp_sdnet or kkt_oracle)")
            })
    }
}

/// One summary row of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sinr_db: f64,
    pub method: Method,
    /// Mean over solved samples; NaN when none was solved.
    pub mean_power: f64,
    pub p05_power: f64,
    pub p95_power: f64,
    pub feasibility_rate: f64,
    pub mean_time_us: f64,
    pub n_samples: usize,
}

/// One method on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sinr_db: f64,
    pub method: Method,
    pub sample: usize,
    pub seed: u64,
    /// The method returned a precoder meeting every target (within 1e−3 relative).
    pub solved: bool,
    /// Transmit power; NaN when not solved.
    pub power: f64,
    pub time_us: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub grid: Vec<f64>,
    pub methods: Vec<Method>,
    /// When false every time is reported as 0, making the output reproducible byte for byte.
    pub timing: bool,
    pub convention: RotationConvention,
    pub solve: SolveOptions,
    pub blp: BlpOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid: (0..=7).map(|i| 5.0 * i as f64).collect(),
            methods: vec![Method::Blp, Method::SlpIpm, Method::SlpSdnet],
            timing: true,
            convention: RotationConvention::Reference,
            solve: SolveOptions::default(),
            blp: BlpOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub summary: Vec<BenchRecord>,
    pub samples: Vec<SampleRow>,
}

/// Whether `method` solved `lp`, its power, and the elapsed seconds.
fn run_method(
    method: Method,
    rec: &DatasetRecord,
    lp: &LiftedProblem,
    predictor: Option<&Predictor>,
    opts: &EvalOptions,
) -> Result<(bool, f64, f64)> {
    let start = Instant::now();
    let (solved, power) = match method {
        Method::Blp => {
            let rep = solve_blp(&rec.channels()?, lp.gamma(), lp.noise_power(), &opts.blp)?;
            (rep.status == SolveStatus::Optimal, rep.power)
        }
        Method::SlpIpm => {
            let rep = solve_slp_strict(lp, &opts.solve)?;
            let ok = rep.status != SolveStatus::Infeasible
                && feasible_relative(lp, rep.v1.as_vector(), FEASIBILITY_REL);
            (ok, rep.power)
        }
        Method::KktOracle => {
            let rep = kkt_oracle(lp)?;
            (rep.status == SolveStatus::Optimal, rep.power)
        }
        Method::SlpSdnet => {
            let p = predictor.ok_or_else(|| invalid("slp_sdnet needs a checkpoint"))?;
            match p.predict(lp) {
                Ok(out) => {
                    let v = out.precoder.as_vector();
                    (feasible_relative(lp, v, FEASIBILITY_REL), v.norm_squared())
                }
                Err(crate::Error::InvalidInput(m)) => return Err(invalid(m)),
                Err(_) => (false, f64::NAN),
            }
        }
    };
    let secs = start.elapsed().as_secs_f64();
    Ok((solved, if solved { power } else { f64::NAN }, secs))
}

/// Runs every method at every grid SINR, overriding each record's targets with the grid value.
pub fn evaluate(
    records: &[DatasetRecord],
    predictor: Option<&Predictor>,
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    if records.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    if opts.methods.contains(&Method::SlpSdnet) && predictor.is_none() {
        return Err(invalid("slp_sdnet needs a checkpoint"));
    }
    let mut samples = Vec::with_capacity(records.len() * opts.grid.len() * opts.methods.len());
    for &db in &opts.grid {
        let per_record: Vec<Vec<SampleRow>> = records
            .par_iter()
            .enumerate()
            .map(|(idx, rec)| -> Result<Vec<SampleRow>> {
                let lp = rec.lift_at(db, opts.convention)?;
                opts.methods
                    .iter()
                    .map(|&m| {
                        let (solved, power, secs) = run_method(m, rec, &lp, predictor, opts)?;
                        Ok(SampleRow {
                            sinr_db: db,
                            method: m,
                            sample: idx,
                            seed: rec.seed,
                            solved,
                            power,
                            time_us: if opts.timing { secs * 1e6 } else { 0.0 },
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        // group by method within each grid point
        for &m in &opts.methods {
            samples.extend(
                per_record
                    .iter()
                    .flatten()
                    .filter(|r| r.method == m)
                    .cloned(),
            );
        }
    }
    Ok(EvalOutput {
        summary: aggregate(&samples),
        samples,
    })
}

/// Linear-interpolation percentile of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary rows per `(sinr_db, method)`, in order of first appearance.
pub fn aggregate(rows: &[SampleRow]) -> Vec<BenchRecord> {
    let mut keys: Vec<(f64, Method)> = Vec::new();
    for r in rows {
        if !keys
            .iter()
            .any(|&(d, m)| d.to_bits() == r.sinr_db.to_bits() && m == r.method)
        {
            keys.push((r.sinr_db, r.method));
        }
    }
    keys.into_iter()
        .map(|(db, m)| {
            let group: Vec<&SampleRow> = rows
                .iter()
                .filter(|r| r.sinr_db.to_bits() == db.to_bits() && r.method == m)
                .collect();
            let n = group.len();
            let mut powers: Vec<f64> = group.iter().filter(|r| r.solved).map(|r| r.power).collect();
            powers.sort_by(f64::total_cmp);
            let mean_power = if powers.is_empty() {
                f64::NAN
            } else {
                powers.iter().sum::<f64>() / powers.len() as f64
            };
            BenchRecord {
                sinr_db: db,
                method: m,
                mean_power,
                p05_power: percentile(&powers, 0.05),
                p95_power: percentile(&powers, 0.95),
                feasibility_rate: powers.len() as f64 / n as f64,
                mean_time_us: group.iter().map(|r| r.time_us).sum::<f64>() / n as f64,
                n_samples: n,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "sinr_db,method,mean_power,p05_power,p95_power,feasibility_rate,mean_time_us,n_samples";

pub fn write_csv<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRecord {
    pub method: Method,
    pub mean_time_us: f64,
    pub p95_time_us: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
pub struct BenchTimeOptions {
    pub methods: Vec<Method>,
    /// Untimed solves before measurement, cycling through the samples.
    pub warmup: usize,
    /// Common target for every user; the stored targets when `None`.
    pub sinr_db: Option<f64>,
    /// Time only the first sample.
    pub single: bool,
    pub solve: SolveOptions,
    pub blp: BlpOptions,
}

impl Default for BenchTimeOptions {
    fn default() -> Self {
        Self {
            methods: vec![Method::SlpIpm, Method::SlpSdnet],
            warmup: 50,
            sinr_db: None,
            single: false,
            solve: SolveOptions::default(),
            blp: BlpOptions::default(),
        }
    }
}

/// Per-sample wall time of each method on the calling thread.
pub fn bench_time(
    records: &[DatasetRecord],
    predictor: Option<&Predictor>,
    opts: &BenchTimeOptions,
) -> Result<Vec<TimeRecord>> {
    if records.is_empty() {
        return Err(invalid("timing set is empty"));
    }
    let used = if opts.single { &records[..1] } else { records };
    let problems: Vec<LiftedProblem> = used
        .iter()
        .map(|r| match opts.sinr_db {
            Some(db) => r.lift_at(db, RotationConvention::Reference),
            None => r.lift(RotationConvention::Reference),
        })
        .collect::<Result<_>>()?;
    let eval_opts = EvalOptions {
        solve: opts.solve,
        blp: opts.blp,
        ..EvalOptions::default()
    };
    let mut out = Vec::with_capacity(opts.methods.len());
    for &m in &opts.methods {
        if m == Method::SlpSdnet && predictor.is_none() {
            return Err(invalid("slp_sdnet needs a checkpoint"));
        }
        for i in 0..opts.warmup {
            let j = i % problems.len();
            run_method(m, &used[j], &problems[j], predictor, &eval_opts)?;
        }
        let mut times: Vec<f64> = used
            .iter()
            .zip(&problems)
            .map(|(r, lp)| run_method(m, r, lp, predictor, &eval_opts).map(|t| t.2 * 1e6))
            .collect::<Result<_>>()?;
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        out.push(TimeRecord {
            method: m,
            mean_time_us: mean,
            p95_time_us: percentile(&times, 0.95),
            n_samples: times.len(),
        });
    }
    Ok(out)
}

/// Outcome of one validation check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    /// Worst observed error, compared against `tol`.
    pub worst: f64,
    pub tol: f64,
    pub cases: usize,
    pub detail: String,
    pub seconds: f64,
}

pub const GROUPS: [&str; 4] = ["prox", "jacobian", "solver", "duality"];

struct ProxCase {
    v: DVector<f64>,
    u: DVector<f64>,
    g: f64,
    gamma: f64,
    mu: f64,
}

fn prox_case(rng: &mut ChaCha8Rng) -> ProxCase {
    let d = 2 * rng.random_range(1..=4usize);
    let mut normal = |s: f64| DVector::from_fn(d, |_, _| s * rng.sample::<f64, _>(StandardNormal));
    let v = normal(2.0);
    let u = normal(1.0);
    ProxCase {
        v,
        u,
        g: rng.random_range(0.1..3.0),
        gamma: 10f64.powf(rng.random_range(-3.0..1.0)),
        mu: 10f64.powf(rng.random_range(-3.0..1.0)),
    }
}

fn timed(
    group: &'static str,
    name: &str,
    tol: f64,
    f: impl FnOnce() -> (f64, usize, String),
) -> CheckResult {
    let start = Instant::now();
    let (worst, cases, detail) = f();
    CheckResult {
        group,
        name: name.to_string(),
        passed: worst <= tol,
        worst,
        tol,
        cases,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Closed-form prox against a 1-D numerical minimizer; infeasible outputs count as infinite error.
pub fn check_prox_oracle(count: usize, seed: u64, root: ProxRoot) -> CheckResult {
    let name = match root {
        ProxRoot::Stationary => "prox_matches_line_search",
        ProxRoot::Printed => "printed_root_matches_line_search",
    };
    timed("prox", name, 1e-8, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut infeasible = 0;
        for _ in 0..count {
            let c = prox_case(&mut rng);
            let Ok(res) = prox_barrier_with_root(
                ProxInputs {
                    v1: &c.v,
                    upsilon: &c.u,
                    threshold: c.g,
                    gamma: c.gamma,
                    mu: c.mu,
                },
                root,
            ) else {
                worst = f64::INFINITY;
                continue;
            };
            let s = c.u.dot(&c.v) - c.g;
            let theta = prox_theta_1d(s, c.u.norm_squared(), c.gamma * c.mu);
            worst = worst.max((res.theta - theta).abs());
            if !(c.u.dot(&res.phi) - c.g > 0.0) {
                infeasible += 1;
                worst = f64::INFINITY;
            }
        }
        (
            worst,
            count,
            format!("max |Δθ|, {infeasible} infeasible outputs"),
        )
    })
}

/// The printed root must be caught by the oracle check.
pub fn check_mutation_detected(count: usize, seed: u64) -> CheckResult {
    let inner = check_prox_oracle(count, seed, ProxRoot::Printed);
    CheckResult {
        group: "prox",
        name: "printed_root_is_rejected".into(),
        passed: !inner.passed,
        worst: if inner.passed { 1.0 } else { 0.0 },
        tol: 0.0,
        cases: count,
        detail: format!("printed root error {:.3e}", inner.worst),
        seconds: inner.seconds,
    }
}

/// `∂Φ/∂v`, `∂Φ/∂μ`, `∂Φ/∂γ` against central differences.
pub fn check_prox_derivatives(count: usize, seed: u64) -> CheckResult {
    timed(
        "jacobian",
        "prox_derivatives_match_finite_differences",
        1e-4,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for _ in 0..count {
                let c = prox_case(&mut rng);
                let prox = |v: &DVector<f64>, gamma: f64, mu: f64| {
                    prox_barrier_with_root(
                        ProxInputs {
                            v1: v,
                            upsilon: &c.u,
                            threshold: c.g,
                            gamma,
                            mu,
                        },
                        ProxRoot::Stationary,
                    )
                    .expect("valid prox inputs")
                };
                let res = prox(&c.v, c.gamma, c.mu);
                let jac = prox_jacobian_v(&res, &c.u, res.c);
                for j in 0..c.v.len() {
                    let fd = central_diff(h, |e| {
                        let mut v = c.v.clone();
                        v[j] += e;
                        prox(&v, c.gamma, c.mu).phi
                    });
                    let col: Vec<f64> = jac.column(j).iter().copied().collect();
                    worst = worst.max(rel_err(&col, fd.as_slice(), 1e-8));
                }
                // relative steps keep the perturbed weights positive
                let fd_mu = central_diff(h * c.mu, |e| prox(&c.v, c.gamma, c.mu + e).phi);
                let fd_gamma = central_diff(h * c.gamma, |e| prox(&c.v, c.gamma + e, c.mu).phi);
                let gm = prox_grad_mu(&res, &c.u, c.gamma);
                let gg = prox_grad_gamma(&res, &c.u, c.mu);
                worst = worst.max(rel_err(gm.as_slice(), fd_mu.as_slice(), 1e-8));
                worst = worst.max(rel_err(gg.as_slice(), fd_gamma.as_slice(), 1e-8));
            }
            (worst, count, "max norm-wise relative error".into())
        },
    )
}

pub fn check_grad_e(count: usize, seed: u64) -> CheckResult {
    timed(
        "jacobian",
        "grad_e_matches_finite_differences",
        1e-4,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for i in 0..count {
                let n = rng.random_range(1..=4usize);
                let k = rng.random_range(1..=n);
                let lp = random_problem(&mut rng, k, n, 10.0, seed ^ i as u64);
                let v = DVector::from_fn(2 * n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let lambda: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
                let e = |x: &DVector<f64>| {
                    x.norm_squared()
                        + (0..k)
                            .map(|i| lambda[i] * skew_dot(lp.upsilon(i), x))
                            .sum::<f64>()
                };
                let g = grad_e(&v, &lambda, &lp).expect("shapes match");
                let fd: Vec<f64> = (0..2 * n)
                    .map(|j| {
                        central_diff_scalar(1e-5, |h| {
                            let mut x = v.clone();
                            x[j] += h;
                            e(&x)
                        })
                    })
                    .collect();
                worst = worst.max(rel_err(g.as_slice(), &fd, 1e-8));
            }
            (worst, count, "max norm-wise relative error".into())
        },
    )
}

fn random_problem(rng: &mut ChaCha8Rng, k: usize, n: usize, db: f64, seed: u64) -> LiftedProblem {
    let ch = draw_channels(k, n, seed).expect("positive sizes");
    let sym = PskSymbols::random(4, k, rng).expect("valid order");
    rotate_and_lift(&ch, &sym, &vec![db_to_linear(db); k], 1.0).expect("consistent shapes")
}

/// Full reverse pass of the network against central differences of the batch loss, on
/// `L ∈ {1, 3}`, `K ∈ {1, 2}`, `N = 2` and both prox compositions.
pub fn check_network_backward(seed: u64) -> CheckResult {
    timed(
        "jacobian",
        "network_backward_matches_finite_differences",
        1e-4,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            let mut cases = 0;
            let mut notes = Vec::new();
            for composition in [ProxComposition::Joint, ProxComposition::Sequential] {
                for l in [1usize, 3] {
                    for k in [1usize, 2] {
                        let lp = random_problem(&mut rng, k, 2, 8.0, seed + (l * 10 + k) as u64);
                        let np = NetProblem::new(&lp).expect("generic channel");
                        let mut params =
                            NetworkParams::init(l, k, 2, false, seed ^ (l * 7 + k) as u64)
                                .expect("sizes");
                        let base: Vec<f64> = params
                            .to_flat()
                            .iter()
                            .map(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        params.set_flat(&base).expect("same length");
                        let cfg = NetConfig {
                            composition,
                            inner: JointProxOptions {
                                tol: 1e-14,
                                max_iter: 200,
                            },
                        };
                        let eval = |p: &NetworkParams| -> f64 {
                            let tape = network_forward(&np, p, &cfg).expect("forward");
                            loss(&[(&np, &tape)], p, 1e-3).expect("loss").total
                        };
                        let tape = network_forward(&np, &params, &cfg).expect("forward");
                        let g =
                            loss_gradient(&[(&np, &tape)], &params, &cfg, 1e-3).expect("backward");
                        let fd: Vec<f64> = (0..params.len())
                            .map(|j| {
                                central_diff_scalar(1e-5, |h| {
                                    let mut p = params.clone();
                                    let mut f = base.clone();
                                    f[j] += h;
                                    p.set_flat(&f).expect("same length");
                                    eval(&p)
                                })
                            })
                            .collect();
                        let err = rel_err(&g, &fd, 1e-8);
                        notes.push(format!("{composition:?} L={l} K={k}: {err:.1e}"));
                        worst = worst.max(err);
                        cases += 1;
                    }
                }
            }
            (worst, cases, notes.join("; "))
        },
    )
}

/// Random strict-phase instance with `N ≤ 4`, `K ≤ min(4, 2N − 1)`, `Γ ∈ [0, 35]` dB.
pub fn solver_instance(seed: u64) -> LiftedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4usize);
    let k = rng.random_range(1..=4.min(2 * n - 1).max(1));
    let ch = draw_channels(k, n, seed.wrapping_mul(7919)).expect("positive sizes");
    let sym = PskSymbols::random(4, k, &mut rng).expect("valid order");
    let gamma: Vec<f64> = (0..k)
        .map(|_| db_to_linear(rng.random_range(0.0..35.0)))
        .collect();
    rotate_and_lift(&ch, &sym, &gamma, 1.0).expect("consistent shapes")
}

/// Interior-point powers against the active-set oracle; a status mismatch counts as infinite error.
pub fn check_solver_vs_oracle(count: usize, seed: u64) -> CheckResult {
    timed(
        "solver",
        "interior_point_matches_active_set_oracle",
        1e-6,
        || {
            let mut worst: f64 = 0.0;
            let mut feasible = 0;
            let mut mismatched = 0;
            for i in 0..count as u64 {
                let lp = solver_instance(seed.wrapping_add(i));
                let (Ok(oracle), Ok(ipm)) = (
                    kkt_oracle(&lp),
                    solve_slp_strict(&lp, &SolveOptions::default()),
                ) else {
                    worst = f64::INFINITY;
                    continue;
                };
                if oracle.status != ipm.status {
                    mismatched += 1;
                    worst = f64::INFINITY;
                    continue;
                }
                if oracle.status == SolveStatus::Optimal {
                    feasible += 1;
                    worst = worst.max((ipm.power - oracle.power).abs() / oracle.power);
                }
            }
            (worst, count, format!("max relative power gap over {feasible} feasible, {mismatched} status mismatches"))
        },
    )
}

/// Oracle multipliers mapped back through the dual-to-primal map reproduce the oracle precoder.
pub fn check_dual_to_primal(count: usize, seed: u64) -> CheckResult {
    timed("duality", "oracle_duals_reproduce_primal", 1e-6, || {
        let mut worst: f64 = 0.0;
        for i in 0..count as u64 {
            let lp = solver_instance(seed.wrapping_add(i));
            let Ok(oracle) = kkt_oracle(&lp) else {
                worst = f64::INFINITY;
                continue;
            };
            if oracle.status != SolveStatus::Optimal {
                continue;
            }
            let v = oracle.v1.as_vector();
            match dual_to_primal(&oracle.duals_mu, &oracle.duals_lambda, &lp) {
                Ok(back) => worst = worst.max((back.as_vector() - v).amax() / v.amax().max(1.0)),
                Err(_) => worst = f64::INFINITY,
            }
        }
        (worst, count, "max relative deviation".into())
    })
}

/// Uplink and downlink BLP powers agree and every SINR target is met.
pub fn check_blp_duality(count: usize, seed: u64) -> CheckResult {
    timed("duality", "blp_uplink_downlink_powers_agree", 1e-6, || {
        let mut worst: f64 = 0.0;
        let mut solved = 0;
        for i in 0..count as u64 {
            let Ok(ch) = draw_channels(4, 4, seed.wrapping_add(i)) else {
                continue;
            };
            let gamma = vec![db_to_linear(15.0); 4];
            let Ok(rep) = solve_blp(&ch, &gamma, 1.0, &BlpOptions::default()) else {
                worst = f64::INFINITY;
                continue;
            };
            if rep.status != SolveStatus::Optimal {
                continue;
            }
            solved += 1;
            let up: f64 = rep.uplink_powers.iter().sum();
            worst = worst.max((up - rep.power).abs() / rep.power);
            for s in &rep.sinr {
                worst = worst.max((s - gamma[0]).abs() / gamma[0]);
            }
        }
        (
            worst,
            count,
            format!("max relative gap over {solved} solved"),
        )
    })
}

/// Runs the checks of the selected groups (all when `only` is empty).
pub fn run_validation(only: &[String], seed: u64) -> Result<Vec<CheckResult>> {
    for g in only {
        if !GROUPS.contains(&g.as_str()) {
            return Err(invalid(format!(
                "unknown check group `{g}` (expected one of {})",
                GROUPS.join(", ")
            )));
        }
    }
    let wants = |g: &str| only.is_empty() || only.iter().any(|o| o == g);
    let mut out = Vec::new();
    if wants("prox") {
        out.push(check_prox_oracle(1000, seed, ProxRoot::Stationary));
        out.push(check_mutation_detected(1000, seed));
    }
    if wants("jacobian") {
        out.push(check_prox_derivatives(200, seed));
        out.push(check_grad_e(100, seed));
        out.push(check_network_backward(seed));
    }
    if wants("solver") {
        out.push(check_solver_vs_oracle(200, seed));
    }
    if wants("duality") {
        out.push(check_dual_to_primal(200, seed));
        out.push(check_blp_duality(20, seed));
    }
    Ok(out)
}
