//! SLP-SDNet: an unrolled proximal interior-point iteration with learnable per-layer
//! step sizes and barrier weights.
//!
//! Every layer is a gradient step on `E(v, λ) = ‖v‖² + Σ λ_i Υ_iᵀΩv` followed by the prox
//! of the weighted barriers:
//!
//! ```text
//!     w = v − γ ∇E(v, λ) = (1 − 2γ) v + γ Σ λ_i ΩΥ_i,      v' = prox_{γμB}(w).
//! ```
//!
//! Read as a network, `w` is the affine pre-activation with weight `(1 − 2γ)I` and bias
//! `γΣλ_iΩΥ_i`, and the prox is the activation. Two activations are available: the joint
//! prox of all K barriers restricted to the strict-phase subspace (default), and index-order
//! composition of the single-barrier proxes.
//!
//! The network runs on a per-instance normalized copy of the problem (mean threshold 1,
//! mean row norm 1), so that one set of parameters serves every SINR. The initial point is
//! the dual-to-primal image of the head multipliers, optionally refined by a small dense
//! residual block.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::model::{skew, skew_dot, LiftedProblem, RealPrecoder};
use crate::prox::{prox_sweep, prox_vjp, ProxResult};
use crate::solvers::dual_to_primal_vec;
use crate::subspace::{JointProxOptions, JointProxResult, PhaseSubspace};

/// Hidden width of the refinement block.
pub const REFINEMENT_HIDDEN: usize = 32;

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// `∇E(v, λ) = 2v + Σ λ_i ΩᵀΥ_i`.
pub fn grad_e(v1: &DVector<f64>, lambda: &[f64], lp: &LiftedProblem) -> Result<DVector<f64>> {
    check_len("precoder", lp.dim(), v1.len())?;
    check_len("equality multipliers", lp.users(), lambda.len())?;
    Ok(grad_e_rows(v1, lambda, lp.rows()))
}

fn grad_e_rows(v1: &DVector<f64>, lambda: &[f64], rows: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(v1.len());
    for (u, &l) in rows.iter().zip(lambda) {
        acc.axpy(l, u, 1.0);
    }
    v1 * 2.0 - skew(&acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxComposition {
    /// Exact prox of the sum of barriers on the strict-phase subspace.
    #[default]
    Joint,
    /// Single-barrier proxes applied in ascending user order.
    Sequential,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NetConfig {
    pub composition: ProxComposition,
    pub inner: JointProxOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub raw_gamma: f64,
    pub raw_mu: Vec<f64>,
    pub raw_lambda: Vec<f64>,
}

impl LayerParams {
    pub fn gamma(&self) -> f64 {
        softplus(self.raw_gamma)
    }

    pub fn mu(&self) -> Vec<f64> {
        self.raw_mu.iter().map(|&x| softplus(x)).collect()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.raw_lambda.iter().map(|&x| softplus(x)).collect()
    }
}

/// Residual block `v ↦ v + W₂ tanh(W₁v + b₁) + b₂`; weights are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Refinement {
    fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = REFINEMENT_HIDDEN;
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 0.1 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let w1 = draw(h * dim, dim);
        let w2 = draw(dim * h, h);
        Self {
            hidden: h,
            w1,
            b1: vec![0.0; h],
            w2,
            b2: vec![0.0; dim],
        }
    }

    fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn w1(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.hidden, dim, &self.w1)
    }

    fn w2(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(dim, self.hidden, &self.w2)
    }
}

/// Flat layout: per layer `[raw_gamma, raw_mu.., raw_lambda..]`, then `head_mu_raw`,
/// `head_lambda_raw`, then the refinement block `w1, b1, w2, b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub head_mu_raw: Vec<f64>,
    pub head_lambda_raw: Vec<f64>,
    pub refinement: Option<Refinement>,
}

impl NetworkParams {
    /// Layers start at `raw = 0`; head multipliers are drawn `N(0, 0.1²)`.
    pub fn init(l: usize, k: usize, n: usize, refinement: bool, seed: u64) -> Result<Self> {
        if l == 0 || k == 0 || n == 0 {
            return Err(invalid(format!(
                "network needs L, K, N ≥ 1, got {l}, {k}, {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..l)
            .map(|_| LayerParams {
                raw_gamma: 0.0,
                raw_mu: vec![0.0; k],
                raw_lambda: vec![0.0; k],
            })
            .collect();
        let mut head = || -> Vec<f64> {
            (0..k)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let head_mu_raw = head();
        let head_lambda_raw = head();
        let refinement = refinement.then(|| Refinement::init(2 * n, &mut rng));
        Ok(Self {
            layers,
            head_mu_raw,
            head_lambda_raw,
            refinement,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn users(&self) -> usize {
        self.head_mu_raw.len()
    }

    pub fn len(&self) -> usize {
        let k = self.users();
        self.layers.len() * (1 + 2 * k)
            + 2 * k
            + self.refinement.as_ref().map_or(0, Refinement::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of the head block in the flat layout.
    pub fn head_offset(&self) -> usize {
        self.layers.len() * (1 + 2 * self.users())
    }

    pub fn head_mu(&self) -> Vec<f64> {
        self.head_mu_raw.iter().map(|&x| softplus(x)).collect()
    }

    pub fn head_lambda(&self) -> Vec<f64> {
        self.head_lambda_raw.iter().map(|&x| softplus(x)).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.push(l.raw_gamma);
            out.extend_from_slice(&l.raw_mu);
            out.extend_from_slice(&l.raw_lambda);
        }
        out.extend_from_slice(&self.head_mu_raw);
        out.extend_from_slice(&self.head_lambda_raw);
        if let Some(r) = &self.refinement {
            out.extend_from_slice(&r.w1);
            out.extend_from_slice(&r.b1);
            out.extend_from_slice(&r.w2);
            out.extend_from_slice(&r.b2);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.len(), flat.len())?;
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|x| *x = it.next().unwrap_or(0.0));
        for l in &mut self.layers {
            fill(std::slice::from_mut(&mut l.raw_gamma));
            fill(&mut l.raw_mu);
            fill(&mut l.raw_lambda);
        }
        fill(&mut self.head_mu_raw);
        fill(&mut self.head_lambda_raw);
        if let Some(r) = &mut self.refinement {
            fill(&mut r.w1);
            fill(&mut r.b1);
            fill(&mut r.w2);
            fill(&mut r.b2);
        }
        Ok(())
    }

    fn check_shape(&self, np: &NetProblem) -> Result<()> {
        let k = np.users();
        check_len("head multipliers", k, self.head_mu_raw.len())?;
        check_len("head multipliers", k, self.head_lambda_raw.len())?;
        for l in &self.layers {
            check_len("layer barrier weights", k, l.raw_mu.len())?;
            check_len("layer equality weights", k, l.raw_lambda.len())?;
        }
        if let Some(r) = &self.refinement {
            let d = np.dim();
            let h = r.hidden;
            if r.w1.len() != h * d || r.b1.len() != h || r.w2.len() != d * h || r.b2.len() != d {
                return Err(invalid(format!(
                    "refinement block does not match dimension {d} with hidden width {h}"
                )));
            }
        }
        Ok(())
    }
}

/// A problem instance in the network's normalized frame.
///
/// Rows are divided by their mean norm `ū` and thresholds by their mean `ḡ`; a normalized
/// precoder maps back as `v = (ḡ/ū) v̂`, which preserves feasibility exactly.
#[derive(Clone, Debug)]
pub struct NetProblem {
    lifted: LiftedProblem,
    subspace: PhaseSubspace,
    scale: f64,
}

impl NetProblem {
    pub fn new(lp: &LiftedProblem) -> Result<Self> {
        let k = lp.users() as f64;
        let gbar = lp.thresholds().iter().sum::<f64>() / k;
        let ubar = lp.rows().iter().map(|u| u.norm()).sum::<f64>() / k;
        if !(gbar > 0.0 && ubar > 0.0) {
            return Err(invalid("cannot normalize a problem with zero rows"));
        }
        let rows: Vec<DVector<f64>> = lp.rows().iter().map(|u| u / ubar).collect();
        let g: Vec<f64> = lp.thresholds().iter().map(|g| g / gbar).collect();
        // unit noise so that the thresholds are exactly √Γ̂
        let lifted = LiftedProblem::new(rows.clone(), g.iter().map(|x| x * x).collect(), 1.0)?;
        let subspace = PhaseSubspace::new(rows, g)?;
        Ok(Self {
            lifted,
            subspace,
            scale: gbar / ubar,
        })
    }

    pub fn lifted(&self) -> &LiftedProblem {
        &self.lifted
    }

    pub fn subspace(&self) -> &PhaseSubspace {
        &self.subspace
    }

    /// `ḡ/ū`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn users(&self) -> usize {
        self.lifted.users()
    }

    pub fn dim(&self) -> usize {
        self.lifted.dim()
    }

    pub fn to_original(&self, v: &DVector<f64>) -> DVector<f64> {
        v * self.scale
    }

    fn threshold(&self, i: usize) -> f64 {
        self.subspace.thresholds()[i]
    }

    fn row(&self, i: usize) -> &DVector<f64> {
        &self.subspace.rows()[i]
    }
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Joint(JointProxResult),
    Sequential(Vec<ProxResult>),
}

#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub input: DVector<f64>,
    /// Pre-activation `w = v − γ∇E(v, λ)`.
    pub step: DVector<f64>,
    pub cache: LayerCache,
    pub output: DVector<f64>,
}

impl LayerRecord {
    /// Whether the activation was solved to tolerance.
    pub fn converged(&self) -> bool {
        match &self.cache {
            LayerCache::Joint(res) => res.converged,
            LayerCache::Sequential(_) => true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// Dual-to-primal image of the head multipliers.
    pub v_head: DVector<f64>,
    /// Refinement pre-activation and hidden state, when the block is enabled.
    pub hidden: Option<(DVector<f64>, DVector<f64>)>,
    /// Input of the first layer.
    pub v0: DVector<f64>,
    pub layers: Vec<LayerRecord>,
    /// Normalized output.
    pub v_final: DVector<f64>,
}

impl ForwardTape {
    pub fn converged(&self) -> bool {
        self.layers.iter().all(LayerRecord::converged)
    }

    /// Output precoder in the original frame.
    pub fn precoder(&self, np: &NetProblem) -> Result<RealPrecoder> {
        RealPrecoder::new(np.to_original(&self.v_final))
    }
}

/// The affine part of a layer, `(1 − 2γ)v + γΣλ_iΩΥ_i`.
pub fn layer_pre_activation(v: &DVector<f64>, np: &NetProblem, p: &LayerParams) -> DVector<f64> {
    let gamma = p.gamma();
    v - grad_e_rows(v, &p.lambda(), np.subspace.rows()) * gamma
}

pub fn layer_forward(
    v: &DVector<f64>,
    np: &NetProblem,
    p: &LayerParams,
    cfg: &NetConfig,
) -> Result<LayerRecord> {
    check_len("layer input", np.dim(), v.len())?;
    let gamma = p.gamma();
    let mu = p.mu();
    let w = layer_pre_activation(v, np, p);
    let (output, cache) = match cfg.composition {
        ProxComposition::Joint => {
            let t: Vec<f64> = mu.iter().map(|m| gamma * m).collect();
            let res = np.subspace.joint_prox(&w, &t, None, &cfg.inner);
            (res.x.clone(), LayerCache::Joint(res))
        }
        ProxComposition::Sequential => {
            let (x, res) = prox_sweep(&w, &np.lifted, gamma, &mu)?;
            (x, LayerCache::Sequential(res))
        }
    };
    if !output.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical("layer output is not finite".into()));
    }
    Ok(LayerRecord {
        input: v.clone(),
        step: w,
        cache,
        output,
    })
}

fn head_point(np: &NetProblem, params: &NetworkParams) -> DVector<f64> {
    dual_to_primal_vec(&params.head_mu(), &params.head_lambda(), np.subspace.rows())
}

/// Runs all layers from the head's initial point.
pub fn network_forward(
    np: &NetProblem,
    params: &NetworkParams,
    cfg: &NetConfig,
) -> Result<ForwardTape> {
    params.check_shape(np)?;
    let v_head = head_point(np, params);
    let (v0, hidden) = match &params.refinement {
        Some(r) => {
            let d = np.dim();
            let z = r.w1(d) * &v_head + DVector::from_column_slice(&r.b1);
            let h = z.map(f64::tanh);
            let v0 = &v_head + r.w2(d) * &h + DVector::from_column_slice(&r.b2);
            (v0, Some((z, h)))
        }
        None => (v_head.clone(), None),
    };
    network_forward_from(np, params, cfg, v_head, hidden, v0)
}

/// Runs all layers from a given initial point; the head is bypassed.
pub fn network_forward_from_point(
    np: &NetProblem,
    params: &NetworkParams,
    cfg: &NetConfig,
    v0: &DVector<f64>,
) -> Result<ForwardTape> {
    params.check_shape(np)?;
    check_len("initial precoder", np.dim(), v0.len())?;
    network_forward_from(np, params, cfg, v0.clone(), None, v0.clone())
}

fn network_forward_from(
    np: &NetProblem,
    params: &NetworkParams,
    cfg: &NetConfig,
    v_head: DVector<f64>,
    hidden: Option<(DVector<f64>, DVector<f64>)>,
    v0: DVector<f64>,
) -> Result<ForwardTape> {
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut v = v0.clone();
    for p in &params.layers {
        let rec = layer_forward(&v, np, p, cfg)?;
        v = rec.output.clone();
        layers.push(rec);
    }
    Ok(ForwardTape {
        v_head,
        hidden,
        v0,
        layers,
        v_final: v,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub power_term: f64,
    pub equality_term: f64,
    pub inequality_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

/// Lagrangian terms of one sample with the head multipliers, in the normalized frame:
/// `(‖v‖², Σλ_iΥ_iᵀΩv, Σμ_i(g_i − Υ_iᵀv))`.
pub fn lagrangian_terms(
    np: &NetProblem,
    params: &NetworkParams,
    v: &DVector<f64>,
) -> (f64, f64, f64) {
    let mu = params.head_mu();
    let lambda = params.head_lambda();
    let mut eq = 0.0;
    let mut ineq = 0.0;
    for i in 0..np.users() {
        eq += lambda[i] * skew_dot(np.row(i), v);
        ineq += mu[i] * (np.threshold(i) - np.row(i).dot(v));
    }
    (v.norm_squared(), eq, ineq)
}

/// `ϑ/(B·L) ‖raw‖²`.
pub fn reg_term(params: &NetworkParams, vartheta: f64, batch: usize) -> f64 {
    let sq: f64 = params.to_flat().iter().map(|x| x * x).sum();
    vartheta * sq / (batch * params.num_layers()) as f64
}

/// Batch loss: mean Lagrangian terms plus the weight penalty.
pub fn loss(
    batch: &[(&NetProblem, &ForwardTape)],
    params: &NetworkParams,
    vartheta: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(invalid("loss needs at least one sample"));
    }
    let b = batch.len() as f64;
    let mut out = LossBreakdown::default();
    for (np, tape) in batch {
        let (p, e, i) = lagrangian_terms(np, params, &tape.v_final);
        out.power_term += p / b;
        out.equality_term += e / b;
        out.inequality_term += i / b;
    }
    out.reg_term = reg_term(params, vartheta, batch.len());
    out.total = out.power_term + out.equality_term + out.inequality_term + out.reg_term;
    Ok(out)
}

/// Reverse pass: pulls `∂ℓ/∂v_final` back to the flat parameter gradient.
pub fn backward(
    tape: &ForwardTape,
    np: &NetProblem,
    params: &NetworkParams,
    cfg: &NetConfig,
    out_grad: &DVector<f64>,
) -> Result<Vec<f64>> {
    params.check_shape(np)?;
    check_len("output gradient", np.dim(), out_grad.len())?;
    if tape.layers.len() != params.layers.len() || tape.v_final.len() != np.dim() {
        return Err(invalid("tape does not belong to this network and problem"));
    }
    let k = np.users();
    let stride = 1 + 2 * k;
    let mut grad = vec![0.0; params.len()];
    let mut vbar = out_grad.clone();
    for (r, (p, rec)) in params.layers.iter().zip(&tape.layers).enumerate().rev() {
        let matches = match (&rec.cache, cfg.composition) {
            (LayerCache::Joint(_), ProxComposition::Joint) => true,
            (LayerCache::Sequential(c), ProxComposition::Sequential) => c.len() == k,
            _ => false,
        };
        if !matches {
            return Err(invalid(
                "tape was recorded with a different prox composition",
            ));
        }
        let gamma = p.gamma();
        let mu = p.mu();
        let lambda = p.lambda();
        let (wbar, tbar) = match &rec.cache {
            LayerCache::Joint(res) => {
                let (wbar, tbar) = np.subspace.joint_prox_vjp(res, &vbar)?;
                (wbar, tbar.iter().copied().collect::<Vec<_>>())
            }
            LayerCache::Sequential(results) => {
                let mut xbar = vbar.clone();
                let mut tbar = vec![0.0; k];
                for i in (0..k).rev() {
                    let (x, t) = prox_vjp(&results[i], np.row(i), &xbar);
                    xbar = x;
                    tbar[i] = t;
                }
                (xbar, tbar)
            }
        };
        let base = r * stride;
        // w = v − γ∇E(v, λ)
        let ge = grad_e_rows(&rec.input, &lambda, np.subspace.rows());
        let mut gbar = -wbar.dot(&ge);
        for i in 0..k {
            gbar += tbar[i] * mu[i];
            grad[base + 1 + i] = tbar[i] * gamma * softplus_grad(p.raw_mu[i]);
            let lbar = gamma * wbar.dot(&skew(np.row(i)));
            grad[base + 1 + k + i] = lbar * softplus_grad(p.raw_lambda[i]);
        }
        grad[base] = gbar * softplus_grad(p.raw_gamma);
        vbar = wbar * (1.0 - 2.0 * gamma);
    }
    // refinement block
    let head = params.head_offset();
    let mut vbar_head = vbar.clone();
    if let (Some(ref_block), Some((_, h))) = (&params.refinement, &tape.hidden) {
        let d = np.dim();
        let hid = ref_block.hidden;
        let mut off = head + 2 * k;
        let w2 = ref_block.w2(d);
        let hbar = w2.tr_mul(&vbar);
        let zbar = hbar.zip_map(h, |a, hv| a * (1.0 - hv * hv));
        for a in 0..hid {
            for j in 0..d {
                grad[off + a * d + j] = zbar[a] * tape.v_head[j];
            }
        }
        off += hid * d;
        for a in 0..hid {
            grad[off + a] = zbar[a];
        }
        off += hid;
        for j in 0..d {
            for a in 0..hid {
                grad[off + j * hid + a] = vbar[j] * h[a];
            }
        }
        off += d * hid;
        for j in 0..d {
            grad[off + j] = vbar[j];
        }
        vbar_head += ref_block.w1(d).tr_mul(&zbar);
    }
    // v_head = ½Σ(μ_iΥ_i + λ_iΩΥ_i)
    for i in 0..k {
        let u = np.row(i);
        grad[head + i] = 0.5 * u.dot(&vbar_head) * softplus_grad(params.head_mu_raw[i]);
        grad[head + k + i] =
            0.5 * skew(u).dot(&vbar_head) * softplus_grad(params.head_lambda_raw[i]);
    }
    Ok(grad)
}

/// Gradient of one sample's Lagrangian terms, split into the part reached through the
/// network output and the explicit dependence on the head multipliers.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub terms: (f64, f64, f64),
    /// Through `v_final`, including the head's role in the initial point.
    pub through_output: Vec<f64>,
    /// Explicit multiplier terms, nonzero only on the head block.
    pub explicit: Vec<f64>,
}

pub fn sample_gradient(
    tape: &ForwardTape,
    np: &NetProblem,
    params: &NetworkParams,
    cfg: &NetConfig,
) -> Result<SampleGradient> {
    let k = np.users();
    let v = &tape.v_final;
    let mu = params.head_mu();
    let lambda = params.head_lambda();
    let mut out_grad = grad_e_rows(v, &lambda, np.subspace.rows());
    for (u, &m) in np.subspace.rows().iter().zip(&mu) {
        out_grad.axpy(-m, u, 1.0);
    }
    let through_output = backward(tape, np, params, cfg, &out_grad)?;
    let mut explicit = vec![0.0; params.len()];
    let head = params.head_offset();
    for i in 0..k {
        let u = np.row(i);
        explicit[head + i] = (np.threshold(i) - u.dot(v)) * softplus_grad(params.head_mu_raw[i]);
        explicit[head + k + i] = skew_dot(u, v) * softplus_grad(params.head_lambda_raw[i]);
    }
    Ok(SampleGradient {
        terms: lagrangian_terms(np, params, v),
        through_output,
        explicit,
    })
}

/// Gradient of the batch [`loss`] with respect to the flat parameters.
pub fn loss_gradient(
    batch: &[(&NetProblem, &ForwardTape)],
    params: &NetworkParams,
    cfg: &NetConfig,
    vartheta: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(invalid("loss needs at least one sample"));
    }
    let b = batch.len() as f64;
    let mut grad = reg_gradient(params, vartheta, batch.len());
    for (np, tape) in batch {
        let sg = sample_gradient(tape, np, params, cfg)?;
        for ((g, a), e) in grad.iter_mut().zip(&sg.through_output).zip(&sg.explicit) {
            *g += (a + e) / b;
        }
    }
    Ok(grad)
}

pub fn reg_gradient(params: &NetworkParams, vartheta: f64, batch: usize) -> Vec<f64> {
    let c = 2.0 * vartheta / (batch * params.num_layers()) as f64;
    params.to_flat().iter().map(|x| c * x).collect()
}

/// On-disk network state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub layers: Vec<LayerParams>,
    pub head_mu_raw: Vec<f64>,
    pub head_lambda_raw: Vec<f64>,
    pub refinement: Option<Refinement>,
    #[serde(default)]
    pub prox_composition: ProxComposition,
    pub train_config_hash: String,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(
        params: &NetworkParams,
        n: usize,
        composition: ProxComposition,
        train_config_hash: String,
    ) -> Self {
        Self {
            version: Self::VERSION,
            l: params.num_layers(),
            k: params.users(),
            n,
            layers: params.layers.clone(),
            head_mu_raw: params.head_mu_raw.clone(),
            head_lambda_raw: params.head_lambda_raw.clone(),
            refinement: params.refinement.clone(),
            prox_composition: composition,
            train_config_hash,
        }
    }

    pub fn params(&self) -> NetworkParams {
        NetworkParams {
            layers: self.layers.clone(),
            head_mu_raw: self.head_mu_raw.clone(),
            head_lambda_raw: self.head_lambda_raw.clone(),
            refinement: self.refinement.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != Self::VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        check_len("checkpoint layers", self.l, self.layers.len())?;
        check_len(
            "checkpoint head multipliers",
            self.k,
            self.head_mu_raw.len(),
        )?;
        check_len(
            "checkpoint head multipliers",
            self.k,
            self.head_lambda_raw.len(),
        )?;
        for l in &self.layers {
            check_len("checkpoint layer weights", self.k, l.raw_mu.len())?;
            check_len("checkpoint layer weights", self.k, l.raw_lambda.len())?;
        }
        if self.params().to_flat().iter().any(|x| !x.is_finite()) {
            return Err(invalid("checkpoint holds non-finite parameters"));
        }
        Ok(())
    }

    pub fn config(&self) -> NetConfig {
        NetConfig {
            composition: self.prox_composition,
            ..Default::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        ck.validate()?;
        Ok(ck)
    }
}
