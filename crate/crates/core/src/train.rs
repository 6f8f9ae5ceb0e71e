//! Dataset generation, Adam, and the unsupervised training loop.
//!
//! Training minimizes the batch Lagrangian over the layer parameters and maximizes it over
//! the head multipliers (gradient descent-ascent), so the head converges to dual values whose
//! dual-to-primal image seeds the layers well. The weight penalty is minimized in both blocks.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetRecord;
use crate::error::{check_len, invalid, Error, Result};
use crate::model::{draw_channels, LiftedProblem, PskSymbols, RealPrecoder, RotationConvention};
use crate::net::{
    network_forward, reg_gradient, reg_term, sample_gradient, Checkpoint, NetConfig, NetProblem,
    NetworkParams, ProxComposition,
};
use crate::solvers::feasible_relative;

/// Seed streams; each sample or epoch draws from its own derived seed.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
}

/// Relative tolerance for counting a precoder as feasible.
pub const FEASIBILITY_REL: f64 = 1e-3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `idx` of `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, idx: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ idx)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `η_e = η₀ βᵉ` for epoch `e`.
    #[default]
    PerEpoch,
    /// `η_s = η₀ βˢ` for optimizer step `s`.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub psk_order: u32,
    #[serde(rename = "B")]
    pub batch: usize,
    pub epochs: usize,
    pub eta0: f64,
    pub beta_decay: f64,
    pub vartheta: f64,
    #[serde(rename = "L")]
    pub layers: usize,
    pub gamma_db_range: [f64; 2],
    pub n0: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub prox_composition: ProxComposition,
    /// Adds the dense residual block after the head.
    pub refinement: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_test: 500,
            k: 4,
            n: 4,
            psk_order: 4,
            batch: 64,
            epochs: 15,
            eta0: 0.05,
            beta_decay: 0.65,
            vartheta: 1e-4,
            layers: 5,
            gamma_db_range: [0.0, 35.0],
            n0: 1.0,
            seed: 0,
            lr_schedule: LrSchedule::PerEpoch,
            prox_composition: ProxComposition::Joint,
            refinement: false,
        }
    }
}

impl TrainConfig {
    /// 50000 training and 2000 test samples.
    pub fn paper_scale() -> Self {
        Self {
            n_train: 50_000,
            n_test: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(invalid(m));
        if self.k == 0 || self.n == 0 || self.layers == 0 {
            return fail(format!(
                "K, N and L must be at least 1, got {}, {}, {}",
                self.k, self.n, self.layers
            ));
        }
        if self.k > 2 * self.n {
            return fail(format!(
                "K = {} exceeds the lifted dimension 2N = {}",
                self.k,
                2 * self.n
            ));
        }
        if self.psk_order < 2 {
            return fail(format!(
                "psk_order must be at least 2, got {}",
                self.psk_order
            ));
        }
        if self.batch == 0 || self.batch > self.n_train {
            return fail(format!("B must lie in 1..=n_train, got {}", self.batch));
        }
        if !(self.beta_decay > 0.0 && self.beta_decay <= 1.0) {
            return fail(format!(
                "beta_decay must lie in (0, 1], got {}",
                self.beta_decay
            ));
        }
        if !(self.vartheta >= 0.0) {
            return fail(format!(
                "vartheta must be non-negative, got {}",
                self.vartheta
            ));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return fail(format!("eta0 must be positive, got {}", self.eta0));
        }
        let [lo, hi] = self.gamma_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail(format!(
                "gamma_db_range must be an ordered pair, got [{lo}, {hi}]"
            ));
        }
        if !(self.n0 > 0.0) {
            return fail(format!("n0 must be positive, got {}", self.n0));
        }
        Ok(())
    }

    /// SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config always serializes"),
        ))
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            composition: self.prox_composition,
            ..Default::default()
        }
    }

    pub fn lr_at(&self, epoch: usize, step: usize) -> f64 {
        let e = match self.lr_schedule {
            LrSchedule::PerEpoch => epoch,
            LrSchedule::PerStep => step,
        };
        self.eta0 * self.beta_decay.powi(e.min(i32::MAX as usize) as i32)
    }
}

/// One record from its own seed: channel, PSK symbols, and a common Γ uniform in dB.
pub fn generate_record(cfg: &TrainConfig, seed: u64) -> Result<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = draw_channels(cfg.k, cfg.n, rng.next_u64())?;
    let sym = PskSymbols::random(cfg.psk_order, cfg.k, &mut rng)?;
    let [lo, hi] = cfg.gamma_db_range;
    let db = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    Ok(DatasetRecord::from_parts(
        seed,
        &ch,
        &sym,
        vec![db; cfg.k],
        cfg.n0,
    ))
}

/// Training and test records from disjoint seed streams.
pub fn generate_dataset(cfg: &TrainConfig) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    cfg.validate()?;
    let split = |stream: u64, count: usize| -> Result<Vec<DatasetRecord>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| generate_record(cfg, derive_seed(cfg.seed, stream, i)))
            .collect()
    };
    Ok((
        split(stream::TRAIN, cfg.n_train)?,
        split(stream::TEST, cfg.n_test)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, eta: f64) -> Result<()> {
    check_len("gradient", params.len(), grads.len())?;
    check_len("Adam moments", params.len(), state.m.len())?;
    check_len("Adam moments", params.len(), state.v.len())?;
    if let Some(j) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "gradient entry {j} is {} at Adam step {}",
            grads[j],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        *p -= eta * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Mean transmit power of the feasible outputs, in the original frame.
    pub power: f64,
    pub feasibility_rate: f64,
    /// Learning rate in effect at the end of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub adam: AdamState,
    /// Sample-steps dropped because a layer's prox did not converge.
    pub masked: usize,
    /// Training records skipped because they could not be normalized.
    pub skipped: usize,
}

struct SampleOutcome {
    loss: f64,
    power: f64,
    feasible: bool,
    grad: Option<Vec<f64>>,
}

fn run_sample(
    lp: &LiftedProblem,
    np: &NetProblem,
    params: &NetworkParams,
    cfg: &NetConfig,
    head: std::ops::Range<usize>,
) -> SampleOutcome {
    let failed = SampleOutcome {
        loss: f64::NAN,
        power: f64::NAN,
        feasible: false,
        grad: None,
    };
    let Ok(tape) = network_forward(np, params, cfg) else {
        return failed;
    };
    let v = np.to_original(&tape.v_final);
    let power = v.norm_squared();
    let feasible = feasible_relative(lp, &v, FEASIBILITY_REL);
    if !tape.converged() {
        return SampleOutcome {
            power,
            feasible,
            ..failed
        };
    }
    let Ok(sg) = sample_gradient(&tape, np, params, cfg) else {
        return SampleOutcome {
            power,
            feasible,
            ..failed
        };
    };
    let mut grad: Vec<f64> = sg
        .through_output
        .iter()
        .zip(&sg.explicit)
        .map(|(a, b)| a + b)
        .collect();
    // ascent on the head multipliers
    for g in &mut grad[head] {
        *g = -*g;
    }
    let (p, e, i) = sg.terms;
    SampleOutcome {
        loss: p + e + i,
        power,
        feasible,
        grad: Some(grad),
    }
}

/// Trains from scratch; `on_epoch` sees every epoch's stats as soon as they are final.
pub fn train(
    cfg: &TrainConfig,
    records: &[DatasetRecord],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainRun> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut problems = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        if r.k != cfg.k || r.n != cfg.n {
            return Err(invalid(format!(
                "record {} has K = {}, N = {}; config expects {}, {}",
                r.seed, r.k, r.n, cfg.k, cfg.n
            )));
        }
        let lp = r.lift(RotationConvention::Reference)?;
        match NetProblem::new(&lp) {
            Ok(np) => problems.push((lp, np)),
            Err(_) => skipped += 1,
        }
    }
    if problems.len() < cfg.batch {
        return Err(invalid(format!(
            "only {} usable training records for batch size {}",
            problems.len(),
            cfg.batch
        )));
    }
    let mut params = NetworkParams::init(
        cfg.layers,
        cfg.k,
        cfg.n,
        cfg.refinement,
        derive_seed(cfg.seed, stream::INIT, 0),
    )?;
    let net_cfg = cfg.net_config();
    let head_start = params.head_offset();
    let head = head_start..head_start + 2 * cfg.k;
    let mut adam = AdamState::new(params.len());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..problems.len()).collect();
    let mut masked = 0;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut power_sum, mut batches) = (0.0, 0.0, 0usize);
        let (mut feasible, mut seen, mut powered) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let outcomes: Vec<SampleOutcome> = chunk
                .par_iter()
                .map(|&i| {
                    let (lp, np) = &problems[i];
                    run_sample(lp, np, &params, &net_cfg, head.clone())
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            let mut lagr = 0.0;
            let mut used = 0usize;
            for o in &outcomes {
                seen += 1;
                feasible += o.feasible as usize;
                if o.feasible {
                    power_sum += o.power;
                    powered += 1;
                }
                match &o.grad {
                    Some(g) => {
                        used += 1;
                        lagr += o.loss;
                        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                    None => masked += 1,
                }
            }
            if used == 0 {
                continue;
            }
            let b = used as f64;
            let reg = reg_gradient(&params, cfg.vartheta, used);
            grad.iter_mut().zip(&reg).for_each(|(a, r)| *a = *a / b + r);
            let loss = lagr / b + reg_term(&params, cfg.vartheta, used);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            let mut flat = params.to_flat();
            adam_step(&mut flat, &grad, &mut adam, cfg.lr_at(epoch, step)).map_err(|e| {
                Error::Diverged {
                    epoch,
                    step,
                    reason: e.to_string(),
                }
            })?;
            params.set_flat(&flat)?;
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Diverged {
                epoch,
                step,
                reason: "no batch had a converged forward pass".into(),
            });
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            power: if powered > 0 {
                power_sum / powered as f64
            } else {
                f64::NAN
            },
            feasibility_rate: feasible as f64 / seen as f64,
            lr: cfg.lr_at(epoch, step.saturating_sub(1)),
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(TrainRun {
        checkpoint: Checkpoint::new(&params, cfg.n, cfg.prox_composition, cfg.hash()),
        history,
        adam,
        masked,
        skipped,
    })
}

/// A loaded network ready for repeated inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    params: NetworkParams,
    cfg: NetConfig,
    k: usize,
    n: usize,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub precoder: RealPrecoder,
    /// Every layer's activation was solved to tolerance.
    pub converged: bool,
    pub wall_time: f64,
}

impl Predictor {
    pub fn new(ck: &Checkpoint) -> Result<Self> {
        ck.validate()?;
        Ok(Self {
            params: ck.params(),
            cfg: ck.config(),
            k: ck.k,
            n: ck.n,
        })
    }

    pub fn predict(&self, lp: &LiftedProblem) -> Result<Inference> {
        let start = Instant::now();
        if lp.users() != self.k || lp.antennas() != self.n {
            return Err(invalid(format!(
                "checkpoint is for K = {}, N = {}; problem has K = {}, N = {}",
                self.k,
                self.n,
                lp.users(),
                lp.antennas()
            )));
        }
        let np = NetProblem::new(lp)?;
        let tape = network_forward(&np, &self.params, &self.cfg)?;
        let precoder = tape.precoder(&np)?;
        Ok(Inference {
            precoder,
            converged: tape.converged(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// One forward pass; see [`Predictor`] for repeated use.
pub fn infer(ck: &Checkpoint, lp: &LiftedProblem) -> Result<Inference> {
    Predictor::new(ck)?.predict(lp)
}
