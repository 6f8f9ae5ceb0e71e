//! Channel and symbol types, and the complex-to-real lifting.
//!
//! A downlink precoder `v ∈ C^N` is carried around as `v1 = [Re v; -Im v] ∈ R^{2N}`.
//! Each user's rotated channel `h̃_i` becomes a real row `Υ_i = [Re h̃_i; Im h̃_i]` so that
//! `Re(h̃_iᵀ v) = Υ_iᵀ v1` and `Im(h̃_iᵀ v) = Υ_iᵀ Ω v1`, where `Ω` is the quarter-turn
//! `Ω [a; b] = [-b; a]`. The symbol-level problem then reads
//!
//! ```text
//!     minimize ‖v1‖²  subject to  Υ_iᵀ Ω v1 = 0,  Υ_iᵀ v1 ≥ √(Γ_i N0)
//! ```

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};

/// K×N complex downlink channel matrix; row `i` is `h_iᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    gains: DMatrix<Complex64>,
}

impl ChannelSet {
    pub fn new(gains: DMatrix<Complex64>) -> Result<Self> {
        if gains.nrows() == 0 || gains.ncols() == 0 {
            return Err(invalid(
                "channel matrix must have at least one user and one antenna",
            ));
        }
        if gains.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid("channel gains must be finite"));
        }
        Ok(Self { gains })
    }

    pub fn users(&self) -> usize {
        self.gains.nrows()
    }

    pub fn antennas(&self) -> usize {
        self.gains.ncols()
    }

    pub fn gains(&self) -> &DMatrix<Complex64> {
        &self.gains
    }

    /// The channel of user `i` as a column vector `h_i`.
    pub fn channel(&self, i: usize) -> DVector<Complex64> {
        self.gains.row(i).transpose()
    }
}

/// Draws an i.i.d. CN(0, 1) channel: real and imaginary parts are each N(0, 1/2).
pub fn draw_channels(k: usize, n: usize, seed: u64) -> Result<ChannelSet> {
    if k == 0 || n == 0 {
        return Err(invalid("K and N must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains = DMatrix::from_fn(k, n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
    });
    ChannelSet::new(gains)
}

/// One M-PSK symbol per user, stored by phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PskSymbols {
    order: u32,
    phases: Vec<f64>,
}

impl PskSymbols {
    /// Phase of constellation point `m`: `2πm/M + π/M`.
    pub fn constellation_phase(order: u32, m: u32) -> f64 {
        2.0 * PI * f64::from(m) / f64::from(order) + PI / f64::from(order)
    }

    fn check_order(order: u32) -> Result<()> {
        if order < 2 || !order.is_power_of_two() {
            return Err(invalid(format!(
                "PSK order must be a power of two ≥ 2, got {order}"
            )));
        }
        Ok(())
    }

    pub fn from_indices(order: u32, indices: &[u32]) -> Result<Self> {
        Self::check_order(order)?;
        if let Some(&m) = indices.iter().find(|&&m| m >= order) {
            return Err(invalid(format!(
                "symbol index {m} out of range for {order}-PSK"
            )));
        }
        let phases = indices
            .iter()
            .map(|&m| Self::constellation_phase(order, m))
            .collect();
        Ok(Self { order, phases })
    }

    /// Accepts phases that lie on the `order`-PSK grid (modulo 2π, to 1e-9 rad).
    pub fn from_phases(order: u32, phases: &[f64]) -> Result<Self> {
        Self::check_order(order)?;
        for &p in phases {
            if Self::grid_index(order, p).is_none() {
                return Err(invalid(format!("phase {p} is not a {order}-PSK point")));
            }
        }
        Ok(Self {
            order,
            phases: phases.to_vec(),
        })
    }

    /// Smallest PSK order (up to 1024) whose grid contains every phase.
    pub fn infer(phases: &[f64]) -> Result<Self> {
        let mut order = 2;
        while order <= 1024 {
            if phases.iter().all(|&p| Self::grid_index(order, p).is_some()) {
                return Self::from_phases(order, phases);
            }
            order *= 2;
        }
        Err(invalid("phases do not lie on any PSK grid"))
    }

    fn grid_index(order: u32, phase: f64) -> Option<u32> {
        if !phase.is_finite() {
            return None;
        }
        let step = 2.0 * PI / f64::from(order);
        let x = (phase - PI / f64::from(order)) / step;
        let m = x.round();
        if (x - m).abs() * step > 1e-9 {
            return None;
        }
        Some(m.rem_euclid(f64::from(order)) as u32)
    }

    pub fn random<R: Rng + ?Sized>(order: u32, k: usize, rng: &mut R) -> Result<Self> {
        Self::check_order(order)?;
        let idx: Vec<u32> = (0..k).map(|_| rng.random_range(0..order)).collect();
        Self::from_indices(order, &idx)
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn symbol(&self, i: usize) -> Complex64 {
        Complex64::from_polar(1.0, self.phases[i])
    }
}

/// How user channels are rotated before lifting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationConvention {
    /// `h̃_i = h_i e^{j(φ_1 − φ_i)}`: every user is referenced to user 1's symbol.
    #[default]
    Reference,
    /// `h̃_i = h_i Σ_k e^{j(φ_k − φ_i)}`, the summed form. It equals the reference form
    /// times a common complex factor, so its power scale depends on the symbols and it
    /// degenerates when the symbols sum to zero.
    LiteralSum,
}

/// Real-valued QP data: rows `Υ_i`, SINR targets and the cached thresholds `g_i = √(Γ_i N0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedProblem {
    rows: Vec<DVector<f64>>,
    gamma: Vec<f64>,
    noise_power: f64,
    thresholds: Vec<f64>,
}

impl LiftedProblem {
    pub fn new(rows: Vec<DVector<f64>>, gamma: Vec<f64>, noise_power: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("at least one user is required"));
        }
        check_len("SINR targets", rows.len(), gamma.len())?;
        let dim = rows[0].len();
        if dim == 0 || dim % 2 != 0 {
            return Err(invalid(format!(
                "lifted rows must have even positive length, got {dim}"
            )));
        }
        for r in &rows {
            check_len("lifted row", dim, r.len())?;
            if r.iter().any(|x| !x.is_finite()) {
                return Err(invalid("lifted rows must be finite"));
            }
        }
        if !(noise_power > 0.0 && noise_power.is_finite()) {
            return Err(invalid(format!(
                "noise power must be positive, got {noise_power}"
            )));
        }
        if let Some(&g) = gamma.iter().find(|&&g| !(g > 0.0 && g.is_finite())) {
            return Err(invalid(format!("SINR targets must be positive, got {g}")));
        }
        let thresholds = gamma.iter().map(|&g| (g * noise_power).sqrt()).collect();
        Ok(Self {
            rows,
            gamma,
            noise_power,
            thresholds,
        })
    }

    /// Same rows and noise power, new SINR targets.
    pub fn with_gamma(&self, gamma: Vec<f64>) -> Result<Self> {
        Self::new(self.rows.clone(), gamma, self.noise_power)
    }

    pub fn users(&self) -> usize {
        self.rows.len()
    }

    pub fn antennas(&self) -> usize {
        self.rows[0].len() / 2
    }

    /// Length of the lifted variable, `2N`.
    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn upsilon(&self, i: usize) -> &DVector<f64> {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }

    /// K×2N matrix whose row `i` is `Υ_iᵀ`.
    pub fn upsilon_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.users(), self.dim(), |i, j| self.rows[i][j])
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn threshold(&self, i: usize) -> f64 {
        self.thresholds[i]
    }
}

/// Rotates every channel to user 1's symbol and lifts to real rows.
pub fn rotate_and_lift(
    ch: &ChannelSet,
    sym: &PskSymbols,
    gamma: &[f64],
    n0: f64,
) -> Result<LiftedProblem> {
    rotate_and_lift_with(ch, sym, gamma, n0, RotationConvention::Reference)
}

pub fn rotate_and_lift_with(
    ch: &ChannelSet,
    sym: &PskSymbols,
    gamma: &[f64],
    n0: f64,
    convention: RotationConvention,
) -> Result<LiftedProblem> {
    let k = ch.users();
    check_len("PSK symbols", k, sym.len())?;
    check_len("SINR targets", k, gamma.len())?;
    let phases = sym.phases();
    let rows = (0..k)
        .map(|i| {
            let rot = match convention {
                RotationConvention::Reference => Complex64::from_polar(1.0, phases[0] - phases[i]),
                RotationConvention::LiteralSum => phases
                    .iter()
                    .map(|&pk| Complex64::from_polar(1.0, pk - phases[i]))
                    .sum(),
            };
            let h = ch.channel(i);
            let n = h.len();
            DVector::from_fn(2 * n, |j, _| {
                let z = h[j % n] * rot;
                if j < n {
                    z.re
                } else {
                    z.im
                }
            })
        })
        .collect();
    LiftedProblem::new(rows, gamma.to_vec(), n0)
}

/// Lifted transmit vector `v1 = [Re v; -Im v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealPrecoder {
    v1: DVector<f64>,
}

impl Serialize for RealPrecoder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.v1.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RealPrecoder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        RealPrecoder::new(DVector::from_vec(v)).map_err(serde::de::Error::custom)
    }
}

impl RealPrecoder {
    pub fn new(v1: DVector<f64>) -> Result<Self> {
        if v1.is_empty() || v1.len() % 2 != 0 {
            return Err(invalid(format!(
                "precoder length must be even and positive, got {}",
                v1.len()
            )));
        }
        if v1.iter().any(|x| !x.is_finite()) {
            return Err(invalid("precoder entries must be finite"));
        }
        Ok(Self { v1 })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            v1: DVector::zeros(2 * n),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.v1
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.v1
    }

    pub fn power(&self) -> f64 {
        transmit_power(&self.v1)
    }
}

/// `Ω v1` for `v1 = [a; b]`, i.e. `[-b; a]`.
pub fn apply_skew(v1: &DVector<f64>) -> Result<DVector<f64>> {
    if v1.len() % 2 != 0 {
        return Err(invalid(format!(
            "skew operator needs even length, got {}",
            v1.len()
        )));
    }
    Ok(skew(v1))
}

pub(crate) fn skew(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() / 2;
    DVector::from_fn(2 * n, |j, _| if j < n { -v[j + n] } else { v[j - n] })
}

/// `uᵀ Ω v` without forming `Ω v`.
pub(crate) fn skew_dot(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let n = u.len() / 2;
    (0..n).map(|j| u[j + n] * v[j] - u[j] * v[j + n]).sum()
}

/// Complex view `v = first_half − j·second_half`.
pub fn real_to_complex(v1: &RealPrecoder) -> DVector<Complex64> {
    let v = v1.as_vector();
    let n = v.len() / 2;
    DVector::from_fn(n, |j, _| Complex64::new(v[j], -v[j + n]))
}

/// Inverse of [`real_to_complex`].
pub fn complex_to_real(v: &DVector<Complex64>) -> RealPrecoder {
    let n = v.len();
    RealPrecoder {
        v1: DVector::from_fn(2 * n, |j, _| if j < n { v[j].re } else { -v[j - n].im }),
    }
}

pub fn transmit_power(v1: &DVector<f64>) -> f64 {
    v1.norm_squared()
}

/// `Υ_iᵀ v1 − g_i`.
pub fn re_margin(lp: &LiftedProblem, v1: &DVector<f64>, i: usize) -> f64 {
    lp.upsilon(i).dot(v1) - lp.threshold(i)
}

/// `Υ_iᵀ Ω v1`.
pub fn im_residual(lp: &LiftedProblem, v1: &DVector<f64>, i: usize) -> f64 {
    skew_dot(lp.upsilon(i), v1)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn channels_are_deterministic() {
        let a = draw_channels(4, 4, 7).unwrap();
        let b = draw_channels(4, 4, 7).unwrap();
        assert_eq!(a, b);
        let s = draw_channels(1, 1, 0).unwrap();
        assert!(s.gains()[(0, 0)].re.is_finite());
        assert!(draw_channels(0, 3, 1).is_err());
    }

    #[test]
    fn channel_component_variance_is_one_half() {
        let ch = draw_channels(1000, 100, 3).unwrap();
        let n = (ch.users() * ch.antennas()) as f64;
        let var_re = ch.gains().iter().map(|z| z.re * z.re).sum::<f64>() / n;
        let var_im = ch.gains().iter().map(|z| z.im * z.im).sum::<f64>() / n;
        assert!((0.45..=0.55).contains(&var_re), "{var_re}");
        assert!((0.45..=0.55).contains(&var_im), "{var_im}");
    }

    #[test]
    fn psk_grid() {
        let s = PskSymbols::from_indices(4, &[0, 1, 2, 3]).unwrap();
        let expected = [PI / 4.0, 3.0 * PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0];
        for (p, e) in s.phases().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert!((s.symbol(2).norm() - 1.0).abs() < 1e-15);
        assert!(PskSymbols::from_indices(3, &[0]).is_err());
        assert!(PskSymbols::from_indices(4, &[4]).is_err());
        assert!(PskSymbols::from_phases(4, &[0.1]).is_err());
        let inferred = PskSymbols::infer(&[PI / 8.0, PI / 8.0 + PI / 4.0]).unwrap();
        assert_eq!(inferred.order(), 8);
    }

    #[test]
    fn identity_and_quarter_turn_rotation() {
        let ch = ChannelSet::new(DMatrix::from_element(1, 1, c(1.0, 0.0))).unwrap();
        let sym = PskSymbols::from_indices(4, &[0]).unwrap();
        let lp = rotate_and_lift(&ch, &sym, &[1.0], 1.0).unwrap();
        assert_eq!(lp.upsilon(0).as_slice(), &[1.0, 0.0]);

        // user 2 sits a quarter turn ahead of user 1: h = j is rotated by e^{-jπ/2} to 1.
        let ch =
            ChannelSet::new(DMatrix::from_row_slice(2, 1, &[c(1.0, 0.0), c(0.0, 1.0)])).unwrap();
        let sym = PskSymbols::from_indices(4, &[0, 1]).unwrap();
        let lp = rotate_and_lift(&ch, &sym, &[1.0, 1.0], 1.0).unwrap();
        assert!((lp.upsilon(1)[0] - 1.0).abs() < 1e-15);
        assert!(lp.upsilon(1)[1].abs() < 1e-15);
    }

    #[test]
    fn lifting_rejects_bad_targets() {
        let ch = draw_channels(2, 2, 1).unwrap();
        let sym = PskSymbols::from_indices(4, &[0, 1]).unwrap();
        assert!(rotate_and_lift(&ch, &sym, &[1.0, 0.0], 1.0).is_err());
        assert!(rotate_and_lift(&ch, &sym, &[1.0, 1.0], 0.0).is_err());
        assert!(rotate_and_lift(&ch, &sym, &[1.0], 1.0).is_err());
    }

    #[test]
    fn thresholds_are_cached() {
        let ch = draw_channels(2, 2, 1).unwrap();
        let sym = PskSymbols::from_indices(4, &[0, 3]).unwrap();
        let lp = rotate_and_lift(&ch, &sym, &[10.0, 2.5], 0.4).unwrap();
        assert!((lp.threshold(0) - 2.0).abs() < 1e-15);
        assert!((lp.threshold(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn literal_sum_is_a_common_rescaling() {
        let ch = draw_channels(3, 2, 5).unwrap();
        let sym = PskSymbols::from_indices(4, &[0, 1, 1]).unwrap();
        let a = rotate_and_lift(&ch, &sym, &[1.0; 3], 1.0).unwrap();
        let b = rotate_and_lift_with(&ch, &sym, &[1.0; 3], 1.0, RotationConvention::LiteralSum)
            .unwrap();
        // Σ_k e^{j(φ_k − φ_i)} = e^{j(φ_1 − φ_i)} · S e^{-jφ_1} with S = Σ_k e^{jφ_k}
        let s: Complex64 = sym
            .phases()
            .iter()
            .map(|&p| Complex64::from_polar(1.0, p))
            .sum();
        let f = s * Complex64::from_polar(1.0, -sym.phases()[0]);
        for i in 0..3 {
            let n = 2;
            for j in 0..n {
                let za = c(a.upsilon(i)[j], a.upsilon(i)[j + n]) * f;
                assert!((za.re - b.upsilon(i)[j]).abs() < 1e-12);
                assert!((za.im - b.upsilon(i)[j + n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn skew_examples() {
        let v = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(apply_skew(&v).unwrap().as_slice(), &[0.0, 1.0]);
        assert!(apply_skew(&DVector::from_vec(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn complex_view_sign_convention() {
        let a = RealPrecoder::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(real_to_complex(&a)[0], c(1.0, 0.0));
        let b = RealPrecoder::new(DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(real_to_complex(&b)[0], c(0.0, -1.0));
    }

    #[test]
    fn margins_of_zero_and_boundary_precoders() {
        let lp =
            LiftedProblem::new(vec![DVector::from_vec(vec![3.0, 4.0])], vec![4.0], 1.0).unwrap();
        let z = DVector::zeros(2);
        assert_eq!(transmit_power(&z), 0.0);
        assert_eq!(re_margin(&lp, &z, 0), -2.0);
        let u = lp.upsilon(0);
        let v = u * (2.0 / u.norm_squared());
        assert!(re_margin(&lp, &v, 0).abs() < 1e-15);
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0..3.0f64, len)
    }

    proptest! {
        #[test]
        fn lifting_identities(n in 1usize..6, seed in any::<u64>(), m0 in 0u32..8, m1 in 0u32..8, vv in vec_strategy(12)) {
            let ch = draw_channels(2, n, seed).unwrap();
            let sym = PskSymbols::from_indices(8, &[m0, m1]).unwrap();
            let lp = rotate_and_lift(&ch, &sym, &[1.0, 1.0], 1.0).unwrap();
            let v1 = DVector::from_iterator(2 * n, vv.into_iter().take(2 * n));
            let v = real_to_complex(&RealPrecoder::new(v1.clone()).unwrap());
            for i in 0..2 {
                let rot = Complex64::from_polar(1.0, sym.phases()[0] - sym.phases()[i]);
                let y: Complex64 = (0..n).map(|j| ch.gains()[(i, j)] * rot * v[j]).sum();
                prop_assert!((y.re - lp.upsilon(i).dot(&v1)).abs() <= 1e-10);
                prop_assert!((y.im - im_residual(&lp, &v1, i)).abs() <= 1e-10);
            }
        }

        #[test]
        fn skew_algebra(x in vec_strategy(8), y in vec_strategy(8)) {
            let x = DVector::from_vec(x);
            let y = DVector::from_vec(y);
            let ox = apply_skew(&x).unwrap();
            prop_assert!(x.dot(&ox).abs() <= 1e-12);
            prop_assert!((apply_skew(&ox).unwrap() + &x).norm() <= 1e-12);
            prop_assert!((ox.norm() - x.norm()).abs() <= 1e-12);
            // Ωᵀ = −Ω: ⟨Ωx, y⟩ = −⟨x, Ωy⟩
            prop_assert!((ox.dot(&y) + x.dot(&apply_skew(&y).unwrap())).abs() <= 1e-12);
            prop_assert!((skew_dot(&x, &y) - x.dot(&apply_skew(&y).unwrap())).abs() <= 1e-12);
        }

        #[test]
        fn complex_round_trip_preserves_power(x in vec_strategy(10)) {
            let p = RealPrecoder::new(DVector::from_vec(x)).unwrap();
            let v = real_to_complex(&p);
            prop_assert!((v.norm_squared() - p.power()).abs() <= 1e-12);
            prop_assert_eq!(complex_to_real(&v), p);
        }
    }
}
