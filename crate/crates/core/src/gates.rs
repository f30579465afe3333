//! Stochastic binary gates.
//!
//! Every gated unit carries a logit `phi`; its activation probability is
//! `g(phi)` for an antithetic `g` (`g(-phi) = 1 - g(phi)`). Masks are drawn in
//! antithetic pairs from a single uniform vector.

use std::fmt;
use std::str::FromStr;

use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{NpnError, Result};
use crate::tensor::{ParamTensor, Tensor};

/// Scale that stands in for `k = infinity`.
pub const K_INFINITY: f64 = 5000.0;

/// Hard-sigmoid slope divisor chosen so that `k = 1` tracks the plain sigmoid.
const HARD_SIGMOID_DIVISOR: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    /// `sigma(k phi)`
    ScaledSigmoid,
    /// `min(1, max(0, (k/7) phi + 0.5))`
    HardSigmoid,
}

impl GateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::ScaledSigmoid => "sigmoid",
            GateKind::HardSigmoid => "hard",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateKind {
    type Err = NpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" | "scaled-sigmoid" => Ok(GateKind::ScaledSigmoid),
            "hard" | "hard-sigmoid" => Ok(GateKind::HardSigmoid),
            other => Err(NpnError::config(format!("unknown gate kind `{other}`"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `g(1-g) = sigma(x) sigma(-x)` without cancellation.
fn sigmoid_slope(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Activation probability `g(phi)`. `k = 0` gives exactly 0.5 for every
/// `phi`, including infinite ones.
///
/// The upper half is evaluated directly and the lower half as `1 - g(-phi)`;
/// the subtraction is exact for arguments in `[0.5, 1]`, so
/// `g(phi) + g(-phi) == 1` holds bit for bit.
pub fn gate_prob(phi: f64, k: f64, kind: GateKind) -> f64 {
    if k == 0.0 {
        return 0.5;
    }
    let upper = |x: f64| match kind {
        GateKind::ScaledSigmoid => sigmoid(k * x),
        GateKind::HardSigmoid => (k / HARD_SIGMOID_DIVISOR * x + 0.5).min(1.0),
    };
    if phi >= 0.0 {
        upper(phi)
    } else {
        1.0 - upper(-phi)
    }
}

/// `dg/dphi`. For the hard sigmoid this is `k/7` strictly inside the linear
/// region and 0 elsewhere, including both kinks.
pub fn gate_prob_derivative(phi: f64, k: f64, kind: GateKind) -> f64 {
    if k == 0.0 {
        return 0.0;
    }
    match kind {
        GateKind::ScaledSigmoid => k * sigmoid_slope(k * phi),
        GateKind::HardSigmoid => {
            let slope = k / HARD_SIGMOID_DIVISOR;
            let pre = slope * phi + 0.5;
            if pre > 0.0 && pre < 1.0 {
                slope
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitState {
    Active,
    Hibernated,
}

/// How gate logits are initialised for units that start active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateInit {
    /// `phi = +3/k_ref`, i.e. `g = sigma(3) ~ 0.95` for the scaled sigmoid.
    Confident { k_ref: f64 },
    /// `g(phi)` drawn from `N(mean, std^2)` (clamped into (0,1)) and inverted.
    ProbabilityNormal { mean: f64, std: f64, k_ref: f64 },
}

impl GateInit {
    pub fn confident(k_adapt: f64) -> Self {
        GateInit::Confident { k_ref: k_adapt }
    }
}

/// Logit giving `g(phi) = p` for the scaled sigmoid at scale `k`.
fn sigmoid_logit(p: f64, k: f64) -> f64 {
    (p / (1.0 - p)).ln() / k
}

/// Per-layer gate logits plus lifecycle state and a private uniform stream.
#[derive(Debug, Clone)]
pub struct GateBank {
    pub(crate) phi: ParamTensor,
    kind: GateKind,
    k: f64,
    states: Vec<UnitState>,
    frozen: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl PartialEq for GateBank {
    fn eq(&self, other: &Self) -> bool {
        self.phi.value == other.phi.value
            && self.kind == other.kind
            && self.k == other.k
            && self.states == other.states
            && self.frozen == other.frozen
            && self.rng == other.rng
    }
}

impl GateBank {
    /// All units active with logits `phis`. The uniform stream is
    /// ChaCha8 seeded by `seed` on stream `stream`.
    pub fn new(phis: Vec<f64>, kind: GateKind, k: f64, seed: u64, stream: u64) -> Result<Self> {
        if phis.is_empty() {
            return Err(NpnError::config("gate bank needs at least one unit"));
        }
        if !(k >= 0.0) {
            return Err(NpnError::config(format!("gate scale k must be >= 0, got {k}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let n = phis.len();
        Ok(GateBank {
            phi: ParamTensor::new(Tensor::vector(phis)),
            kind,
            k,
            states: vec![UnitState::Active; n],
            frozen: None,
            rng,
        })
    }

    /// `units` gates initialised per `init`; `init_rng` is only used by
    /// [`GateInit::ProbabilityNormal`].
    pub fn initialised(
        units: usize,
        kind: GateKind,
        k: f64,
        init: GateInit,
        init_rng: &mut impl rand::Rng,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let phis = match init {
            GateInit::Confident { k_ref } => vec![3.0 / k_ref; units],
            GateInit::ProbabilityNormal { mean, std, k_ref } => {
                let normal = Normal::new(mean, std)
                    .map_err(|e| NpnError::config(format!("gate init: {e}")))?;
                (0..units)
                    .map(|_| {
                        let p = normal.sample(init_rng).clamp(1e-6, 1.0 - 1e-6);
                        match kind {
                            GateKind::ScaledSigmoid => sigmoid_logit(p, k_ref),
                            GateKind::HardSigmoid => (p - 0.5) * HARD_SIGMOID_DIVISOR / k_ref,
                        }
                    })
                    .collect()
            }
        };
        Self::new(phis, kind, k, seed, stream)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn set_k(&mut self, k: f64) {
        self.k = k;
    }

    pub fn phis(&self) -> &[f64] {
        self.phi.value.data()
    }

    pub fn set_phi(&mut self, unit: usize, phi: f64) {
        self.phi.value.data_mut()[unit] = phi;
    }

    pub fn states(&self) -> &[UnitState] {
        &self.states
    }

    pub fn state(&self, unit: usize) -> UnitState {
        self.states[unit]
    }

    pub fn is_active(&self, unit: usize) -> bool {
        self.states[unit] == UnitState::Active
    }

    pub fn active_count(&self) -> usize {
        self.states.iter().filter(|s| **s == UnitState::Active).count()
    }

    /// Puts `unit` to sleep with logit `phi`.
    pub fn hibernate(&mut self, unit: usize, phi: f64) {
        self.states[unit] = UnitState::Hibernated;
        self.set_phi(unit, phi);
    }

    /// Wakes `unit` with logit `phi`.
    pub fn activate(&mut self, unit: usize, phi: f64) {
        self.states[unit] = UnitState::Active;
        self.set_phi(unit, phi);
    }

    /// Fixed deterministic mask set by fine-tuning, if any.
    pub fn frozen_mask(&self) -> Option<&[f64]> {
        self.frozen.as_deref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub(crate) fn freeze(&mut self, mask: Vec<f64>) {
        debug_assert_eq!(mask.len(), self.len());
        self.frozen = Some(mask);
    }

    pub fn prob(&self, unit: usize) -> f64 {
        gate_prob(self.phis()[unit], self.k, self.kind)
    }

    pub fn derivative(&self, unit: usize) -> f64 {
        gate_prob_derivative(self.phis()[unit], self.k, self.kind)
    }

    /// Draws one Uniform(0,1) value per unit (hibernated ones included, so
    /// the stream position does not depend on lifecycle state).
    pub fn draw_uniforms(&mut self) -> Vec<f64> {
        (0..self.len()).map(|_| Open01.sample(&mut self.rng)).collect()
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub(crate) fn restore_rng(&mut self, seed: [u8; 32], stream: u64, word_pos: u128) {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        self.rng = rng;
    }

    pub(crate) fn restore_states(&mut self, states: Vec<UnitState>, frozen: Option<Vec<f64>>) {
        self.states = states;
        self.frozen = frozen;
    }
}

/// Antithetic mask pair `(1[u > g(-phi)], 1[u < g(phi)])`. Hibernated units
/// are 0 in both.
pub fn sample_antithetic(u: &[f64], bank: &GateBank) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != bank.len() {
        return Err(NpnError::usage(format!(
            "{} uniforms for a bank of {} gates",
            u.len(),
            bank.len()
        )));
    }
    let mut plus = vec![0.0; u.len()];
    let mut minus = vec![0.0; u.len()];
    for j in 0..u.len() {
        if !bank.is_active(j) {
            continue;
        }
        let phi = bank.phis()[j];
        let g_pos = gate_prob(phi, bank.k(), bank.kind());
        let g_neg = gate_prob(-phi, bank.k(), bank.kind());
        if u[j] > g_neg {
            plus[j] = 1.0;
        }
        if u[j] < g_pos {
            minus[j] = 1.0;
        }
    }
    Ok((plus, minus))
}

/// `E[z]`: `g(phi)` for active units, 0 for hibernated ones.
pub fn expected_mask(bank: &GateBank) -> Vec<f64> {
    (0..bank.len())
        .map(|j| if bank.is_active(j) { bank.prob(j) } else { 0.0 })
        .collect()
}

/// Inference mask: 0 where `g(phi) <= tau`, else `g(phi)` itself.
pub fn threshold_mask(bank: &GateBank, tau: f64) -> Vec<f64> {
    expected_mask(bank)
        .into_iter()
        .map(|g| if g <= tau { 0.0 } else { g })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(phis: Vec<f64>, k: f64) -> GateBank {
        GateBank::new(phis, GateKind::ScaledSigmoid, k, 7, 0).unwrap()
    }

    #[test]
    fn gate_prob_examples() {
        for kind in [GateKind::ScaledSigmoid, GateKind::HardSigmoid] {
            assert_eq!(gate_prob(0.0, 3.3, kind), 0.5);
            assert_eq!(gate_prob(100.0, 0.0, kind), 0.5);
            assert_eq!(gate_prob(-100.0, 0.0, kind), 0.5);
            assert_eq!(gate_prob(f64::INFINITY, 0.0, kind), 0.5);
        }
        let k = 7.0;
        let g = gate_prob(3.0 / k, k, GateKind::ScaledSigmoid);
        assert!((g - 0.9526).abs() < 1e-4);
        assert_eq!(gate_prob(0.5, 7.0, GateKind::HardSigmoid), 1.0);
    }

    #[test]
    fn hard_sigmoid_derivative_is_zero_at_kinks() {
        let k = 7.0;
        assert_eq!(gate_prob_derivative(0.0, k, GateKind::HardSigmoid), 1.0);
        assert_eq!(gate_prob_derivative(0.5, k, GateKind::HardSigmoid), 0.0);
        assert_eq!(gate_prob_derivative(-0.5, k, GateKind::HardSigmoid), 0.0);
        assert_eq!(gate_prob_derivative(0.9, k, GateKind::HardSigmoid), 0.0);
    }

    #[test]
    fn antithetic_examples() {
        let b = bank(vec![1.7], 0.0);
        let (p, m) = sample_antithetic(&[0.3], &b).unwrap();
        assert_eq!((p[0], m[0]), (0.0, 1.0));

        let b = bank(vec![3.0 / 7.0], K_INFINITY);
        for u in [f64::MIN_POSITIVE, 1e-300, 0.5, 1.0 - f64::EPSILON] {
            let (p, m) = sample_antithetic(&[u], &b).unwrap();
            assert_eq!((p[0], m[0]), (1.0, 1.0));
        }

        let mut b = bank(vec![2.0, 2.0], 1.0);
        b.hibernate(1, 2.0);
        for u in [0.01, 0.5, 0.99] {
            let (p, m) = sample_antithetic(&[u, u], &b).unwrap();
            assert_eq!((p[1], m[1]), (0.0, 0.0));
        }
        assert!(matches!(sample_antithetic(&[0.5], &b), Err(NpnError::Usage(_))));
    }

    #[test]
    fn expected_and_threshold_masks() {
        let b = bank(vec![0.0; 3], 2.0);
        assert_eq!(expected_mask(&b), vec![0.5; 3]);

        let k = 7.0;
        let mut b = bank(vec![3.0 / k, 3.0 / k], k);
        b.hibernate(1, 3.0 / k);
        let e = expected_mask(&b);
        assert!((e[0] - 0.9526).abs() < 1e-4);
        assert_eq!(e[1], 0.0);

        // g values 0.03, 0.97, 0.5 under k = 1
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let b = bank(vec![logit(0.03), logit(0.97), 0.0], 1.0);
        let t = threshold_mask(&b, 0.5);
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 0.97).abs() < 1e-12);
        assert_eq!(t[2], 0.0);
        let g = expected_mask(&b);
        assert_eq!(threshold_mask(&b, 0.0), g);
        assert_eq!(threshold_mask(&b, 1.0), vec![0.0; 3]);
    }

    #[test]
    fn uniform_stream_is_reproducible_and_open() {
        let mut a = bank(vec![0.0; 64], 1.0);
        let mut b = bank(vec![0.0; 64], 1.0);
        let ua = a.draw_uniforms();
        assert_eq!(ua, b.draw_uniforms());
        assert!(ua.iter().all(|&u| u > 0.0 && u < 1.0));
        let mut c = GateBank::new(vec![0.0; 64], GateKind::ScaledSigmoid, 1.0, 7, 1).unwrap();
        assert_ne!(ua, c.draw_uniforms());
    }

    #[test]
    fn marginals_match_gate_probability() {
        // m_minus ~ Bernoulli(g); P(m_plus != m_minus) = 2 min(g, 1-g)
        let phis = vec![-1.5, -0.2, 0.0, 0.4, 2.5];
        let mut b = bank(phis.clone(), 1.0);
        let n = 200_000;
        let mut ones = vec![0usize; phis.len()];
        let mut differ = vec![0usize; phis.len()];
        for _ in 0..n {
            let u = b.draw_uniforms();
            let (p, m) = sample_antithetic(&u, &b).unwrap();
            for j in 0..phis.len() {
                ones[j] += m[j] as usize;
                differ[j] += (p[j] != m[j]) as usize;
            }
        }
        for j in 0..phis.len() {
            let g = gate_prob(phis[j], 1.0, GateKind::ScaledSigmoid);
            let check = |count: usize, p: f64| {
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let mean = count as f64 / n as f64;
                assert!((mean - p).abs() <= 4.0 * se, "mean {mean} vs {p}");
            };
            check(ones[j], g);
            check(differ[j], 2.0 * g.min(1.0 - g));
        }
    }

    proptest! {
        #[test]
        fn antithetic_identity(phi in -50.0f64..50.0, k in 0.0f64..20.0) {
            for kind in [GateKind::ScaledSigmoid, GateKind::HardSigmoid] {
                let s = gate_prob(phi, k, kind) + gate_prob(-phi, k, kind);
                prop_assert_eq!(s, 1.0);
            }
        }

        #[test]
        fn monotone_in_phi(a in -10.0f64..10.0, b in -10.0f64..10.0, k in 0.01f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for kind in [GateKind::ScaledSigmoid, GateKind::HardSigmoid] {
                prop_assert!(gate_prob(lo, k, kind) <= gate_prob(hi, k, kind));
                let g = gate_prob(lo, k, kind);
                prop_assert!((0.0..=1.0).contains(&g));
            }
        }

        #[test]
        fn zero_scale_is_dropout(phi in -1e6f64..1e6) {
            prop_assert_eq!(gate_prob(phi, 0.0, GateKind::ScaledSigmoid), 0.5);
            prop_assert_eq!(gate_prob(phi, 0.0, GateKind::HardSigmoid), 0.5);
        }
    }
}
