//! ARM (augment-reinforce-merge) gradient estimates for gate logits, the
//! analytic penalty gradient, and an exhaustive-enumeration oracle.

use std::fmt;
use std::str::FromStr;

use crate::error::{NpnError, Result};
use crate::gates::{gate_prob, gate_prob_derivative, sample_antithetic, GateBank};

/// Largest number of active units [`brute_force_gradient`] will enumerate.
pub const MAX_ENUMERATED_UNITS: usize = 20;

/// Scaling applied to the antithetic data term.
///
/// The raw estimator `(f(m+) - f(m-)) (u - 1/2)` is unbiased for the gradient
/// with respect to the Bernoulli *logit*. For `g = sigma(k phi)` the logit is
/// `k phi`, so the phi-gradient is `k` times that; `LogitExact` applies the
/// factor. For the hard sigmoid neither mode is the exact phi-gradient, but
/// both point the same way coordinate by coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorMode {
    #[default]
    Raw,
    LogitExact,
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorMode::Raw => "raw",
            EstimatorMode::LogitExact => "logit-exact",
        })
    }
}

impl FromStr for EstimatorMode {
    type Err = NpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EstimatorMode::Raw),
            "logit-exact" | "exact" => Ok(EstimatorMode::LogitExact),
            other => Err(NpnError::config(format!("unknown estimator mode `{other}`"))),
        }
    }
}

/// Objective over binary masks, `f(z)`.
pub trait MaskObjective {
    fn evaluate(&mut self, mask: &[f64]) -> Result<f64>;
}

impl<F: FnMut(&[f64]) -> f64> MaskObjective for F {
    fn evaluate(&mut self, mask: &[f64]) -> Result<f64> {
        Ok(self(mask))
    }
}

/// The per-unit scale factor for `mode`.
pub(crate) fn mode_factor(mode: EstimatorMode, k: f64) -> f64 {
    match mode {
        EstimatorMode::Raw => 1.0,
        EstimatorMode::LogitExact => k,
    }
}

/// One ARM sample from the uniform vector `u`. Entries for hibernated units
/// are 0. When both antithetic masks coincide the result is zero and `f` is
/// not evaluated at all.
pub fn arm_data_gradient<F: MaskObjective + ?Sized>(
    f: &mut F,
    bank: &GateBank,
    u: &[f64],
    mode: EstimatorMode,
) -> Result<Vec<f64>> {
    let (plus, minus) = sample_antithetic(u, bank)?;
    if plus == minus {
        return Ok(vec![0.0; bank.len()]);
    }
    let diff = f.evaluate(&plus)? - f.evaluate(&minus)?;
    Ok(arm_from_difference(diff, bank, u, mode))
}

/// Spreads a known difference `f(m+) - f(m-)` over the units of `bank`.
/// Used when one antithetic pair spans several banks.
pub fn arm_from_difference(diff: f64, bank: &GateBank, u: &[f64], mode: EstimatorMode) -> Vec<f64> {
    let scale = mode_factor(mode, bank.k());
    (0..bank.len())
        .map(|j| {
            if bank.is_active(j) {
                scale * diff * (u[j] - 0.5)
            } else {
                0.0
            }
        })
        .collect()
}

/// `lambda_j * g'(phi_j)`, zero for hibernated units.
pub fn penalty_gradient(bank: &GateBank, lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != bank.len() {
        return Err(NpnError::usage(format!(
            "{} lambdas for a bank of {} gates",
            lambda.len(),
            bank.len()
        )));
    }
    Ok((0..bank.len())
        .map(|j| {
            if bank.is_active(j) && lambda[j] != 0.0 {
                lambda[j] * bank.derivative(j)
            } else {
                0.0
            }
        })
        .collect())
}

/// Exact `d/dphi E_{z ~ Ber(g(phi))}[f(z)]` by enumerating every mask over
/// the active units. Hibernated units stay 0 in every mask and get gradient 0.
pub fn brute_force_gradient<F: MaskObjective + ?Sized>(f: &mut F, bank: &GateBank) -> Result<Vec<f64>> {
    let active: Vec<usize> = (0..bank.len()).filter(|&j| bank.is_active(j)).collect();
    let v = active.len();
    if v > MAX_ENUMERATED_UNITS {
        return Err(NpnError::usage(format!(
            "brute-force enumeration over {v} active units exceeds the bound of {MAX_ENUMERATED_UNITS}"
        )));
    }
    let probs: Vec<f64> = active
        .iter()
        .map(|&j| gate_prob(bank.phis()[j], bank.k(), bank.kind()))
        .collect();
    let slopes: Vec<f64> = active
        .iter()
        .map(|&j| gate_prob_derivative(bank.phis()[j], bank.k(), bank.kind()))
        .collect();

    let mut grad = vec![0.0; bank.len()];
    let mut mask = vec![0.0; bank.len()];
    for bits in 0u64..(1u64 << v) {
        for (i, &j) in active.iter().enumerate() {
            mask[j] = ((bits >> i) & 1) as f64;
        }
        let value = f.evaluate(&mask)?;
        // d/dphi_i prod_l p_l^z_l (1-p_l)^(1-z_l) = (+-) p'_i prod_{l != i} (...)
        for (i, &j) in active.iter().enumerate() {
            let mut weight = if (bits >> i) & 1 == 1 { slopes[i] } else { -slopes[i] };
            if weight == 0.0 {
                continue;
            }
            for (l, &p) in probs.iter().enumerate() {
                if l != i {
                    weight *= if (bits >> l) & 1 == 1 { p } else { 1.0 - p };
                }
            }
            grad[j] += weight * value;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{GateKind, K_INFINITY};

    fn bank(phis: Vec<f64>, k: f64, kind: GateKind) -> GateBank {
        GateBank::new(phis, kind, k, 11, 0).unwrap()
    }

    #[test]
    fn constant_objective_gives_zero() {
        let mut b = bank(vec![0.3, -0.7, 1.1], 1.0, GateKind::ScaledSigmoid);
        let mut f = |_: &[f64]| 4.2;
        for _ in 0..50 {
            let u = b.draw_uniforms();
            let g = arm_data_gradient(&mut f, &b, &u, EstimatorMode::Raw).unwrap();
            assert_eq!(g, vec![0.0; 3]);
        }
        for g in brute_force_gradient(&mut f, &b).unwrap() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn brute_force_small_cases() {
        let b = bank(vec![0.0], 1.0, GateKind::ScaledSigmoid);
        let mut f = |z: &[f64]| z[0];
        let g = brute_force_gradient(&mut f, &b).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15);

        let b = bank(vec![0.0, 0.0], 1.0, GateKind::ScaledSigmoid);
        let mut f = |z: &[f64]| z[0] * z[1];
        let g = brute_force_gradient(&mut f, &b).unwrap();
        assert!((g[0] - 0.125).abs() < 1e-15 && (g[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn brute_force_refuses_large_banks() {
        let b = bank(vec![0.0; MAX_ENUMERATED_UNITS + 1], 1.0, GateKind::ScaledSigmoid);
        let mut f = |_: &[f64]| 0.0;
        assert!(matches!(brute_force_gradient(&mut f, &b), Err(NpnError::Usage(_))));
        let mut b = b;
        b.hibernate(0, -1.0);
        assert!(brute_force_gradient(&mut f, &b).is_ok());
    }

    fn mc_mean(phi: f64, k: f64, n: usize) -> (f64, f64) {
        let mut b = bank(vec![phi], k, GateKind::ScaledSigmoid);
        let mut f = |z: &[f64]| z[0];
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let u = b.draw_uniforms();
            let g = arm_data_gradient(&mut f, &b, &u, EstimatorMode::Raw).unwrap()[0];
            s += g;
            s2 += g * g;
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn single_unit_identity_objective_matches_slope() {
        // oracle: d/dphi E[z] = sigma'(phi)
        let oracle = |phi: f64| {
            let b = bank(vec![phi], 1.0, GateKind::ScaledSigmoid);
            brute_force_gradient(&mut |z: &[f64]| z[0], &b).unwrap()[0]
        };
        let (mean, se) = mc_mean(0.0, 1.0, 100_000);
        assert!((oracle(0.0) - 0.25).abs() < 1e-15);
        assert!((mean - 0.25).abs() <= 4.0 * se, "{mean} +- {se}");

        let expected = oracle(10.0);
        assert!((expected - 4.5396e-5).abs() < 1e-8);
        let (mean, se) = mc_mean(10.0, 1.0, 100_000);
        assert!((mean - expected).abs() <= 4.0 * se.max(1e-12), "{mean} +- {se}");
    }

    #[test]
    fn logit_exact_scales_by_k() {
        let mut b = bank(vec![0.2, -0.4], 7.0, GateKind::ScaledSigmoid);
        let mut f = |z: &[f64]| 2.0 * z[0] - z[1] + z[0] * z[1];
        for _ in 0..20 {
            let u = b.draw_uniforms();
            let lit = arm_data_gradient(&mut f, &b, &u, EstimatorMode::Raw).unwrap();
            let ex = arm_data_gradient(&mut f, &b, &u, EstimatorMode::LogitExact).unwrap();
            for j in 0..2 {
                assert_eq!(ex[j], 7.0 * lit[j]);
            }
        }
    }

    #[test]
    fn coinciding_masks_skip_evaluation() {
        let b = bank(vec![3.0 / 7.0; 4], K_INFINITY, GateKind::ScaledSigmoid);
        let mut calls = 0;
        let g = {
            let mut f = |z: &[f64]| {
                calls += 1;
                z.iter().sum::<f64>()
            };
            arm_data_gradient(&mut f, &b, &[0.1, 0.4, 0.6, 0.9], EstimatorMode::Raw).unwrap()
        };
        assert_eq!(g, vec![0.0; 4]);
        assert_eq!(calls, 0);
        let f = |z: &[f64]| z.iter().sum::<f64>();
        // evaluating both masks anyway gives an identically zero difference
        let (p, m) = sample_antithetic(&[0.1, 0.4, 0.6, 0.9], &b).unwrap();
        assert_eq!(f(&p) - f(&m), 0.0);
    }

    #[test]
    fn penalty_gradient_examples() {
        let b = bank(vec![0.0], 1.0, GateKind::ScaledSigmoid);
        assert_eq!(penalty_gradient(&b, &[1.0]).unwrap(), vec![0.25]);
        let b = bank(vec![0.0], 7.0, GateKind::HardSigmoid);
        assert_eq!(penalty_gradient(&b, &[1.0]).unwrap(), vec![1.0]);
        let b = bank(vec![0.3, -2.0], 1.0, GateKind::ScaledSigmoid);
        assert_eq!(penalty_gradient(&b, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let mut b = bank(vec![3.0 / 7.0, -3.0 / 7.0, 0.0], K_INFINITY, GateKind::ScaledSigmoid);
        let g = penalty_gradient(&b, &[1.0; 3]).unwrap();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        b.hibernate(2, 0.0);
        assert_eq!(penalty_gradient(&b, &[1.0; 3]).unwrap()[2], 0.0);
        assert!(penalty_gradient(&b, &[1.0]).is_err());
    }
}
