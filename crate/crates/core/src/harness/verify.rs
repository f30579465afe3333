use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arm::{arm_data_gradient, brute_force_gradient, EstimatorMode, MAX_ENUMERATED_UNITS};
use crate::error::{NpnError, Result};
use crate::gates::{GateBank, GateKind};

/// Mask objective used by `verify-arm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// `c + sum_i a_i z_i + sum_{i<j} b_ij z_i z_j`, coefficients `N(0, 1)`.
    Quadratic,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub constant: f64,
    pub linear: Vec<f64>,
    /// Row-major upper triangle, `pairs[i * n + j]` for `i < j`.
    pub pairs: Vec<f64>,
}

impl QuadraticObjective {
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || -> f64 { StandardNormal.sample(&mut *rng) };
        let constant = draw();
        let linear = (0..n).map(|_| draw()).collect();
        let mut pairs = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                pairs[i * n + j] = draw();
            }
        }
        QuadraticObjective {
            constant,
            linear,
            pairs,
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let n = self.linear.len();
        let mut v = self.constant;
        for i in 0..n {
            if z[i] == 0.0 {
                continue;
            }
            v += self.linear[i] * z[i];
            for j in i + 1..n {
                v += self.pairs[i * n + j] * z[i] * z[j];
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub kind: GateKind,
    pub k: f64,
    pub samples: usize,
    pub phis: Vec<f64>,
    pub oracle: Vec<f64>,
    /// Monte-Carlo mean, rescaled by `k` for the scaled sigmoid.
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub max_z: f64,
    /// All components within 5 standard errors (sigmoid) or sign-consistent
    /// (hard sigmoid).
    pub passed: bool,
}

impl ArmReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "gate={} k={} samples={}\n{:>4} {:>10} {:>14} {:>14} {:>12} {:>8}\n",
            self.kind, self.k, self.samples, "unit", "phi", "oracle", "mc_mean", "std_err", "z"
        );
        for j in 0..self.phis.len() {
            s += &format!(
                "{:>4} {:>10.4} {:>14.6e} {:>14.6e} {:>12.3e} {:>8.3}\n",
                j, self.phis[j], self.oracle[j], self.mean[j], self.std_err[j], self.z_scores[j]
            );
        }
        match self.kind {
            GateKind::ScaledSigmoid => {
                s += &format!("max |z| = {:.3}\n", self.max_z);
                s += if self.passed { "PASS (all within 5 SE)\n" } else { "FAIL (beyond 5 SE)\n" };
            }
            GateKind::HardSigmoid => {
                s += "hard sigmoid: sign agreement only, magnitudes are not comparable\n";
                s += if self.passed { "PASS (signs agree)\n" } else { "FAIL (sign mismatch)\n" };
            }
        }
        s
    }
}

/// Compares the Monte-Carlo mean of the ARM estimate against exhaustive
/// enumeration for `vars` gates with logits drawn from `U[-2, 2]`.
pub fn cmd_verify_arm(
    vars: usize,
    samples: usize,
    k: f64,
    kind: GateKind,
    seed: u64,
    objective: ObjectiveKind,
) -> Result<ArmReport> {
    if vars == 0 || vars > MAX_ENUMERATED_UNITS {
        return Err(NpnError::usage(format!(
            "--vars must be in 1..={MAX_ENUMERATED_UNITS}"
        )));
    }
    if samples < 2 {
        return Err(NpnError::usage("--samples must be at least 2"));
    }
    if !(k > 0.0) {
        return Err(NpnError::usage("--k must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi_dist = Uniform::new_inclusive(-2.0, 2.0).expect("valid range");
    let phis: Vec<f64> = (0..vars).map(|_| phi_dist.sample(&mut rng)).collect();
    let quad = QuadraticObjective::random(vars, &mut rng);
    let mut f = |z: &[f64]| match objective {
        ObjectiveKind::Quadratic => quad.eval(z),
        ObjectiveKind::Constant => 1.5,
    };
    let mut bank = GateBank::new(phis.clone(), kind, k, seed, 1)?;
    let oracle = brute_force_gradient(&mut f, &bank)?;

    // the scaled-sigmoid phi-gradient is k times the raw estimate
    let mode = match kind {
        GateKind::ScaledSigmoid => EstimatorMode::LogitExact,
        GateKind::HardSigmoid => EstimatorMode::Raw,
    };
    let mut sum = vec![0.0; vars];
    let mut sum_sq = vec![0.0; vars];
    for _ in 0..samples {
        let u = bank.draw_uniforms();
        let g = arm_data_gradient(&mut f, &bank, &u, mode)?;
        for j in 0..vars {
            sum[j] += g[j];
            sum_sq[j] += g[j] * g[j];
        }
    }
    let n = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err: Vec<f64> = (0..vars)
        .map(|j| {
            let var = ((sum_sq[j] - n * mean[j] * mean[j]) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    let z_scores: Vec<f64> = (0..vars)
        .map(|j| {
            let d = mean[j] - oracle[j];
            if std_err[j] > 0.0 {
                d / std_err[j]
            } else if d.abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let max_z = z_scores.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    let passed = match kind {
        GateKind::ScaledSigmoid => max_z <= 5.0,
        GateKind::HardSigmoid => (0..vars).all(|j| {
            // only components with a clearly resolved sign are compared
            oracle[j] == 0.0 || mean[j].abs() <= 5.0 * std_err[j] || mean[j].signum() == oracle[j].signum()
        }),
    };
    Ok(ArmReport {
        kind,
        k,
        samples,
        phis,
        oracle,
        mean,
        std_err,
        z_scores,
        max_z,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_objective_is_all_zero() {
        let r = cmd_verify_arm(4, 1000, 1.0, GateKind::ScaledSigmoid, 0, ObjectiveKind::Constant).unwrap();
        assert!(r.mean.iter().all(|&m| m == 0.0));
        assert!(r.passed);
    }

    #[test]
    fn rejects_oversized_problems() {
        assert!(cmd_verify_arm(21, 10, 1.0, GateKind::ScaledSigmoid, 0, ObjectiveKind::Quadratic).is_err());
        assert!(cmd_verify_arm(3, 10, 0.0, GateKind::ScaledSigmoid, 0, ObjectiveKind::Quadratic).is_err());
    }
}
