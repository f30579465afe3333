//! Shared oracles for the integration suites.
#![allow(dead_code)]

use std::path::Path;

use npn_core::harness::{DatasetKind, ExperimentConfig};
use npn_core::lifecycle::Mode;
use npn_core::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Loss value and reverse-mode gradients of `build` with every input a
/// tracked leaf.
pub fn analytic<F>(build: &F, inputs: &[Tensor]) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss).unwrap();
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, out)
}

fn loss_only<F>(build: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).data()[0]
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose perturbation straddles a relu or pooling kink.
    pub kinks: usize,
    pub worst_rel_err: f64,
}

/// Compares reverse-mode gradients against central differences with step
/// `h`. Relative error uses `max(|a|, |n|, floor)` as the denominator. A
/// single kink inside `[x - h, x + h]` makes the one-sided slopes differ by
/// exactly twice the central-difference error, so a mismatch is attributed
/// to a kink only when that gap is at least the discrepancy; callers bound
/// how many coordinates may be excused this way.
pub fn finite_difference_check<F>(build: &F, inputs: &[Tensor], h: f64, floor: f64, tol: f64) -> Result<FdReport, String>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let (f0, grads) = analytic(build, inputs);
    let mut report = FdReport::default();
    for (t, grad) in grads.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let mut shifted = inputs.to_vec();
            shifted[t].data_mut()[i] += h;
            let fp = loss_only(build, &shifted);
            shifted[t].data_mut()[i] -= 2.0 * h;
            let fm = loss_only(build, &shifted);
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err <= tol {
                report.worst_rel_err = report.worst_rel_err.max(err);
                continue;
            }
            let one_sided_gap = ((fp - f0) - (f0 - fm)).abs() / h;
            if one_sided_gap >= (a - numeric).abs() {
                report.kinks += 1;
                continue;
            }
            return Err(format!(
                "input {t} element {i}: analytic {a:e} vs numeric {numeric:e} (rel err {err:e})"
            ));
        }
    }
    Ok(report)
}

/// Short moons run writing under `root`.
pub fn short_moons_config(name: &str, mode: Mode, root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(DatasetKind::Moons, mode);
    cfg.name = name.to_string();
    cfg.output_root = root.to_path_buf();
    cfg.moons_points = 200;
    cfg.plan.pretrain_epochs = 3;
    cfg.plan.adapt_epochs = 6;
    cfg.plan.finetune_epochs = 3;
    cfg
}
