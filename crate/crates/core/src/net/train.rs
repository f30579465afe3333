use super::model::PlasticModel;
use crate::arm::{arm_from_difference, penalty_gradient, EstimatorMode};
use crate::error::{NpnError, Result};
use crate::gates::{sample_antithetic, GateBank};
use crate::tensor::{Adam, Graph, Tensor};

/// Settings for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    /// Penalty weight per gated layer.
    pub lambdas: Vec<f64>,
    pub estimator: EstimatorMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Data loss at the sampled mask the weights were trained through.
    pub data_loss: f64,
    pub penalty: f64,
    /// Units whose two antithetic masks differed.
    pub disagreements: usize,
    /// Units that were sampled (active and not frozen).
    pub sampled_units: usize,
}

/// `sum_layers lambda_l * sum_{active j} g(phi_j)` over banks still learning.
pub fn penalty(model: &PlasticModel, lambdas: &[f64]) -> Result<f64> {
    check_lambdas(model, lambdas)?;
    if !model.gating() {
        return Ok(0.0);
    }
    Ok(model
        .banks()
        .zip(lambdas)
        .filter(|(b, _)| !b.is_frozen())
        .map(|(b, &l)| {
            if l == 0.0 {
                return 0.0;
            }
            l * (0..b.len()).filter(|&j| b.is_active(j)).map(|j| b.prob(j)).sum::<f64>()
        })
        .sum())
}

/// `(data loss at masks, penalty)`.
pub fn l0_objective(
    model: &PlasticModel,
    x: &Tensor,
    labels: &[usize],
    masks: &[Vec<f64>],
    lambdas: &[f64],
) -> Result<(f64, f64)> {
    Ok((model.data_loss(x, labels, masks)?, penalty(model, lambdas)?))
}

fn check_lambdas(model: &PlasticModel, lambdas: &[f64]) -> Result<()> {
    if lambdas.len() != model.gated_count() {
        return Err(NpnError::config(format!(
            "{} penalty weights for {} gated layers",
            lambdas.len(),
            model.gated_count()
        )));
    }
    Ok(())
}

/// Antithetic draw for one bank: `(u, plus, minus)`. Frozen banks use their
/// fixed mask for both and consume no uniforms.
fn draw_bank(bank: &mut GateBank) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    if let Some(m) = bank.frozen_mask() {
        let m = m.to_vec();
        return Ok((None, m.clone(), m));
    }
    let u = bank.draw_uniforms();
    let (plus, minus) = sample_antithetic(&u, bank)?;
    Ok((Some(u), plus, minus))
}

/// One joint update of weights and gate logits on a minibatch.
///
/// Weights are trained by backprop through the `minus` mask (an exact
/// Bernoulli sample). Gate logits get the ARM data term, computed from one
/// extra forward pass at the `plus` mask when it differs, plus the penalty
/// gradient. Adam updates both.
pub fn train_step(
    model: &mut PlasticModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &StepConfig,
    adam: &Adam,
) -> Result<StepStats> {
    check_lambdas(model, &cfg.lambdas)?;
    let gating = model.gating();
    let mut draws = Vec::new();
    if gating {
        for bank in model.banks_mut() {
            draws.push(draw_bank(bank)?);
        }
    }
    let (minus, plus): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if gating {
        draws.iter().map(|(_, p, m)| (m.clone(), p.clone())).unzip()
    } else {
        (model.ones_masks(), model.ones_masks())
    };
    let disagreements: usize = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| p.iter().zip(m).filter(|(a, b)| a != b).count())
        .sum();
    let sampled_units: usize = if gating {
        model
            .banks()
            .filter(|b| !b.is_frozen())
            .map(GateBank::active_count)
            .sum()
    } else {
        0
    };

    let input = model.prepare_input(x)?;

    // weight gradients through the minus mask
    let (loss_minus, weight_grads) = {
        let mut g = Graph::new();
        let xv = g.constant_ref(&input);
        let (logits, params) = model.record(&mut g, xv, &minus, true)?;
        let loss = model.loss_node(&mut g, logits, labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(NpnError::Numeric(format!("data loss became {value}")));
        }
        let mut grads = g.backward(loss)?;
        let collected: Vec<(usize, Option<Tensor>, Option<Tensor>)> = params
            .into_iter()
            .map(|p| (p.layer, grads.take(p.weight), p.bias.and_then(|b| grads.take(b))))
            .collect();
        (value, collected)
    };

    let penalty_value = penalty(model, &cfg.lambdas)?;

    // gate logit gradients
    let mut gate_grads: Vec<Option<Vec<f64>>> = Vec::new();
    if gating {
        let diff = if disagreements > 0 {
            let loss_plus = model.data_loss(x, labels, &plus)?;
            if !loss_plus.is_finite() {
                return Err(NpnError::Numeric(format!("data loss became {loss_plus}")));
            }
            loss_plus - loss_minus
        } else {
            0.0
        };
        for ((bank, (u, _, _)), &lambda) in model.banks().zip(&draws).zip(&cfg.lambdas) {
            let Some(u) = u else {
                gate_grads.push(None);
                continue;
            };
            let mut grad = if diff == 0.0 {
                vec![0.0; bank.len()]
            } else {
                arm_from_difference(diff, bank, u, cfg.estimator)
            };
            let pen = penalty_gradient(bank, &vec![lambda; bank.len()])?;
            grad.iter_mut().zip(&pen).for_each(|(g, p)| *g += p);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(NpnError::Numeric("non-finite gate gradient".into()));
            }
            gate_grads.push(Some(grad));
        }
    }

    for (layer, wg, bg) in weight_grads {
        let l = &mut model.layers_mut()[layer];
        for (param, grad) in [(l.weight.as_mut(), wg), (l.bias.as_mut(), bg)] {
            let Some(param) = param else { continue };
            param.zero_grad();
            if let Some(grad) = grad {
                if !grad.is_finite() {
                    return Err(NpnError::Numeric("non-finite weight gradient".into()));
                }
                param.accumulate(&grad)?;
            }
            adam.step(param);
        }
    }
    for (bank, grad) in model.banks_mut().zip(gate_grads) {
        let Some(grad) = grad else { continue };
        bank.phi.zero_grad();
        bank.phi.accumulate(&Tensor::vector(grad))?;
        adam.step(&mut bank.phi);
    }

    Ok(StepStats {
        data_loss: loss_minus,
        penalty: penalty_value,
        disagreements,
        sampled_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{GateInit, K_INFINITY};
    use crate::net::{ModelOptions, Template};

    fn moons_batch() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_rows(&[
            vec![0.1, 0.9],
            vec![-0.8, 0.3],
            vec![1.2, -0.4],
            vec![1.9, 0.2],
        ]);
        (x, vec![0, 0, 1, 1])
    }

    fn model(k: f64, init: GateInit) -> PlasticModel {
        let opts = ModelOptions {
            k,
            init,
            model_seed: 3,
            gate_seed: 4,
            ..ModelOptions::default()
        };
        PlasticModel::new(Template::MoonsMlp, &opts).unwrap()
    }

    #[test]
    fn saturated_gates_do_not_move() {
        let mut m = model(K_INFINITY, GateInit::Confident { k_ref: 7.0 });
        let before: Vec<Vec<f64>> = m.banks().map(|b| b.phis().to_vec()).collect();
        let w0 = m.layers()[1].weight().unwrap().value.clone();
        let (x, y) = moons_batch();
        let cfg = StepConfig {
            lambdas: vec![0.1, 0.1],
            estimator: EstimatorMode::Raw,
        };
        for _ in 0..5 {
            let s = train_step(&mut m, &x, &y, &cfg, &Adam::default()).unwrap();
            assert_eq!(s.disagreements, 0);
        }
        let after: Vec<Vec<f64>> = m.banks().map(|b| b.phis().to_vec()).collect();
        assert_eq!(before, after);
        assert_ne!(w0, m.layers()[1].weight().unwrap().value);
    }

    #[test]
    fn penalty_arithmetic() {
        let mut m = model(1.0, GateInit::Confident { k_ref: 1.0 / 3.0 });
        assert_eq!(penalty(&m, &[0.0, 0.0]).unwrap(), 0.0);
        for b in m.banks_mut() {
            for j in 1..b.len() {
                b.hibernate(j, -9.0);
            }
            b.set_phi(0, 3.0);
        }
        let p = penalty(&m, &[2.0, 0.0]).unwrap();
        assert!((p - 2.0 * 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!(penalty(&m, &[1.0]).is_err());
    }

    #[test]
    fn baseline_ignores_gates() {
        let opts = ModelOptions {
            gating: false,
            k: 0.0,
            ..ModelOptions::default()
        };
        let mut m = PlasticModel::new(Template::MoonsMlp, &opts).unwrap();
        let (x, y) = moons_batch();
        let cfg = StepConfig {
            lambdas: vec![1.0, 1.0],
            estimator: EstimatorMode::Raw,
        };
        let s = train_step(&mut m, &x, &y, &cfg, &Adam::default()).unwrap();
        assert_eq!(s.penalty, 0.0);
        assert_eq!(s.disagreements, 0);
        assert!(m.banks().all(|b| b.phi.steps() == 0));
    }
}
