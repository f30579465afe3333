//! The k-driven stage schedule, fine-tune freezing, plateau-triggered
//! expansion, architecture extraction, and the epoch loop tying them together.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arm::EstimatorMode;
use crate::data::{batches, Dataset};
use crate::error::{NpnError, Result};
use crate::gates::{threshold_mask, K_INFINITY};
use crate::net::{accuracy, train_step, ArchSpec, PlasticModel, StepConfig};
use crate::tensor::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sparsify,
    Expand,
    /// Ungated training with all-ones masks.
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sparsify => "sparsify",
            Mode::Expand => "expand",
            Mode::Baseline => "baseline",
        }
    }

    /// Adapt-stage gate scale used when none is given.
    pub fn default_k_adapt(self) -> f64 {
        match self {
            Mode::Sparsify | Mode::Baseline => 7.0,
            Mode::Expand => 0.5,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = NpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsify" => Ok(Mode::Sparsify),
            "expand" => Ok(Mode::Expand),
            "baseline" => Ok(Mode::Baseline),
            other => Err(NpnError::config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Adapt,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Epoch counts and gate scales for the three stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePlan {
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub finetune_epochs: usize,
    pub k_pretrain: f64,
    pub k_adapt: f64,
    pub k_finetune: f64,
    pub mode: Mode,
}

impl StagePlan {
    pub fn new(mode: Mode, pretrain: usize, adapt: usize, finetune: usize) -> Self {
        StagePlan {
            pretrain_epochs: pretrain,
            adapt_epochs: adapt,
            finetune_epochs: finetune,
            k_pretrain: K_INFINITY,
            k_adapt: mode.default_k_adapt(),
            k_finetune: K_INFINITY,
            mode,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.adapt_epochs + self.finetune_epochs
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [
            ("k_pretrain", self.k_pretrain),
            ("k_adapt", self.k_adapt),
            ("k_finetune", self.k_finetune),
        ] {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(NpnError::config(format!("{name} must be finite and >= 0, got {k}")));
            }
        }
        if self.mode != Mode::Baseline && self.k_adapt == 0.0 {
            return Err(NpnError::config("k_adapt must be positive: gate logits are set to 3/k_adapt"));
        }
        if self.total_epochs() == 0 {
            return Err(NpnError::config("plan has no epochs"));
        }
        Ok(())
    }
}

/// Stage containing `epoch` and its gate scale.
pub fn current_stage(plan: &StagePlan, epoch: usize) -> Result<(Stage, f64)> {
    if epoch < plan.pretrain_epochs {
        Ok((Stage::Pretrain, plan.k_pretrain))
    } else if epoch < plan.pretrain_epochs + plan.adapt_epochs {
        Ok((Stage::Adapt, plan.k_adapt))
    } else if epoch < plan.total_epochs() {
        Ok((Stage::Finetune, plan.k_finetune))
    } else {
        Err(NpnError::usage(format!(
            "epoch {epoch} is past the end of a {}-epoch plan",
            plan.total_epochs()
        )))
    }
}

/// Freezes every gate bank to a 0/1 mask: 1 exactly where the threshold mask
/// at `tau` keeps the unit. Frozen banks receive no logit updates and no
/// penalty.
pub fn enter_finetune(model: &mut PlasticModel, tau: f64) {
    for bank in model.banks_mut() {
        if bank.is_frozen() {
            continue;
        }
        let mask = threshold_mask(bank, tau)
            .into_iter()
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        bank.freeze(mask);
    }
}

/// True when the mean of the last `window` entries has not dropped below
/// `(1 - rel_tol)` times the mean of the `window` entries before them.
/// Fewer than `2 * window` entries never count as a plateau.
pub fn detect_plateau(history: &[f64], window: usize, rel_tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&history[n - window..]);
    let previous = mean(&history[n - 2 * window..n - window]);
    recent >= (1.0 - rel_tol) * previous
}

/// Knobs for growing hibernated units during the adapt stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionPolicy {
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub growth_per_event: usize,
    pub upper_bound: ArchSpec,
    pub phi_activate: f64,
    pub phi_hibernate: f64,
}

impl ExpansionPolicy {
    /// Default window 5, tolerance 1e-3, one unit per event, logits `+-3/k_adapt`.
    pub fn new(upper_bound: ArchSpec, k_adapt: f64) -> Self {
        ExpansionPolicy {
            plateau_window: 5,
            plateau_rel_tol: 1e-3,
            growth_per_event: 1,
            upper_bound,
            phi_activate: 3.0 / k_adapt,
            phi_hibernate: -3.0 / k_adapt,
        }
    }
}

/// Hibernates every unit past the first `initial[i]` of gated layer `i`.
pub fn hibernate_beyond(model: &mut PlasticModel, initial: &ArchSpec, phi_hibernate: f64) -> Result<()> {
    if initial.active.len() != model.gated_count() {
        return Err(NpnError::config(format!(
            "initial architecture {initial} does not match {} gated layers",
            model.gated_count()
        )));
    }
    for (bank, &keep) in model.banks_mut().zip(&initial.active) {
        if keep == 0 || keep > bank.len() {
            return Err(NpnError::config(format!(
                "initial width {keep} must be in 1..={}",
                bank.len()
            )));
        }
        for j in keep..bank.len() {
            bank.hibernate(j, phi_hibernate);
        }
    }
    Ok(())
}

/// Whether gated layer `layer` may grow: below its bound and with no active
/// unit at `g <= 0.5`.
fn can_grow(model: &PlasticModel, policy: &ExpansionPolicy, layer: usize) -> bool {
    let bank = model.banks().nth(layer).expect("layer index in range");
    let bound = policy.upper_bound.active.get(layer).copied().unwrap_or(0).min(bank.len());
    let redundant = (0..bank.len()).any(|j| bank.is_active(j) && bank.prob(j) <= 0.5);
    bank.active_count() < bound && !redundant
}

/// On a plateau, wakes up to `growth_per_event` random hibernated units in
/// every layer that may grow. Returns `(gated layer, units woken)`.
pub fn maybe_expand(
    model: &mut PlasticModel,
    policy: &ExpansionPolicy,
    history: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<usize>)> {
    if !detect_plateau(history, policy.plateau_window, policy.plateau_rel_tol) {
        return Vec::new();
    }
    let eligible: Vec<usize> = (0..model.gated_count())
        .filter(|&l| can_grow(model, policy, l))
        .collect();
    let mut events = Vec::new();
    for layer in eligible {
        let bound = policy.upper_bound.active[layer];
        let bank = model.banks_mut().nth(layer).expect("layer index in range");
        let sleeping: Vec<usize> = (0..bank.len()).filter(|&j| !bank.is_active(j)).collect();
        let room = bound.saturating_sub(bank.active_count());
        let take = policy.growth_per_event.min(room).min(sleeping.len());
        if take == 0 {
            continue;
        }
        let mut woken: Vec<usize> = sample(rng, sleeping.len(), take)
            .into_iter()
            .map(|i| sleeping[i])
            .collect();
        woken.sort_unstable();
        for &j in &woken {
            bank.activate(j, policy.phi_activate);
        }
        events.push((layer, woken));
    }
    events
}

/// Plateau reached and no layer can grow any further.
pub fn expansion_terminated(model: &PlasticModel, policy: &ExpansionPolicy, history: &[f64]) -> bool {
    detect_plateau(history, policy.plateau_window, policy.plateau_rel_tol)
        && (0..model.gated_count()).all(|l| !can_grow(model, policy, l))
}

/// Surviving architecture and its size relative to the full template.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalArch {
    pub arch: ArchSpec,
    pub param_count: usize,
    pub full_count: usize,
    pub pruned_fraction: f64,
}

pub fn finalize_architecture(model: &PlasticModel, tau: f64) -> Result<FinalArch> {
    let arch = model.arch(tau);
    let template = model.template();
    let param_count = template.count_params(&arch)?;
    let full_count = template.count_params(&template.full_arch())?;
    Ok(FinalArch {
        arch,
        param_count,
        full_count,
        pruned_fraction: 1.0 - param_count as f64 / full_count as f64,
    })
}

/// One row of training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub k: f64,
    /// Mean over minibatches of data loss plus penalty.
    pub train_loss: f64,
    /// Mean penalty over minibatches.
    pub penalty: f64,
    pub test_acc: f64,
    pub active_counts: Vec<usize>,
    pub param_count: usize,
    /// Fraction of sampled units whose antithetic masks differed.
    pub mask_disagreement: f64,
}

/// Everything the epoch loop needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub plan: StagePlan,
    /// Required in expand mode.
    pub expansion: Option<ExpansionPolicy>,
    /// Penalty weight per gated layer, already scaled.
    pub lambdas: Vec<f64>,
    pub estimator: EstimatorMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub data_seed: u64,
    /// Seed for picking which hibernated units wake.
    pub expansion_seed: u64,
    /// Rows per forward pass during evaluation.
    pub eval_chunk: usize,
}

/// Runs every epoch of the plan, calling `on_epoch` after each one.
pub fn train(
    model: &mut PlasticModel,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&TrainRecord, &PlasticModel) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    cfg.plan.validate()?;
    if cfg.batch_size == 0 {
        return Err(NpnError::config("batch size must be positive"));
    }
    if cfg.plan.mode == Mode::Expand && cfg.expansion.is_none() {
        return Err(NpnError::config("expand mode needs an expansion policy"));
    }
    let gating = model.gating();
    let adam = Adam::with_lr(cfg.learning_rate);
    let step_cfg = StepConfig {
        lambdas: cfg.lambdas.clone(),
        estimator: cfg.estimator,
    };
    let mut expand_rng = ChaCha8Rng::seed_from_u64(cfg.expansion_seed);
    let mut adapt_history = Vec::new();
    let mut expansion_done = false;
    let mut records = Vec::with_capacity(cfg.plan.total_epochs());

    for epoch in 0..cfg.plan.total_epochs() {
        let (stage, k) = current_stage(&cfg.plan, epoch)?;
        if gating && stage == Stage::Finetune && epoch == cfg.plan.pretrain_epochs + cfg.plan.adapt_epochs {
            enter_finetune(model, cfg.tau);
        }
        model.set_k(k);

        let (mut loss_sum, mut pen_sum, mut steps) = (0.0, 0.0, 0usize);
        let (mut disagree, mut sampled) = (0usize, 0usize);
        for (x, y) in batches(train_set, cfg.batch_size, cfg.data_seed, epoch as u64) {
            let s = train_step(model, &x, &y, &step_cfg, &adam)?;
            loss_sum += s.data_loss + s.penalty;
            pen_sum += s.penalty;
            disagree += s.disagreements;
            sampled += s.sampled_units;
            steps += 1;
        }
        let train_loss = loss_sum / steps as f64;
        if !train_loss.is_finite() {
            return Err(NpnError::Numeric(format!("epoch {epoch} loss is {train_loss}")));
        }

        if gating && cfg.plan.mode == Mode::Expand && stage == Stage::Adapt {
            adapt_history.push(train_loss);
            let policy = cfg.expansion.as_ref().expect("checked above");
            if !expansion_done {
                if expansion_terminated(model, policy, &adapt_history) {
                    expansion_done = true;
                } else if !maybe_expand(model, policy, &adapt_history, &mut expand_rng).is_empty() {
                    // the next plateau is judged on post-growth losses only
                    adapt_history.clear();
                }
            }
        }

        let masks = model.eval_masks(cfg.tau);
        let test_acc = accuracy(model, &test_set.inputs, &test_set.labels, &masks, cfg.eval_chunk)?;
        let arch = model.arch(cfg.tau);
        let param_count = model.template().count_params(&arch)?;
        let record = TrainRecord {
            epoch,
            stage,
            k,
            train_loss,
            penalty: pen_sum / steps as f64,
            test_acc,
            active_counts: arch.active,
            param_count,
            mask_disagreement: if sampled > 0 {
                disagree as f64 / sampled as f64
            } else {
                0.0
            },
        };
        on_epoch(&record, model)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateInit;
    use crate::net::{ModelOptions, Template};

    #[test]
    fn stages_follow_the_plan() {
        let plan = StagePlan::new(Mode::Sparsify, 100, 250, 150);
        assert_eq!(current_stage(&plan, 0).unwrap(), (Stage::Pretrain, 5000.0));
        assert_eq!(current_stage(&plan, 99).unwrap(), (Stage::Pretrain, 5000.0));
        assert_eq!(current_stage(&plan, 100).unwrap(), (Stage::Adapt, 7.0));
        assert_eq!(current_stage(&plan, 349).unwrap(), (Stage::Adapt, 7.0));
        assert_eq!(current_stage(&plan, 499).unwrap(), (Stage::Finetune, 5000.0));
        assert!(matches!(current_stage(&plan, 500), Err(NpnError::Usage(_))));
        let expand = StagePlan::new(Mode::Expand, 1, 1, 1);
        assert_eq!(current_stage(&expand, 1).unwrap().1, 0.5);
    }

    #[test]
    fn plateau_rule() {
        let halving: Vec<f64> = (0..20).map(|i| 0.5f64.powi(i)).collect();
        assert!(!detect_plateau(&halving, 5, 1e-3));
        assert!(detect_plateau(&[2.0; 10], 5, 1e-3));
        assert!(!detect_plateau(&[2.0; 9], 5, 1e-3));
        // previous window mean 1.0, recent mean 1 - tol/2
        let mut h = vec![1.0; 5];
        h.extend([1.0 - 5e-4; 5]);
        assert!(detect_plateau(&h, 5, 1e-3));
        let mut h = vec![1.0; 5];
        h.extend([1.0 - 2e-3; 5]);
        assert!(!detect_plateau(&h, 5, 1e-3));
    }

    fn moons_model(k: f64) -> PlasticModel {
        let opts = ModelOptions {
            k,
            init: GateInit::Confident { k_ref: k },
            ..ModelOptions::default()
        };
        PlasticModel::new(Template::MoonsMlp, &opts).unwrap()
    }

    #[test]
    fn finetune_freezes_on_logit_sign() {
        let mut m = moons_model(7.0);
        {
            let b = m.banks_mut().next().unwrap();
            b.set_phi(0, 0.4);
            b.set_phi(1, -0.4);
            b.hibernate(2, 1.0);
        }
        let before = finalize_architecture(&m, 0.5).unwrap();
        enter_finetune(&mut m, 0.5);
        let b = m.banks().next().unwrap();
        let frozen = b.frozen_mask().unwrap();
        assert_eq!(&frozen[..3], &[1.0, 0.0, 0.0]);
        assert!(frozen[3..].iter().all(|&v| v == 1.0));
        assert_eq!(finalize_architecture(&m, 0.5).unwrap(), before);
        assert_eq!(before.arch.active, vec![98, 80]);
    }

    #[test]
    fn untouched_model_is_unpruned() {
        let f = finalize_architecture(&moons_model(7.0), 0.5).unwrap();
        assert_eq!(f.param_count, 8160);
        assert_eq!(f.pruned_fraction, 0.0);
    }

    fn policy() -> ExpansionPolicy {
        ExpansionPolicy::new(ArchSpec::new(vec![5, 4]), 0.5)
    }

    #[test]
    fn expansion_respects_bounds_and_redundancy() {
        let mut m = moons_model(0.5);
        let p = policy();
        hibernate_beyond(&mut m, &ArchSpec::new(vec![3, 4]), p.phi_hibernate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plateau = [1.0; 10];
        assert!(maybe_expand(&mut m, &p, &[1.0, 0.5], &mut rng).is_empty());

        let events = maybe_expand(&mut m, &p, &plateau, &mut rng);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].0, 0);
        let woken = events[0].1[0];
        let b = m.banks().next().unwrap();
        assert!(woken >= 3 && b.is_active(woken));
        assert!((b.prob(woken) - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!(!expansion_terminated(&m, &p, &plateau));

        // a redundant unit blocks growth in its layer
        m.banks_mut().next().unwrap().set_phi(0, -0.9);
        assert!(maybe_expand(&mut m, &p, &plateau, &mut rng).is_empty());
        assert!(expansion_terminated(&m, &p, &plateau));
        assert!(!expansion_terminated(&m, &p, &[1.0, 0.5]));
    }
}
