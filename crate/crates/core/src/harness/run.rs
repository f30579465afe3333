use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DatasetKind, ExperimentConfig};
use crate::data::{make_moons, mnist_load, split_moons, Dataset, InputNorm, Split};
use crate::error::{NpnError, Result};
use crate::gates::expected_mask;
use crate::lifecycle::{
    finalize_architecture, hibernate_beyond, train, FinalArch, Mode, Stage, TrainRecord, TrainerConfig,
};
use crate::net::{save_checkpoint, ModelOptions, PlasticModel};

pub const METRICS_HEADER: &str =
    "epoch,stage,k,train_loss,penalty,test_acc,active_counts,param_count,mask_disagreement";

/// Train and test sets for `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Moons => {
            let all = make_moons(cfg.moons_points, cfg.moons_noise, cfg.seed_data)?;
            split_moons(&all, cfg.seed_data.wrapping_add(1))
        }
        DatasetKind::Mnist => {
            let dir = &cfg.mnist_dir;
            let mut train = mnist_load(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let mut test = mnist_load(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            if cfg.train_subset > 0 {
                train = train.head(cfg.train_subset);
            }
            if cfg.test_subset > 0 {
                test = test.head(cfg.test_subset);
            }
            train.split = Split::Train;
            test.split = Split::Test;
            Ok((train, test))
        }
    }
}

/// Freshly initialised model for `cfg`, standardised on `train` for moons
/// and shrunk to the initial architecture in expand mode.
pub fn build_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<PlasticModel> {
    let opts = ModelOptions {
        gate_kind: cfg.gate_kind,
        k: cfg.plan.k_pretrain,
        init: cfg.gate_init(),
        model_seed: cfg.seed_model,
        gate_seed: cfg.seed_gates,
        gating: cfg.mode != Mode::Baseline,
        loss: cfg.loss,
    };
    let mut model = PlasticModel::new(cfg.template, &opts)?;
    if cfg.dataset == DatasetKind::Moons {
        model.set_input_norm(Some(InputNorm::fit(&train.inputs)?))?;
    }
    if cfg.mode == Mode::Expand {
        let initial = cfg.initial_arch.as_ref().expect("validated");
        hibernate_beyond(&mut model, initial, cfg.expansion_policy().phi_hibernate)?;
    }
    Ok(model)
}

pub fn trainer_config(cfg: &ExperimentConfig, n_train: usize) -> TrainerConfig {
    TrainerConfig {
        plan: cfg.plan,
        expansion: (cfg.mode == Mode::Expand).then(|| cfg.expansion_policy()),
        lambdas: cfg.effective_lambdas(n_train),
        estimator: cfg.estimator,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        tau: cfg.tau,
        data_seed: cfg.seed_data.wrapping_add(2),
        expansion_seed: cfg.seed_gates.wrapping_add(0x9e37_79b9),
        eval_chunk: cfg.eval_chunk,
    }
}

pub fn metrics_row(r: &TrainRecord) -> String {
    let counts: Vec<String> = r.active_counts.iter().map(usize::to_string).collect();
    format!(
        "{},{},{:?},{:?},{:?},{:?},{},{},{:?}",
        r.epoch,
        r.stage,
        r.k,
        r.train_loss,
        r.penalty,
        r.test_acc,
        counts.join(";"),
        r.param_count,
        r.mask_disagreement
    )
}

/// Everything a finished run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<TrainRecord>,
    pub final_arch: FinalArch,
    pub final_test_acc: f64,
    /// `g(phi)` of active units per gated layer at the end of the adapt stage.
    pub adapt_gate_values: Option<Vec<Vec<f64>>>,
    pub check_failures: Vec<String>,
}

#[derive(Serialize)]
struct ArchSummary<'a> {
    name: &'a str,
    template: &'a str,
    mode: &'a str,
    arch: String,
    active_counts: &'a [usize],
    param_count: usize,
    full_param_count: usize,
    pruned_fraction: f64,
    test_acc: f64,
    epochs: usize,
    seed_model: u64,
    seed_gates: u64,
    seed_data: u64,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| NpnError::io(path, e))
}

fn active_gate_values(model: &PlasticModel) -> Vec<Vec<f64>> {
    model
        .banks()
        .map(|b| {
            expected_mask(b)
                .into_iter()
                .enumerate()
                .filter(|&(j, _)| b.is_active(j))
                .map(|(_, g)| g)
                .collect()
        })
        .collect()
}

/// Runs `cfg` end to end, writing `metrics.csv`, `checkpoint.npn`,
/// `arch.json` and `config.txt` into the run directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| NpnError::io(&run_dir, e))?;
    write(&run_dir.join("config.txt"), &cfg.to_text())?;

    let (train_set, test_set) = load_data(cfg)?;
    let mut model = build_model(cfg, &train_set)?;
    let tcfg = trainer_config(cfg, train_set.len());

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let adapt_end = cfg.plan.pretrain_epochs + cfg.plan.adapt_epochs;
    let mut adapt_gate_values = None;
    let metrics_path = run_dir.join("metrics.csv");
    let result = train(&mut model, &train_set, &test_set, &tcfg, |rec, m| {
        let _ = writeln!(csv, "{}", metrics_row(rec));
        if rec.stage == Stage::Adapt && rec.epoch + 1 == adapt_end {
            adapt_gate_values = Some(active_gate_values(m));
        }
        if cfg.snapshot_epochs.contains(&rec.epoch) {
            save_checkpoint(m, &run_dir.join(format!("checkpoint-epoch{:04}.npn", rec.epoch)))?;
        }
        Ok(())
    });
    // keep whatever rows were produced, even on failure
    write(&metrics_path, &csv)?;
    let records = result?;

    save_checkpoint(&model, &run_dir.join("checkpoint.npn"))?;
    let final_arch = finalize_architecture(&model, cfg.tau)?;
    let final_test_acc = records.last().map_or(0.0, |r| r.test_acc);
    let summary = ArchSummary {
        name: &cfg.name,
        template: cfg.template.name(),
        mode: cfg.mode.as_str(),
        arch: final_arch.arch.to_string(),
        active_counts: &final_arch.arch.active,
        param_count: final_arch.param_count,
        full_param_count: final_arch.full_count,
        pruned_fraction: final_arch.pruned_fraction,
        test_acc: final_test_acc,
        epochs: records.len(),
        seed_model: cfg.seed_model,
        seed_gates: cfg.seed_gates,
        seed_data: cfg.seed_data,
    };
    let json = serde_json::to_string_pretty(&summary).expect("plain data serialises");
    write(&run_dir.join("arch.json"), &(json + "\n"))?;

    let mut outcome = RunOutcome {
        run_dir,
        records,
        final_arch,
        final_test_acc,
        adapt_gate_values,
        check_failures: Vec::new(),
    };
    outcome.check_failures = check_outcome(cfg, &outcome);
    Ok(outcome)
}

/// Largest adapt-stage parameter count divided by `start`.
pub fn adapt_growth(records: &[TrainRecord], start: usize) -> Option<f64> {
    let max = records
        .iter()
        .filter(|r| r.stage == Stage::Adapt)
        .map(|r| r.param_count)
        .max()?;
    (start > 0).then(|| max as f64 / start as f64)
}

/// Human-readable descriptions of every violated `check.*` bound.
pub fn check_outcome(cfg: &ExperimentConfig, out: &RunOutcome) -> Vec<String> {
    let c = &cfg.check;
    let mut fails = Vec::new();
    if let Some(min) = c.min_test_acc {
        if out.final_test_acc < min {
            fails.push(format!("test accuracy {:.4} < {min}", out.final_test_acc));
        }
    }
    if let Some(min) = c.min_pruned_fraction {
        if out.final_arch.pruned_fraction < min {
            fails.push(format!(
                "pruned fraction {:.4} < {min}",
                out.final_arch.pruned_fraction
            ));
        }
    }
    if let Some(min) = c.min_params {
        if out.final_arch.param_count < min {
            fails.push(format!("parameter count {} < {min}", out.final_arch.param_count));
        }
    }
    if let Some(max) = c.max_params {
        if out.final_arch.param_count > max {
            fails.push(format!("parameter count {} > {max}", out.final_arch.param_count));
        }
    }
    if let Some(min) = c.min_growth {
        let start = match &cfg.initial_arch {
            Some(a) => cfg.template.count_params(a).unwrap_or(0),
            None => out.records.first().map_or(0, |r| r.param_count),
        };
        let g = adapt_growth(&out.records, start).unwrap_or(0.0);
        if g < min {
            fails.push(format!("adapt-stage growth {g:.2}x < {min}x"));
        }
    }
    fails
}
