//! Stage scheduling, freezing and expansion over real training loops.

mod common;

use common::short_moons_config;
use npn_core::arm::EstimatorMode;
use npn_core::data::{batches, make_moons, split_moons, InputNorm};
use npn_core::gates::{threshold_mask, GateInit};
use npn_core::harness::{build_model, load_data, trainer_config};
use npn_core::lifecycle::{enter_finetune, finalize_architecture, train, Mode, Stage};
use npn_core::net::{train_step, ModelOptions, PlasticModel, StepConfig, Template};
use npn_core::tensor::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phis(model: &PlasticModel) -> Vec<f64> {
    model.banks().flat_map(|b| b.phis().to_vec()).collect()
}

#[test]
fn saturated_scale_freezes_logits_for_whole_epochs() {
    let opts = ModelOptions {
        k: 5000.0,
        init: GateInit::Confident { k_ref: 7.0 },
        ..ModelOptions::default()
    };
    let mut model = PlasticModel::new(Template::MoonsMlp, &opts).unwrap();
    for bank in model.banks_mut() {
        for j in (0..bank.len()).step_by(3) {
            bank.set_phi(j, -3.0 / 7.0);
        }
    }
    let data = make_moons(400, 0.1, 1).unwrap();
    let (train_set, _) = split_moons(&data, 2).unwrap();
    model.set_input_norm(Some(InputNorm::fit(&train_set.inputs).unwrap())).unwrap();
    let before = phis(&model);
    let weights_before = model.layers()[1].weight().unwrap().value.clone();
    let cfg = StepConfig {
        lambdas: vec![0.01, 0.01],
        estimator: EstimatorMode::Raw,
    };
    let adam = Adam::default();
    for epoch in 0..10 {
        for (x, y) in batches(&train_set, 32, 3, epoch) {
            train_step(&mut model, &x, &y, &cfg, &adam).unwrap();
        }
    }
    let drift = before.iter().zip(phis(&model)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert_eq!(drift, 0.0);
    assert_ne!(model.layers()[1].weight().unwrap().value, weights_before);
}

#[test]
fn frozen_support_matches_final_architecture() {
    for seed in 0..10 {
        let opts = ModelOptions {
            k: 7.0,
            model_seed: seed,
            gate_seed: seed,
            ..ModelOptions::default()
        };
        let mut model = PlasticModel::new(Template::Lenet5, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bank in model.banks_mut() {
            for j in 0..bank.len() {
                bank.set_phi(j, rng.random_range(-1.0..1.0));
            }
        }
        let thresholded: Vec<Vec<bool>> = model
            .banks()
            .map(|b| threshold_mask(b, 0.5).iter().map(|&v| v > 0.0).collect())
            .collect();
        let before = finalize_architecture(&model, 0.5).unwrap();
        enter_finetune(&mut model, 0.5);
        model.set_k(5000.0);
        let after = finalize_architecture(&model, 0.5).unwrap();
        assert_eq!(before, after);
        for (bank, want) in model.banks().zip(&thresholded) {
            let frozen: Vec<bool> = bank.frozen_mask().unwrap().iter().map(|&v| v > 0.0).collect();
            assert_eq!(&frozen, want);
        }
    }
}

#[test]
fn stages_run_in_order_and_finetune_is_penalty_free() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_moons_config("stages", Mode::Sparsify, dir.path());
    let (train_set, test_set) = load_data(&cfg).unwrap();
    let mut model = build_model(&cfg, &train_set).unwrap();
    let tcfg = trainer_config(&cfg, train_set.len());
    let mut finetune_phis = Vec::new();
    let records = train(&mut model, &train_set, &test_set, &tcfg, |r, m| {
        if r.stage == Stage::Finetune {
            finetune_phis.push(phis(m));
        }
        Ok(())
    })
    .unwrap();
    let plan = cfg.plan;
    assert_eq!(records.len(), plan.total_epochs());
    let stages: Vec<Stage> = records.iter().map(|r| r.stage).collect();
    let mut want = vec![Stage::Pretrain; plan.pretrain_epochs];
    want.extend(vec![Stage::Adapt; plan.adapt_epochs]);
    want.extend(vec![Stage::Finetune; plan.finetune_epochs]);
    assert_eq!(stages, want);
    for r in &records {
        let k = match r.stage {
            Stage::Pretrain => plan.k_pretrain,
            Stage::Adapt => plan.k_adapt,
            Stage::Finetune => plan.k_finetune,
        };
        assert_eq!(r.k, k);
        if r.stage == Stage::Finetune {
            assert_eq!(r.penalty, 0.0);
            assert_eq!(r.mask_disagreement, 0.0);
        }
    }
    assert!(finetune_phis.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn expansion_only_adds_units_during_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_moons_config("grow", Mode::Expand, dir.path());
    cfg.plan.adapt_epochs = 40;
    cfg.plateau_window = 2;
    let (train_set, test_set) = load_data(&cfg).unwrap();
    let mut model = build_model(&cfg, &train_set).unwrap();
    let start: Vec<usize> = model.banks().map(|b| b.active_count()).collect();
    assert_eq!(start, vec![3, 3]);
    let tcfg = trainer_config(&cfg, train_set.len());
    let mut counts: Vec<(Stage, Vec<usize>)> = Vec::new();
    train(&mut model, &train_set, &test_set, &tcfg, |r, m| {
        counts.push((r.stage, m.banks().map(|b| b.active_count()).collect()));
        Ok(())
    })
    .unwrap();
    for w in counts.windows(2) {
        let grew = w[1].1.iter().zip(&w[0].1).any(|(a, b)| a != b);
        assert!(w[1].1.iter().zip(&w[0].1).all(|(a, b)| a >= b));
        if grew {
            assert_eq!(w[1].0, Stage::Adapt);
        }
    }
    let last = &counts.last().unwrap().1;
    assert!(last.iter().zip(&start).any(|(a, b)| a > b), "no growth: {last:?}");
    assert!(last[0] <= 100 && last[1] <= 80);
}
