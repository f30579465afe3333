use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arm::EstimatorMode;
use crate::error::{NpnError, Result};
use crate::gates::{GateInit, GateKind};
use crate::lifecycle::{ExpansionPolicy, Mode, StagePlan};
use crate::net::{ArchSpec, LossKind, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Mnist,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Mnist => "mnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// `phi = +3/k_adapt`.
    Confident,
    /// `g(phi) ~ N(mean, std^2)`.
    Normal { mean: f64, std: f64 },
}

/// Lower bounds checked by `train --check`. Absent bounds are not checked.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckBounds {
    pub min_test_acc: Option<f64>,
    pub min_pruned_fraction: Option<f64>,
    pub min_params: Option<usize>,
    pub max_params: Option<usize>,
    /// Largest adapt-stage parameter count over the initial one.
    pub min_growth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetKind,
    pub template: Template,
    pub mode: Mode,
    pub loss: LossKind,
    pub plan: StagePlan,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub growth_per_event: usize,
    pub upper_bound: Option<ArchSpec>,
    pub initial_arch: Option<ArchSpec>,
    pub lambdas: Vec<f64>,
    /// Divide every penalty weight by the training-set size.
    pub lambda_per_example: bool,
    pub gate_kind: GateKind,
    pub gate_init: InitKind,
    pub estimator: EstimatorMode,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub moons_points: usize,
    pub moons_noise: f64,
    pub mnist_dir: PathBuf,
    /// 0 keeps every image.
    pub train_subset: usize,
    pub test_subset: usize,
    pub seed_model: u64,
    pub seed_gates: u64,
    pub seed_data: u64,
    pub output_root: PathBuf,
    pub snapshot_epochs: Vec<usize>,
    pub eval_chunk: usize,
    pub check: CheckBounds,
}

impl ExperimentConfig {
    /// Defaults for `template`/`mode`; the shipped configs override from here.
    pub fn defaults(dataset: DatasetKind, mode: Mode) -> Self {
        let (template, plan, lambdas, batch) = match (dataset, mode) {
            (DatasetKind::Moons, Mode::Expand) => (
                Template::MoonsMlp,
                StagePlan::new(mode, 100, 1400, 500),
                vec![0.005, 0.005],
                16,
            ),
            (DatasetKind::Moons, _) => (
                Template::MoonsMlp,
                StagePlan::new(mode, 500, 500, 1000),
                vec![0.002, 0.002],
                32,
            ),
            (DatasetKind::Mnist, _) => (
                Template::Lenet5,
                StagePlan::new(mode, 100, 250, 150),
                vec![10.0, 0.5, 0.1, 10.0],
                128,
            ),
        };
        ExperimentConfig {
            name: format!("{}-{}", dataset.as_str(), mode.as_str()),
            dataset,
            template,
            mode,
            loss: LossKind::CrossEntropy,
            plan,
            plateau_window: if dataset == DatasetKind::Moons { 10 } else { 5 },
            plateau_rel_tol: 1e-3,
            growth_per_event: 1,
            upper_bound: None,
            initial_arch: (dataset == DatasetKind::Moons && mode == Mode::Expand).then(|| ArchSpec {
                active: vec![3, 3],
            }),
            lambda_per_example: dataset == DatasetKind::Mnist,
            lambdas,
            gate_kind: GateKind::ScaledSigmoid,
            gate_init: InitKind::Confident,
            estimator: EstimatorMode::Raw,
            tau: 0.5,
            learning_rate: 1e-3,
            batch_size: batch,
            moons_points: 1000,
            moons_noise: 0.1,
            mnist_dir: PathBuf::from("data/mnist"),
            train_subset: 0,
            test_subset: 0,
            seed_model: 0,
            seed_gates: 1,
            seed_data: 2,
            output_root: PathBuf::from("runs"),
            snapshot_epochs: Vec::new(),
            eval_chunk: 1000,
            check: CheckBounds::default(),
        }
    }

    pub fn upper_bound(&self) -> ArchSpec {
        self.upper_bound.clone().unwrap_or_else(|| self.template.full_arch())
    }

    pub fn expansion_policy(&self) -> ExpansionPolicy {
        let mut p = ExpansionPolicy::new(self.upper_bound(), self.plan.k_adapt);
        p.plateau_window = self.plateau_window;
        p.plateau_rel_tol = self.plateau_rel_tol;
        p.growth_per_event = self.growth_per_event;
        p
    }

    pub fn gate_init(&self) -> GateInit {
        match self.gate_init {
            InitKind::Confident => GateInit::Confident {
                k_ref: self.plan.k_adapt,
            },
            InitKind::Normal { mean, std } => GateInit::ProbabilityNormal {
                mean,
                std,
                k_ref: self.plan.k_adapt,
            },
        }
    }

    /// Penalty weights actually used for a training set of `n` items.
    pub fn effective_lambdas(&self, n: usize) -> Vec<f64> {
        if self.lambda_per_example {
            self.lambdas.iter().map(|l| l / n as f64).collect()
        } else {
            self.lambdas.clone()
        }
    }

    /// Run directory: `$NPN_OUT_DIR/<name>` when the variable is set,
    /// otherwise `<output.root>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os("NPN_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_root.clone());
        root.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        let gated = self.template.full_arch().active.len();
        if self.lambdas.len() != gated {
            return Err(NpnError::config(format!(
                "penalty.lambdas has {} entries, template {} has {gated} gated layers",
                self.lambdas.len(),
                self.template
            )));
        }
        let expected = match self.dataset {
            DatasetKind::Moons => Template::MoonsMlp,
            DatasetKind::Mnist => Template::Lenet5,
        };
        if self.template != expected {
            return Err(NpnError::config(format!(
                "dataset {} needs template {expected}",
                self.dataset.as_str()
            )));
        }
        for (key, arch) in [("expansion.upper_bound", &self.upper_bound), ("expansion.initial", &self.initial_arch)] {
            if let Some(a) = arch {
                self.template
                    .count_params(a)
                    .map_err(|e| NpnError::config(format!("{key}: {e}")))?;
            }
        }
        if self.mode == Mode::Expand && self.initial_arch.is_none() {
            return Err(NpnError::config("expand mode needs expansion.initial"));
        }
        if let (Some(init), Some(ub)) = (&self.initial_arch, &self.upper_bound) {
            if init.active.iter().zip(&ub.active).any(|(i, u)| i > u) {
                return Err(NpnError::config("expansion.initial exceeds expansion.upper_bound"));
            }
        }
        if self.batch_size == 0 {
            return Err(NpnError::config("optim.batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NpnError::config("optim.learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(NpnError::config("tau must lie in [0, 1]"));
        }
        if self.dataset == DatasetKind::Moons && (self.moons_points == 0 || self.moons_points % 2 == 1) {
            return Err(NpnError::config("data.points must be a positive even number"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(NpnError::config("name must be a plain directory name"));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NpnError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines; `#` starts a comment. `dataset` and `mode`
    /// pick the defaults every other key overrides.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(NpnError::config(format!("line {}: expected key = value", n + 1)));
            };
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(NpnError::config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        let mut r = Reader { map };
        let dataset = match r.take("dataset").as_deref() {
            None | Some("moons") => DatasetKind::Moons,
            Some("mnist") => DatasetKind::Mnist,
            Some(other) => return Err(NpnError::config(format!("unknown dataset `{other}`"))),
        };
        let mode: Mode = r.parse_or("mode", Mode::Sparsify)?;
        let mut c = Self::defaults(dataset, mode);
        if let Some(v) = r.take("name") {
            c.name = v;
        }
        c.template = r.parse_or("template", c.template)?;
        c.loss = match r.take("loss") {
            Some(v) => LossKind::parse(&v)?,
            None => c.loss,
        };
        c.plan.pretrain_epochs = r.parse_or("stage.pretrain_epochs", c.plan.pretrain_epochs)?;
        c.plan.adapt_epochs = r.parse_or("stage.adapt_epochs", c.plan.adapt_epochs)?;
        c.plan.finetune_epochs = r.parse_or("stage.finetune_epochs", c.plan.finetune_epochs)?;
        c.plan.k_pretrain = r.parse_or("stage.k_pretrain", c.plan.k_pretrain)?;
        c.plan.k_adapt = r.parse_or("stage.k_adapt", c.plan.k_adapt)?;
        c.plan.k_finetune = r.parse_or("stage.k_finetune", c.plan.k_finetune)?;
        c.plateau_window = r.parse_or("expansion.plateau_window", c.plateau_window)?;
        c.plateau_rel_tol = r.parse_or("expansion.plateau_rel_tol", c.plateau_rel_tol)?;
        c.growth_per_event = r.parse_or("expansion.growth_per_event", c.growth_per_event)?;
        if let Some(v) = r.take("expansion.upper_bound") {
            c.upper_bound = Some(v.parse()?);
        }
        if let Some(v) = r.take("expansion.initial") {
            c.initial_arch = Some(v.parse()?);
        }
        if let Some(v) = r.take("penalty.lambdas") {
            c.lambdas = parse_list(&v, "penalty.lambdas")?;
        }
        c.lambda_per_example = r.parse_or("penalty.per_example", c.lambda_per_example)?;
        c.gate_kind = r.parse_or("gate.kind", c.gate_kind)?;
        c.gate_init = match r.take("gate.init").as_deref() {
            None | Some("confident") => InitKind::Confident,
            Some("normal") => InitKind::Normal {
                mean: r.parse_or("gate.init_mean", 0.5)?,
                std: r.parse_or("gate.init_std", 0.01)?,
            },
            Some(other) => return Err(NpnError::config(format!("unknown gate.init `{other}`"))),
        };
        c.estimator = r.parse_or("gate.estimator", c.estimator)?;
        c.tau = r.parse_or("tau", c.tau)?;
        c.learning_rate = r.parse_or("optim.learning_rate", c.learning_rate)?;
        c.batch_size = r.parse_or("optim.batch_size", c.batch_size)?;
        c.moons_points = r.parse_or("data.points", c.moons_points)?;
        c.moons_noise = r.parse_or("data.noise_std", c.moons_noise)?;
        if let Some(v) = r.take("data.mnist_dir") {
            c.mnist_dir = PathBuf::from(v);
        }
        c.train_subset = r.parse_or("data.train_subset", c.train_subset)?;
        c.test_subset = r.parse_or("data.test_subset", c.test_subset)?;
        c.seed_model = r.parse_or("seed.model", c.seed_model)?;
        c.seed_gates = r.parse_or("seed.gates", c.seed_gates)?;
        c.seed_data = r.parse_or("seed.data", c.seed_data)?;
        if let Some(v) = r.take("output.root") {
            c.output_root = PathBuf::from(v);
        }
        if let Some(v) = r.take("output.snapshot_epochs") {
            c.snapshot_epochs = parse_list(&v, "output.snapshot_epochs")?;
        }
        c.eval_chunk = r.parse_or("eval.chunk", c.eval_chunk)?;
        c.check.min_test_acc = r.parse_opt("check.min_test_acc")?;
        c.check.min_pruned_fraction = r.parse_opt("check.min_pruned_fraction")?;
        c.check.min_params = r.parse_opt("check.min_params")?;
        c.check.max_params = r.parse_opt("check.max_params")?;
        c.check.min_growth = r.parse_opt("check.min_growth")?;
        // gate.init_mean / gate.init_std are only meaningful with gate.init = normal
        r.take("gate.init_mean");
        r.take("gate.init_std");
        if let Some(k) = r.map.keys().next() {
            return Err(NpnError::config(format!("unknown key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; [`Self::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("dataset", self.dataset.as_str().into());
        kv("template", self.template.name().into());
        kv("mode", self.mode.as_str().into());
        kv("loss", self.loss.as_str().into());
        kv("stage.pretrain_epochs", self.plan.pretrain_epochs.to_string());
        kv("stage.adapt_epochs", self.plan.adapt_epochs.to_string());
        kv("stage.finetune_epochs", self.plan.finetune_epochs.to_string());
        kv("stage.k_pretrain", format!("{:?}", self.plan.k_pretrain));
        kv("stage.k_adapt", format!("{:?}", self.plan.k_adapt));
        kv("stage.k_finetune", format!("{:?}", self.plan.k_finetune));
        kv("expansion.plateau_window", self.plateau_window.to_string());
        kv("expansion.plateau_rel_tol", format!("{:?}", self.plateau_rel_tol));
        kv("expansion.growth_per_event", self.growth_per_event.to_string());
        if let Some(a) = &self.upper_bound {
            kv("expansion.upper_bound", a.to_string());
        }
        if let Some(a) = &self.initial_arch {
            kv("expansion.initial", a.to_string());
        }
        kv("penalty.lambdas", join(&self.lambdas));
        kv("penalty.per_example", self.lambda_per_example.to_string());
        kv("gate.kind", self.gate_kind.to_string());
        match self.gate_init {
            InitKind::Confident => kv("gate.init", "confident".into()),
            InitKind::Normal { mean, std } => {
                kv("gate.init", "normal".into());
                kv("gate.init_mean", format!("{mean:?}"));
                kv("gate.init_std", format!("{std:?}"));
            }
        }
        kv("gate.estimator", self.estimator.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("optim.learning_rate", format!("{:?}", self.learning_rate));
        kv("optim.batch_size", self.batch_size.to_string());
        kv("data.points", self.moons_points.to_string());
        kv("data.noise_std", format!("{:?}", self.moons_noise));
        kv("data.mnist_dir", self.mnist_dir.display().to_string());
        kv("data.train_subset", self.train_subset.to_string());
        kv("data.test_subset", self.test_subset.to_string());
        kv("seed.model", self.seed_model.to_string());
        kv("seed.gates", self.seed_gates.to_string());
        kv("seed.data", self.seed_data.to_string());
        kv("output.root", self.output_root.display().to_string());
        if !self.snapshot_epochs.is_empty() {
            kv("output.snapshot_epochs", join(&self.snapshot_epochs));
        }
        kv("eval.chunk", self.eval_chunk.to_string());
        let c = &self.check;
        if let Some(v) = c.min_test_acc {
            kv("check.min_test_acc", format!("{v:?}"));
        }
        if let Some(v) = c.min_pruned_fraction {
            kv("check.min_pruned_fraction", format!("{v:?}"));
        }
        if let Some(v) = c.min_params {
            kv("check.min_params", v.to_string());
        }
        if let Some(v) = c.max_params {
            kv("check.max_params", v.to_string());
        }
        if let Some(v) = c.min_growth {
            kv("check.min_growth", format!("{v:?}"));
        }
        o
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| NpnError::config(format!("{key}: bad entry `{}`", p.trim())))
        })
        .collect()
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| NpnError::config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_losslessly() {
        let text = "dataset = moons\nmode = expand\nexpansion.initial = 3-3\n\
                    penalty.lambdas = 0.1, 0.3\ngate.init = normal\ngate.init_std = 0.02\n\
                    output.snapshot_epochs = 99,199\ncheck.min_test_acc = 0.98\nstage.k_adapt = 0.1\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.initial_arch, Some(ArchSpec::new(vec![3, 3])));
        assert_eq!(c.gate_init, InitKind::Normal { mean: 0.5, std: 0.02 });
        assert_eq!(c.plan.k_adapt, 0.1);
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "mode = shrink",
            "unknown.key = 1",
            "penalty.lambdas = 1,2,3",
            "dataset = mnist\nmode = expand",
            "dataset = moons\ntemplate = lenet5",
            "optim.batch_size = 0",
            "name = a\nname = b",
            "no equals sign",
            "expansion.upper_bound = 200-3",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(bad), Err(NpnError::Config(_))),
                "{bad}"
            );
        }
    }
}
