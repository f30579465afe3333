use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layout::{ArchSpec, LayerSpec};
use super::template::Template;
use crate::data::{fixed_projection, InputNorm};
use crate::error::{NpnError, Result};
use crate::gates::{threshold_mask, GateBank, GateInit, GateKind};
use crate::tensor::{Graph, ParamTensor, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Squared error against one-hot targets.
    MeanSquaredError,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::MeanSquaredError => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::MeanSquaredError),
            other => Err(NpnError::config(format!("unknown loss `{other}`"))),
        }
    }
}

/// One layer's parameters and, when gated, its gate bank.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLayer {
    spec: LayerSpec,
    pub(crate) weight: Option<ParamTensor>,
    pub(crate) bias: Option<ParamTensor>,
    pub(crate) gates: Option<GateBank>,
}

impl GatedLayer {
    pub(crate) fn from_parts(
        spec: LayerSpec,
        weight: Option<ParamTensor>,
        bias: Option<ParamTensor>,
        gates: Option<GateBank>,
    ) -> Self {
        GatedLayer {
            spec,
            weight,
            bias,
            gates,
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> Option<&ParamTensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&ParamTensor> {
        self.bias.as_ref()
    }

    pub fn gates(&self) -> Option<&GateBank> {
        self.gates.as_ref()
    }

    pub fn gates_mut(&mut self) -> Option<&mut GateBank> {
        self.gates.as_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    pub gate_kind: GateKind,
    /// Gate scale at construction; the lifecycle overwrites it per stage.
    pub k: f64,
    pub init: GateInit,
    pub model_seed: u64,
    pub gate_seed: u64,
    /// `false` trains with all-ones masks and never touches the gates.
    pub gating: bool,
    pub loss: LossKind,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            gate_kind: GateKind::ScaledSigmoid,
            k: crate::gates::K_INFINITY,
            init: GateInit::confident(7.0),
            model_seed: 0,
            gate_seed: 0,
            gating: true,
            loss: LossKind::CrossEntropy,
        }
    }
}

/// Trainable-parameter handles recorded in one graph.
pub(crate) struct ParamVars {
    pub layer: usize,
    pub weight: Var,
    pub bias: Option<Var>,
}

/// A network whose units are multiplied by per-unit masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PlasticModel {
    template: Template,
    layers: Vec<GatedLayer>,
    loss: LossKind,
    gating: bool,
    input_norm: Option<InputNorm>,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

impl PlasticModel {
    /// Allocates the template at full width. Weights and biases are
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; gate bank `i` draws uniforms from
    /// stream `i` of the gate seed.
    pub fn new(template: Template, opts: &ModelOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.model_seed);
        rng.set_stream(1);
        let mut init_rng = ChaCha8Rng::seed_from_u64(opts.gate_seed);
        init_rng.set_stream(u64::MAX);

        let mut layers = Vec::new();
        let mut stream = 0;
        for spec in template.layout() {
            let (weight, bias) = match spec {
                LayerSpec::FixedProjection { inputs, outputs, .. } => {
                    let w = fixed_projection(opts.model_seed, inputs, outputs);
                    (Some(ParamTensor::new(w)), None)
                }
                LayerSpec::Dense { inputs, outputs, .. } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    (
                        Some(ParamTensor::new(uniform_tensor(&[inputs, outputs], bound, &mut rng))),
                        Some(ParamTensor::new(uniform_tensor(&[outputs], bound, &mut rng))),
                    )
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
                    let shape = [out_channels, in_channels, kernel, kernel];
                    (
                        Some(ParamTensor::new(uniform_tensor(&shape, bound, &mut rng))),
                        Some(ParamTensor::new(uniform_tensor(&[out_channels], bound, &mut rng))),
                    )
                }
                LayerSpec::FlattenGate { .. } => (None, None),
            };
            let gates = if spec.is_gated() {
                let bank = GateBank::initialised(
                    spec.units(),
                    opts.gate_kind,
                    opts.k,
                    opts.init,
                    &mut init_rng,
                    opts.gate_seed,
                    stream,
                )?;
                stream += 1;
                Some(bank)
            } else {
                None
            };
            layers.push(GatedLayer {
                spec,
                weight,
                bias,
                gates,
            });
        }
        Ok(PlasticModel {
            template,
            layers,
            loss: opts.loss,
            gating: opts.gating,
            input_norm: None,
        })
    }

    pub(crate) fn from_parts(
        template: Template,
        layers: Vec<GatedLayer>,
        loss: LossKind,
        gating: bool,
        input_norm: Option<InputNorm>,
    ) -> Self {
        PlasticModel {
            template,
            layers,
            loss,
            gating,
            input_norm,
        }
    }

    pub fn template(&self) -> Template {
        self.template
    }

    pub fn layers(&self) -> &[GatedLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [GatedLayer] {
        &mut self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn gating(&self) -> bool {
        self.gating
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        if let Some(n) = &norm {
            let features: usize = self.template.input_shape().iter().product();
            if n.mean.len() != features || n.std.len() != features {
                return Err(NpnError::config(format!(
                    "input normalisation needs {features} features"
                )));
            }
            if n.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(NpnError::config("input normalisation std must be positive"));
            }
        }
        self.input_norm = norm;
        Ok(())
    }

    pub fn banks(&self) -> impl Iterator<Item = &GateBank> {
        self.layers.iter().filter_map(|l| l.gates.as_ref())
    }

    pub fn banks_mut(&mut self) -> impl Iterator<Item = &mut GateBank> {
        self.layers.iter_mut().filter_map(|l| l.gates.as_mut())
    }

    pub fn gated_count(&self) -> usize {
        self.banks().count()
    }

    pub fn set_k(&mut self, k: f64) {
        self.banks_mut().for_each(|b| b.set_k(k));
    }

    pub fn ones_masks(&self) -> Vec<Vec<f64>> {
        self.banks().map(|b| vec![1.0; b.len()]).collect()
    }

    /// Deterministic inference masks: the frozen mask where set, otherwise
    /// the threshold mask at `tau`. All ones when gating is off.
    pub fn eval_masks(&self, tau: f64) -> Vec<Vec<f64>> {
        if !self.gating {
            return self.ones_masks();
        }
        self.banks()
            .map(|b| match b.frozen_mask() {
                Some(m) => m.to_vec(),
                None => threshold_mask(b, tau),
            })
            .collect()
    }

    /// Surviving units per gated layer under [`Self::eval_masks`].
    pub fn arch(&self, tau: f64) -> ArchSpec {
        ArchSpec::new(
            self.eval_masks(tau)
                .iter()
                .map(|m| m.iter().filter(|&&v| v > 0.0).count())
                .collect(),
        )
    }

    pub fn param_count(&self, tau: f64) -> Result<usize> {
        self.template.count_params(&self.arch(tau))
    }

    /// Checks the batch shape and applies the stored normalisation.
    pub fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        let want = self.template.input_shape();
        if x.rank() != want.len() + 1 || &x.shape()[1..] != want {
            return Err(NpnError::config(format!(
                "input shape {:?} does not match [batch, {want:?}]",
                x.shape()
            )));
        }
        let Some(norm) = &self.input_norm else {
            return Ok(x.clone());
        };
        let mut out = x.clone();
        let features = norm.mean.len();
        for row in out.data_mut().chunks_mut(features) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - norm.mean[j]) / norm.std[j];
            }
        }
        Ok(out)
    }

    fn check_masks(&self, masks: &[Vec<f64>]) -> Result<()> {
        let sizes: Vec<usize> = self.banks().map(GateBank::len).collect();
        if masks.len() != sizes.len() {
            return Err(NpnError::config(format!(
                "{} masks for {} gated layers",
                masks.len(),
                sizes.len()
            )));
        }
        for (i, (m, &n)) in masks.iter().zip(&sizes).enumerate() {
            if m.len() != n {
                return Err(NpnError::config(format!(
                    "mask {i} has {} entries, layer has {n} gates",
                    m.len()
                )));
            }
            if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(NpnError::config(format!("mask {i} has entries outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g`. With `track` the trainable weights
    /// become differentiable leaves and their handles are returned.
    pub(crate) fn record<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        masks: &[Vec<f64>],
        track: bool,
    ) -> Result<(Var, Vec<ParamVars>)> {
        self.check_masks(masks)?;
        let mut masks = masks.iter();
        let mut params = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let trainable = track && layer.spec.is_trainable();
            let leaf = |g: &mut Graph<'a>, p: &'a ParamTensor| {
                if trainable {
                    g.param(&p.value)
                } else {
                    g.constant_ref(&p.value)
                }
            };
            let w = layer.weight.as_ref().map(|p| leaf(g, p));
            let b = layer.bias.as_ref().map(|p| leaf(g, p));
            h = match layer.spec {
                LayerSpec::FixedProjection { activation, .. } => {
                    let y = g.affine(h, w.expect("projection weight"), None)?;
                    g.activate(y, activation)
                }
                LayerSpec::Dense { activation, .. } => {
                    let y = g.affine(h, w.expect("dense weight"), b)?;
                    g.activate(y, activation)
                }
                LayerSpec::Conv2d {
                    stride,
                    activation,
                    pool,
                    ..
                } => {
                    let y = g.conv2d(h, w.expect("conv kernel"), b.expect("conv bias"), stride)?;
                    let y = g.activate(y, activation);
                    if pool {
                        g.max_pool2x2(y)?
                    } else {
                        y
                    }
                }
                LayerSpec::FlattenGate { units } => {
                    let y = g.flatten(h)?;
                    if g.value(y).shape()[1] != units {
                        return Err(NpnError::config(format!(
                            "flatten produced {:?}, gate expects {units}",
                            g.value(y).shape()
                        )));
                    }
                    y
                }
            };
            if layer.gates.is_some() {
                let m = masks.next().expect("mask count checked");
                // an all-ones mask is the identity; skip the copy
                if m.iter().any(|&v| v != 1.0) {
                    let mv = g.constant(Tensor::vector(m.clone()));
                    h = g.mask_units(h, mv)?;
                }
            }
            if trainable {
                if let Some(weight) = w {
                    params.push(ParamVars { layer: i, weight, bias: b });
                }
            }
        }
        Ok((h, params))
    }

    /// Logits for raw (unnormalised) inputs under `masks`.
    pub fn forward(&self, x: &Tensor, masks: &[Vec<f64>]) -> Result<Tensor> {
        let input = self.prepare_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(input);
        let (logits, _) = self.record(&mut g, xv, masks, false)?;
        Ok(g.value(logits).clone())
    }

    /// Loss node for `logits` against `labels`.
    pub(crate) fn loss_node(&self, g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
        match self.loss {
            LossKind::CrossEntropy => g.softmax_cross_entropy(logits, labels),
            LossKind::MeanSquaredError => {
                let classes = self.template.classes();
                let mut onehot = Tensor::zeros(&[labels.len(), classes]);
                for (row, &y) in labels.iter().enumerate() {
                    if y >= classes {
                        return Err(NpnError::config(format!("label {y} out of range")));
                    }
                    onehot.data_mut()[row * classes + y] = 1.0;
                }
                let t = g.constant(onehot);
                g.mean_squared_error(logits, t)
            }
        }
    }

    /// Mean data loss at `masks`.
    pub fn data_loss(&self, x: &Tensor, labels: &[usize], masks: &[Vec<f64>]) -> Result<f64> {
        let input = self.prepare_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(input);
        let (logits, _) = self.record(&mut g, xv, masks, false)?;
        let loss = self.loss_node(&mut g, logits, labels)?;
        Ok(g.value(loss).data()[0])
    }
}

/// Row-wise argmax.
pub fn predict_classes(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `labels` predicted correctly under `masks`, evaluated in
/// chunks of `chunk` rows.
pub fn accuracy(
    model: &PlasticModel,
    x: &Tensor,
    labels: &[usize],
    masks: &[Vec<f64>],
    chunk: usize,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(NpnError::usage("accuracy over an empty set"));
    }
    let chunk = chunk.max(1);
    let mut correct = 0;
    let indices: Vec<usize> = (0..labels.len()).collect();
    for block in indices.chunks(chunk) {
        let xb = x.gather_rows(block);
        let logits = model.forward(&xb, masks)?;
        correct += predict_classes(&logits)
            .iter()
            .zip(block)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}
