use std::fmt;
use std::str::FromStr;

use crate::error::{NpnError, Result};
use crate::tensor::Activation;

/// Static description of one layer; parameters are allocated from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Frozen `inputs x outputs` matrix without bias.
    FixedProjection {
        inputs: usize,
        outputs: usize,
        activation: Activation,
        gated: bool,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
        gated: bool,
    },
    /// Square-kernel valid convolution, optionally followed by 2x2 max pooling.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        pool: bool,
        gated: bool,
    },
    /// Parameterless flatten with one gate per flattened element.
    FlattenGate { units: usize },
}

impl LayerSpec {
    pub fn is_gated(&self) -> bool {
        match *self {
            LayerSpec::FixedProjection { gated, .. }
            | LayerSpec::Dense { gated, .. }
            | LayerSpec::Conv2d { gated, .. } => gated,
            LayerSpec::FlattenGate { .. } => true,
        }
    }

    /// Output units: features, filters or flattened elements.
    pub fn units(&self) -> usize {
        match *self {
            LayerSpec::FixedProjection { outputs, .. } | LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            LayerSpec::FlattenGate { units } => units,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Active-unit count for each gated layer, written `7-9-109-30`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub active: Vec<usize>,
}

impl ArchSpec {
    pub fn new(active: Vec<usize>) -> Self {
        ArchSpec { active }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.active.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for ArchSpec {
    type Err = NpnError;

    fn from_str(s: &str) -> Result<Self> {
        let active = s
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| NpnError::config(format!("bad architecture string `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchSpec { active })
    }
}

/// Gate count of each gated layer, in order.
pub fn gate_bounds(layout: &[LayerSpec]) -> Vec<usize> {
    layout.iter().filter(|l| l.is_gated()).map(LayerSpec::units).collect()
}

/// Number of trainable weights whose two endpoint units are both active.
///
/// Biases and fixed projections are not counted. A conv weight counts
/// `active_out * active_in * kernel^2`; a flatten gate replaces the unit count
/// feeding the next dense layer.
pub fn count_params(layout: &[LayerSpec], input_units: usize, arch: &ArchSpec) -> Result<usize> {
    let bounds = gate_bounds(layout);
    if arch.active.len() != bounds.len() {
        return Err(NpnError::usage(format!(
            "architecture {arch} has {} layers, the template gates {}",
            arch.active.len(),
            bounds.len()
        )));
    }
    for (i, (&a, &b)) in arch.active.iter().zip(&bounds).enumerate() {
        if a > b {
            return Err(NpnError::usage(format!(
                "gated layer {i} has {a} active units but only {b} exist"
            )));
        }
    }
    let mut gated = arch.active.iter();
    let mut feeding = input_units;
    let mut total = 0;
    for layer in layout {
        let out = if layer.is_gated() {
            *gated.next().expect("count checked above")
        } else {
            layer.units()
        };
        match *layer {
            LayerSpec::FixedProjection { .. } | LayerSpec::FlattenGate { .. } => {}
            LayerSpec::Dense { .. } => total += feeding * out,
            LayerSpec::Conv2d { kernel, .. } => total += feeding * out * kernel * kernel,
        }
        feeding = out;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_string_round_trip() {
        let a: ArchSpec = "7-9-109-30".parse().unwrap();
        assert_eq!(a.active, vec![7, 9, 109, 30]);
        assert_eq!(a.to_string(), "7-9-109-30");
        assert!("7-x".parse::<ArchSpec>().is_err());
    }
}
