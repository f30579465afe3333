use std::fmt;
use std::str::FromStr;

use super::layout::{gate_bounds, ArchSpec, LayerSpec};
use crate::error::{NpnError, Result};
use crate::tensor::Activation;

/// The two network shapes used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// `2 -> 100 (fixed random projection, gated) -> 80 (gated) -> 2`.
    MoonsMlp,
    /// conv 20 -> conv 50 -> flatten 800 -> fc 500 -> 10, every stage gated.
    Lenet5,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::MoonsMlp => "moons-mlp",
            Template::Lenet5 => "lenet5",
        }
    }

    pub fn layout(self) -> Vec<LayerSpec> {
        match self {
            Template::MoonsMlp => vec![
                LayerSpec::FixedProjection {
                    inputs: 2,
                    outputs: 100,
                    activation: Activation::Relu,
                    gated: true,
                },
                LayerSpec::Dense {
                    inputs: 100,
                    outputs: 80,
                    activation: Activation::Relu,
                    gated: true,
                },
                LayerSpec::Dense {
                    inputs: 80,
                    outputs: 2,
                    activation: Activation::Identity,
                    gated: false,
                },
            ],
            Template::Lenet5 => vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 20,
                    kernel: 5,
                    stride: 1,
                    activation: Activation::Relu,
                    pool: true,
                    gated: true,
                },
                LayerSpec::Conv2d {
                    in_channels: 20,
                    out_channels: 50,
                    kernel: 5,
                    stride: 1,
                    activation: Activation::Relu,
                    pool: true,
                    gated: true,
                },
                LayerSpec::FlattenGate { units: 800 },
                LayerSpec::Dense {
                    inputs: 800,
                    outputs: 500,
                    activation: Activation::Relu,
                    gated: true,
                },
                LayerSpec::Dense {
                    inputs: 500,
                    outputs: 10,
                    activation: Activation::Identity,
                    gated: false,
                },
            ],
        }
    }

    /// Per-example input shape (without the batch axis).
    pub fn input_shape(self) -> &'static [usize] {
        match self {
            Template::MoonsMlp => &[2],
            Template::Lenet5 => &[1, 28, 28],
        }
    }

    /// Units feeding the first layer, as seen by the parameter count.
    pub fn input_units(self) -> usize {
        match self {
            Template::MoonsMlp => 2,
            Template::Lenet5 => 1,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Template::MoonsMlp => 2,
            Template::Lenet5 => 10,
        }
    }

    /// Every gate active.
    pub fn full_arch(self) -> ArchSpec {
        ArchSpec::new(gate_bounds(&self.layout()))
    }

    pub fn count_params(self, arch: &ArchSpec) -> Result<usize> {
        super::layout::count_params(&self.layout(), self.input_units(), arch)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = NpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons-mlp" | "moons" => Ok(Template::MoonsMlp),
            "lenet5" | "lenet" => Ok(Template::Lenet5),
            other => Err(NpnError::config(format!("unknown template `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(s: &str) -> ArchSpec {
        s.parse().unwrap()
    }

    #[test]
    fn lenet_counts() {
        let t = Template::Lenet5;
        assert_eq!(t.count_params(&arch("7-9-109-30")).unwrap(), 5320);
        assert_eq!(t.count_params(&arch("8-8-53-8")).unwrap(), 2304);
        assert_eq!(t.count_params(&arch("3-3-48-3")).unwrap(), 474);
        assert_eq!(t.count_params(&t.full_arch()).unwrap(), 430_500);
    }

    #[test]
    fn moons_counts() {
        let t = Template::MoonsMlp;
        assert_eq!(t.full_arch(), arch("100-80"));
        assert_eq!(t.count_params(&t.full_arch()).unwrap(), 8160);
        assert_eq!(t.count_params(&arch("3-3")).unwrap(), 15);
    }

    #[test]
    fn out_of_bound_counts_are_usage_errors() {
        assert!(matches!(
            Template::MoonsMlp.count_params(&arch("101-3")),
            Err(NpnError::Usage(_))
        ));
        assert!(matches!(
            Template::Lenet5.count_params(&arch("3-3-3")),
            Err(NpnError::Usage(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        for t in [Template::MoonsMlp, Template::Lenet5] {
            assert_eq!(t.name().parse::<Template>().unwrap(), t);
        }
    }
}
