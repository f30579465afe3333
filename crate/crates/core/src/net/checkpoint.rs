//! Line-oriented text checkpoint.
//!
//! ```text
//! NPN1
//! template <name>
//! loss <ce|mse>
//! gating <0|1>
//! norm none | norm <n> <mean...> <std...>
//! layer <index>
//! weight none | weight <rank> <dims...>     followed by a line of values
//! bias none | bias <rank> <dims...>         followed by a line of values
//! gates none | gates <n> <kind> <k>
//! phi <values...>
//! states <A|H per unit>
//! frozen none | frozen <values...>
//! rng <seed hex> <stream> <word position>
//! end
//! ```
//!
//! Floats use the shortest representation that parses back to the same bits.
//! Optimizer moments are not stored.

use std::fmt::Write as _;
use std::path::Path;

use super::layout::LayerSpec;
use super::model::{GatedLayer, LossKind, PlasticModel};
use super::template::Template;
use crate::data::InputNorm;
use crate::error::{NpnError, Result};
use crate::gates::{GateBank, GateKind, UnitState};
use crate::tensor::{ParamTensor, Tensor};

pub const MAGIC: &str = "NPN1";

fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:e}");
    }
}

fn write_tensor(out: &mut String, key: &str, t: Option<&ParamTensor>) {
    match t {
        None => {
            let _ = writeln!(out, "{key} none");
        }
        Some(p) => {
            let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{key} {} {}", dims.len(), dims.join(" "));
            push_floats(out, p.value.data());
            out.push('\n');
        }
    }
}

/// Serialises `model` to the text format.
pub fn write_checkpoint(model: &PlasticModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "template {}", model.template().name());
    let _ = writeln!(out, "loss {}", model.loss_kind().as_str());
    let _ = writeln!(out, "gating {}", u8::from(model.gating()));
    match model.input_norm() {
        None => out.push_str("norm none\n"),
        Some(n) => {
            let _ = write!(out, "norm {} ", n.mean.len());
            push_floats(&mut out, &n.mean);
            out.push(' ');
            push_floats(&mut out, &n.std);
            out.push('\n');
        }
    }
    for (i, layer) in model.layers().iter().enumerate() {
        let _ = writeln!(out, "layer {i}");
        write_tensor(&mut out, "weight", layer.weight());
        write_tensor(&mut out, "bias", layer.bias());
        match layer.gates() {
            None => out.push_str("gates none\n"),
            Some(b) => {
                let _ = writeln!(out, "gates {} {} {:e}", b.len(), b.kind(), b.k());
                out.push_str("phi ");
                push_floats(&mut out, b.phis());
                out.push_str("\nstates ");
                out.extend(b.states().iter().map(|s| match s {
                    UnitState::Active => 'A',
                    UnitState::Hibernated => 'H',
                }));
                match b.frozen_mask() {
                    None => out.push_str("\nfrozen none\n"),
                    Some(m) => {
                        out.push_str("\nfrozen ");
                        push_floats(&mut out, m);
                        out.push('\n');
                    }
                }
                let rng = b.rng();
                let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
                let _ = writeln!(out, "rng {seed} {} {}", rng.get_stream(), rng.get_word_pos());
            }
        }
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(model: &PlasticModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| NpnError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PlasticModel> {
    let text = std::fs::read_to_string(path).map_err(|e| NpnError::io(path, e))?;
    read_checkpoint(&text, path)
}

/// Line cursor that remembers byte offsets for error reporting.
struct Lines<'t> {
    text: &'t str,
    pos: usize,
    line_start: usize,
    path: &'t Path,
}

impl<'t> Lines<'t> {
    fn err(&self, message: impl Into<String>) -> NpnError {
        NpnError::Parse {
            path: self.path.to_path_buf(),
            offset: self.line_start as u64,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'t str> {
        if self.pos >= self.text.len() {
            self.line_start = self.text.len();
            return Err(self.err("unexpected end of file"));
        }
        self.line_start = self.pos;
        let rest = &self.text[self.pos..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        Ok(line.trim_end_matches('\r'))
    }

    /// Next line split into words, requiring the first to be `key`.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'t str>> {
        let line = self.next_line()?;
        let mut words = line.split_ascii_whitespace();
        match words.next() {
            Some(k) if k == key => Ok(words.collect()),
            other => Err(self.err(format!("expected `{key}`, found `{}`", other.unwrap_or("")))),
        }
    }

    fn single(&mut self, key: &str) -> Result<&'t str> {
        let words = self.keyed(key)?;
        match words.as_slice() {
            [w] => Ok(w),
            _ => Err(self.err(format!("`{key}` takes exactly one value"))),
        }
    }

    fn floats(&self, words: &[&str]) -> Result<Vec<f64>> {
        words
            .iter()
            .map(|w| w.parse::<f64>().map_err(|_| self.err(format!("bad number `{w}`"))))
            .collect()
    }

    fn usizes(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| w.parse::<usize>().map_err(|_| self.err(format!("bad integer `{w}`"))))
            .collect()
    }

    fn tensor(&mut self, key: &str, expected: Option<Vec<usize>>) -> Result<Option<ParamTensor>> {
        let words = self.keyed(key)?;
        if words == ["none"] {
            if expected.is_some() {
                return Err(self.err(format!("layer needs a `{key}` tensor")));
            }
            return Ok(None);
        }
        let nums = self.usizes(&words)?;
        let Some((&rank, dims)) = nums.split_first() else {
            return Err(self.err(format!("`{key}` needs a shape")));
        };
        if dims.len() != rank {
            return Err(self.err(format!("`{key}` declares rank {rank} but lists {} extents", dims.len())));
        }
        if expected.as_deref() != Some(dims) {
            return Err(self.err(format!("`{key}` shape {dims:?} does not fit the template ({expected:?})")));
        }
        let line = self.next_line()?;
        let values = self.floats(&line.split_ascii_whitespace().collect::<Vec<_>>())?;
        let t = Tensor::new(dims.to_vec(), values).map_err(|e| self.err(e.to_string()))?;
        Ok(Some(ParamTensor::new(t)))
    }
}

fn expected_shapes(spec: &LayerSpec) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
    match *spec {
        LayerSpec::FixedProjection { inputs, outputs, .. } => (Some(vec![inputs, outputs]), None),
        LayerSpec::Dense { inputs, outputs, .. } => (Some(vec![inputs, outputs]), Some(vec![outputs])),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (
            Some(vec![out_channels, in_channels, kernel, kernel]),
            Some(vec![out_channels]),
        ),
        LayerSpec::FlattenGate { .. } => (None, None),
    }
}

/// Parses the text format; `path` only labels errors.
pub fn read_checkpoint(text: &str, path: &Path) -> Result<PlasticModel> {
    let mut r = Lines {
        text,
        pos: 0,
        line_start: 0,
        path,
    };
    if r.next_line()? != MAGIC {
        return Err(r.err(format!("missing `{MAGIC}` header")));
    }
    let template: Template = r.single("template")?.parse().map_err(|e: NpnError| r.err(e.to_string()))?;
    let loss = LossKind::parse(r.single("loss")?).map_err(|e| r.err(e.to_string()))?;
    let gating = match r.single("gating")? {
        "0" => false,
        "1" => true,
        other => return Err(r.err(format!("bad gating flag `{other}`"))),
    };
    let norm_words = r.keyed("norm")?;
    let norm = if norm_words == ["none"] {
        None
    } else {
        let n = r.usizes(&norm_words[..1.min(norm_words.len())])?;
        let n = *n.first().ok_or_else(|| r.err("`norm` needs a width"))?;
        let vals = r.floats(&norm_words[1..])?;
        if vals.len() != 2 * n {
            return Err(r.err(format!("`norm` expects {} values", 2 * n)));
        }
        Some(InputNorm {
            mean: vals[..n].to_vec(),
            std: vals[n..].to_vec(),
        })
    };

    let mut layers = Vec::new();
    for (i, spec) in template.layout().into_iter().enumerate() {
        let idx = r.single("layer")?;
        if idx != i.to_string() {
            return Err(r.err(format!("expected layer {i}, found {idx}")));
        }
        let (ws, bs) = expected_shapes(&spec);
        let weight = r.tensor("weight", ws)?;
        let bias = r.tensor("bias", bs)?;
        let head = r.keyed("gates")?;
        let gates = if head == ["none"] {
            if spec.is_gated() {
                return Err(r.err(format!("layer {i} must carry gates")));
            }
            None
        } else {
            let [n, kind, k] = head.as_slice() else {
                return Err(r.err("`gates` takes a count, a kind and a scale"));
            };
            let n = r.usizes(&[n])?[0];
            if !spec.is_gated() || n != spec.units() {
                return Err(r.err(format!("layer {i} cannot hold {n} gates")));
            }
            let kind: GateKind = kind.parse().map_err(|e: NpnError| r.err(e.to_string()))?;
            let k = r.floats(&[k])?[0];
            let phi_words = r.keyed("phi")?;
            let phis = r.floats(&phi_words)?;
            if phis.len() != n {
                return Err(r.err(format!("expected {n} gate logits, found {}", phis.len())));
            }
            let states = r.single("states")?;
            let states = states
                .chars()
                .map(|c| match c {
                    'A' => Ok(UnitState::Active),
                    'H' => Ok(UnitState::Hibernated),
                    other => Err(r.err(format!("bad unit state `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if states.len() != n {
                return Err(r.err(format!("expected {n} unit states, found {}", states.len())));
            }
            let frozen_words = r.keyed("frozen")?;
            let frozen = if frozen_words == ["none"] {
                None
            } else {
                let m = r.floats(&frozen_words)?;
                if m.len() != n {
                    return Err(r.err(format!("expected {n} frozen mask values")));
                }
                Some(m)
            };
            let rng = r.keyed("rng")?;
            let [seed_hex, stream, word_pos] = rng.as_slice() else {
                return Err(r.err("`rng` takes a seed, a stream and a word position"));
            };
            let seed = parse_seed(seed_hex).ok_or_else(|| r.err("bad rng seed"))?;
            let stream: u64 = stream.parse().map_err(|_| r.err("bad rng stream"))?;
            let word_pos: u128 = word_pos.parse().map_err(|_| r.err("bad rng word position"))?;
            let mut bank = GateBank::new(phis, kind, k, 0, 0).map_err(|e| r.err(e.to_string()))?;
            bank.restore_rng(seed, stream, word_pos);
            bank.restore_states(states, frozen);
            Some(bank)
        };
        layers.push(GatedLayer::from_parts(spec, weight, bias, gates));
    }
    r.keyed("end")?;
    let mut model = PlasticModel::from_parts(template, layers, loss, gating, None);
    model.set_input_norm(norm).map_err(|e| r.err(e.to_string()))?;
    Ok(model)
}

fn parse_seed(hex: &str) -> Option<[u8; 32]> {
    if hex.len() != 64 || !hex.is_ascii() {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, byte) in seed.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelOptions;

    fn assert_same_state(a: &PlasticModel, b: &PlasticModel) {
        assert_eq!(a.template(), b.template());
        assert_eq!(a.gating(), b.gating());
        assert_eq!(a.input_norm(), b.input_norm());
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weight().map(|p| &p.value), lb.weight().map(|p| &p.value));
            assert_eq!(la.bias().map(|p| &p.value), lb.bias().map(|p| &p.value));
            assert_eq!(la.gates(), lb.gates());
        }
    }

    #[test]
    fn round_trip_preserves_state() {
        let mut m = PlasticModel::new(Template::MoonsMlp, &ModelOptions::default()).unwrap();
        m.set_input_norm(Some(InputNorm {
            mean: vec![0.1, -0.3],
            std: vec![0.7, 1.0 / 3.0],
        }))
        .unwrap();
        {
            let b = m.banks_mut().next().unwrap();
            b.hibernate(3, -0.5);
            b.set_phi(7, -1e-300);
            b.draw_uniforms();
        }
        let text = write_checkpoint(&m);
        assert!(text.starts_with("NPN1\n"));
        let mut back = read_checkpoint(&text, Path::new("mem")).unwrap();
        assert_same_state(&m, &back);
        // the gate streams continue identically
        let mut orig = m.clone();
        assert_eq!(
            orig.banks_mut().next().unwrap().draw_uniforms(),
            back.banks_mut().next().unwrap().draw_uniforms()
        );
    }

    #[test]
    fn errors_report_line_offsets() {
        let m = PlasticModel::new(Template::MoonsMlp, &ModelOptions::default()).unwrap();
        let text = write_checkpoint(&m);
        let bad = text.replacen("loss ce", "loss xx", 1);
        match read_checkpoint(&bad, Path::new("c")) {
            Err(NpnError::Parse { offset, .. }) => assert_eq!(offset as usize, bad.find("loss").unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(read_checkpoint("NPN0\n", Path::new("c")).is_err());
        let cut = &text[..text.len() / 2];
        assert!(matches!(read_checkpoint(cut, Path::new("c")), Err(NpnError::Parse { .. })));
    }
}
