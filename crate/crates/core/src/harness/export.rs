use std::fmt::Write as _;

use crate::error::{NpnError, Result};
use crate::gates::expected_mask;
use crate::net::{PlasticModel, Template};
use crate::tensor::Tensor;

pub const BOUNDARY_X: (f64, f64) = (-2.5, 3.5);
pub const BOUNDARY_Y: (f64, f64) = (-2.0, 2.5);

fn grid(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if n == 1 {
        return 0.5 * (lo + hi);
    }
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

/// Class-1 probability of the threshold-masked model over a
/// `resolution x resolution` grid, as `x1,x2,p1` CSV.
pub fn cmd_export_boundary(model: &PlasticModel, resolution: usize, tau: f64) -> Result<String> {
    if model.template() != Template::MoonsMlp {
        return Err(NpnError::usage("boundary export needs a two-input moons model"));
    }
    if resolution == 0 {
        return Err(NpnError::usage("--resolution must be positive"));
    }
    let mut points = Vec::with_capacity(resolution * resolution * 2);
    for iy in 0..resolution {
        let y = grid(BOUNDARY_Y.0, BOUNDARY_Y.1, resolution, iy);
        for ix in 0..resolution {
            points.push(grid(BOUNDARY_X.0, BOUNDARY_X.1, resolution, ix));
            points.push(y);
        }
    }
    let x = Tensor::new(vec![resolution * resolution, 2], points)?;
    let logits = model.forward(&x, &model.eval_masks(tau))?;
    let mut out = String::from("x1,x2,p1\n");
    for (p, l) in x.data().chunks(2).zip(logits.data().chunks(2)) {
        // softmax over two classes
        let p1 = 1.0 / (1.0 + (l[0] - l[1]).exp());
        let _ = writeln!(out, "{},{},{}", p[0], p[1], p1);
    }
    Ok(out)
}

/// Counts of active-unit `g(phi)` values per gated layer over `bins` equal
/// bins of `[0, 1]`, as `layer,bin_lo,bin_hi,count` CSV.
pub fn gate_histogram(model: &PlasticModel, bins: usize) -> Result<Vec<Vec<usize>>> {
    if bins == 0 {
        return Err(NpnError::usage("--bins must be positive"));
    }
    Ok(model
        .banks()
        .map(|b| {
            let mut counts = vec![0; bins];
            for (j, g) in expected_mask(b).into_iter().enumerate() {
                if b.is_active(j) {
                    let i = ((g * bins as f64) as usize).min(bins - 1);
                    counts[i] += 1;
                }
            }
            counts
        })
        .collect())
}

pub fn cmd_export_histogram(model: &PlasticModel, bins: usize) -> Result<String> {
    let hist = gate_histogram(model, bins)?;
    let mut out = String::from("layer,bin_lo,bin_hi,count\n");
    for (layer, counts) in hist.iter().enumerate() {
        for (i, c) in counts.iter().enumerate() {
            let lo = i as f64 / bins as f64;
            let hi = (i + 1) as f64 / bins as f64;
            let _ = writeln!(out, "{layer},{lo},{hi},{c}");
        }
    }
    Ok(out)
}
