//! Datasets: two-moons generator, frozen random projection, MNIST IDX files,
//! and seeded minibatching.

mod mnist;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NpnError, Result};
use crate::tensor::Tensor;

pub use mnist::{mnist_load, parse_idx_images, parse_idx_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, split: Split, classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(NpnError::config(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(NpnError::config(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            classes: self.classes,
        }
    }

    /// The first `n` items (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}

/// Two interleaving half circles, `n / 2` points each, plus isotropic
/// Gaussian noise. Class 0 is `(cos t, sin t)`, class 1 is
/// `(1 - cos t, 0.5 - sin t)`, `t` evenly spaced over `[0, pi]`. Rows are
/// shuffled.
pub fn make_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 == 1 {
        return Err(NpnError::usage(format!("moons needs a positive even count, got {n}")));
    }
    if !(noise_std >= 0.0) {
        return Err(NpnError::config(format!("noise std must be >= 0, got {noise_std}")));
    }
    let half = n / 2;
    let step = if half > 1 { PI / (half - 1) as f64 } else { 0.0 };
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..half {
        let t = i as f64 * step;
        rows.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..half {
        let t = i as f64 * step;
        rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (p, y) in rows {
        for v in p {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(v + noise_std * e);
        }
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, Split::Full, 2)
}

/// Disjoint uniform split with `n_train` items in the first part.
pub fn split(ds: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train > ds.len() {
        return Err(NpnError::usage(format!(
            "cannot take {n_train} training items from {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let (a, b) = idx.split_at(n_train);
    Ok((ds.subset(a, Split::Train), ds.subset(b, Split::Test)))
}

/// Half/half train/test split.
pub fn split_moons(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    split(ds, ds.len() / 2, seed)
}

/// Per-feature mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    /// Fitted on the rows of `x` (`[rows, features]`). Constant features get
    /// a unit std.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rank() != 2 {
            return Err(NpnError::config("standardisation expects [rows, features]"));
        }
        let (rows, features) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; features];
        for row in x.data().chunks(features) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; features];
        for row in x.data().chunks(features) {
            for j in 0..features {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputNorm { mean, std })
    }
}

/// Frozen `inputs x outputs` matrix of standard normal entries.
pub fn fixed_projection(seed: u64, inputs: usize, outputs: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..inputs * outputs)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::new(vec![inputs, outputs], data).expect("positive extents")
}

/// Minibatch index lists for one epoch. Every item appears exactly once; the
/// order depends only on `(seed, epoch)` and the last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `(inputs, labels)` minibatches for one epoch.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
    batch_indices(ds.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |b| {
            let labels = b.iter().map(|&i| ds.labels[i]).collect();
            (ds.inputs.gather_rows(&b), labels)
        })
}

/// Writes a two-feature dataset as `x1,x2,label` rows.
pub fn write_points_csv(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.inputs.rank() != 2 || ds.inputs.shape()[1] != 2 {
        return Err(NpnError::usage("point export needs two features"));
    }
    let mut out = String::from("x1,x2,label\n");
    for (row, y) in ds.inputs.data().chunks(2).zip(&ds.labels) {
        let _ = writeln!(out, "{},{},{}", row[0], row[1], y);
    }
    std::fs::write(path, out).map_err(|e| NpnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_are_balanced_and_deterministic() {
        let a = make_moons(1000, 0.1, 5).unwrap();
        assert_eq!(a.labels.iter().filter(|&&y| y == 0).count(), 500);
        assert_eq!(a, make_moons(1000, 0.1, 5).unwrap());
        assert_ne!(a, make_moons(1000, 0.1, 6).unwrap());
        assert!(matches!(make_moons(999, 0.1, 5), Err(NpnError::Usage(_))));
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = make_moons(200, 0.0, 1).unwrap();
        for (p, &y) in ds.inputs.data().chunks(2).zip(&ds.labels) {
            let (cx, cy, upper) = if y == 0 { (0.0, 0.0, true) } else { (1.0, 0.5, false) };
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            assert!(if upper { p[1] >= -1e-12 } else { p[1] <= cy + 1e-12 });
        }
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = make_moons(1000, 0.1, 2).unwrap();
        let (tr, te) = split_moons(&ds, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (500, 500));
        let mut all: Vec<Vec<u64>> = tr
            .inputs
            .data()
            .chunks(2)
            .chain(te.inputs.data().chunks(2))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = ds
            .inputs
            .data()
            .chunks(2)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split_moons(&ds, 9).unwrap().0, tr);
    }

    #[test]
    fn projection_is_seeded() {
        let p = fixed_projection(4, 2, 100);
        assert_eq!(p.shape(), &[2, 100]);
        assert_eq!(p, fixed_projection(4, 2, 100));
        assert_ne!(p, fixed_projection(5, 2, 100));
    }

    #[test]
    fn batches_cover_every_item_once() {
        let b = batch_indices(10, 3, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batch_indices(10, 3, 1, 0));
        assert_ne!(b, batch_indices(10, 3, 1, 1));
    }

    #[test]
    fn standardisation_fits_moments() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        let n = InputNorm::fit(&x).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
    }

    #[test]
    fn logistic_regression_underfits_moons() {
        // plain gradient descent on a linear classifier, run to convergence
        let ds = make_moons(1000, 0.15, 0).unwrap();
        let mut w = [0.0f64; 3];
        for _ in 0..5000 {
            let mut g = [0.0; 3];
            for (p, &y) in ds.inputs.data().chunks(2).zip(&ds.labels) {
                let z = w[0] * p[0] + w[1] * p[1] + w[2];
                let e = 1.0 / (1.0 + (-z).exp()) - y as f64;
                g[0] += e * p[0];
                g[1] += e * p[1];
                g[2] += e;
            }
            for j in 0..3 {
                w[j] -= 0.5 * g[j] / ds.len() as f64;
            }
        }
        let correct = ds
            .inputs
            .data()
            .chunks(2)
            .zip(&ds.labels)
            .filter(|(p, &y)| ((w[0] * p[0] + w[1] * p[1] + w[2] > 0.0) as usize) == y)
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc < 0.95, "linear accuracy {acc}");
        assert!(acc > 0.75, "linear accuracy {acc}");
    }
}
