use std::borrow::Cow;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{NpnError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    MaskUnits {
        x: Var,
        mask: Var,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    MeanSquaredError {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape. Build a fresh graph per step, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss or is untracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NpnError::usage(format!(
                "variable {} is not recorded on this graph",
                v.0
            )))
        }
    }

    /// Untracked input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Untracked leaf borrowing an existing tensor.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Tracked leaf borrowing an existing tensor (e.g. a parameter value).
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Tracked leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `x W (+ b)` with `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(NpnError::config(format!(
                "affine: input {xs:?} does not conform to weight {ws:?}"
            )));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [fan_out] {
                return Err(NpnError::config(format!(
                    "affine: bias {bs:?} does not match {fan_out} outputs"
                )));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (fan_out, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
            (fan_out, 1),
        );
        let value = Tensor::new(vec![batch, fan_out], out)?;
        let needs = self.needs(&[x, w]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(Cow::Owned(value), Op::Affine { x, w, bias }, needs))
    }

    /// `act(x W + b)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
        let y = self.affine(x, w, Some(b))?;
        Ok(self.activate(y, activation))
    }

    pub fn activate(&mut self, x: Var, activation: Activation) -> Var {
        match activation {
            Activation::Identity => x,
            Activation::Relu => self.relu(x),
        }
    }

    /// Valid-padding cross-correlation. `x: [batch, cin, h, w]`,
    /// `kernel: [cout, cin, kh, kw]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(NpnError::config(format!(
                "conv2d: input {xs:?} does not conform to kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(NpnError::config("conv2d: stride must be positive"));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h || kw > w || (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(NpnError::config(format!(
                "conv2d: {h}x{w} input with {kh}x{kw} kernel and stride {stride} gives a non-integral output"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(NpnError::config(format!(
                "conv2d: bias {:?} does not match {cout} filters",
                self.value(bias).shape()
            )));
        }
        let geom = ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        };
        let (patch, positions) = (geom.patch_len(), geom.positions());
        let mut cols = vec![0.0; batch * positions * patch];
        let mut out = vec![0.0; batch * cout * positions];
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        for b in 0..batch {
            let cols_b = &mut cols[b * positions * patch..][..positions * patch];
            kernels::im2col(&xv[b * cin * h * w..][..cin * h * w], &geom, cols_b);
            let out_b = &mut out[b * cout * positions..][..cout * positions];
            for (co, plane) in out_b.chunks_mut(positions).enumerate() {
                plane.iter_mut().for_each(|o| *o = bv[co]);
            }
            // out_b[cout, P] += K[cout, patch] * cols_b^T[patch, P]
            kernels::gemm(
                cout,
                patch,
                positions,
                1.0,
                kv,
                (patch, 1),
                cols_b,
                (1, patch),
                1.0,
                out_b,
                (positions, 1),
            );
        }
        let value = Tensor::new(vec![batch, cout, geom.oh, geom.ow], out)?;
        let needs = self.needs(&[x, kernel, bias]);
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let needs = self.needs(&[x]);
        self.push(Cow::Owned(value), Op::Relu(x), needs)
    }

    /// 2x2 stride-2 max pooling over the trailing two axes.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 3 || xs[xs.len() - 1] < 2 || xs[xs.len() - 2] < 2 {
            return Err(NpnError::config(format!(
                "max_pool2x2: input {xs:?} needs two spatial axes of extent >= 2"
            )));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let mut shape = xs.clone();
        let rank = shape.len();
        shape[rank - 2] = h / 2;
        shape[rank - 1] = w / 2;
        let mut out = vec![0.0; planes * (h / 2) * (w / 2)];
        let argmax = kernels::max_pool2x2(self.value(x).data(), planes, h, w, &mut out);
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Cow::Owned(value), Op::MaxPool2x2 { x, argmax }, needs))
    }

    /// Multiplies unit `j` along axis 1 (feature or channel) by `mask[j]`.
    pub fn mask_units(&mut self, x: Var, mask: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ms = self.value(mask).shape();
        if xs.len() < 2 || ms != [xs[1]] {
            return Err(NpnError::config(format!(
                "mask_units: mask {ms:?} does not match axis 1 of {xs:?}"
            )));
        }
        let units = xs[1];
        let inner: usize = xs[2..].iter().product();
        let m = self.value(mask).data();
        let mut data = self.value(x).data().to_vec();
        for (i, block) in data.chunks_mut(inner).enumerate() {
            let mj = m[i % units];
            block.iter_mut().for_each(|v| *v *= mj);
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        let needs = self.needs(&[x, mask]);
        Ok(self.push(Cow::Owned(value), Op::MaskUnits { x, mask }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Cow::Owned(value), Op::Reshape(x), needs))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let rest: usize = xs[1..].iter().product();
        let batch = xs[0];
        self.reshape(x, &[batch, rest])
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NpnError::config(format!(
                "{name}: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, |x, y| x + y, "add")?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(value), Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, |x, y| x * y, "mul")?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(value), Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v * factor).collect(),
        };
        let needs = self.needs(&[x]);
        self.push(Cow::Owned(value), Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(Cow::Owned(value), Op::Sum(x), needs)
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(NpnError::config(format!(
                "softmax_cross_entropy: logits {ls:?} vs {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(NpnError::config(format!(
                "softmax_cross_entropy: label {bad} outside {classes} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let logit_y = row[y];
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
            // log-sum-exp form stays finite for confident predictions
            loss += max + z.ln() - logit_y;
        }
        let value = Tensor::scalar(loss / batch as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Cow::Owned(value),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mean_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.zip_same(pred, target, |p, t| (p - t) * (p - t), "mean_squared_error")?;
        let value = Tensor::scalar(diff.sum() / diff.numel() as f64);
        let needs = self.needs(&[pred, target]);
        Ok(self.push(Cow::Owned(value), Op::MeanSquaredError { pred, target }, needs))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(NpnError::usage("backward called before any forward computation"));
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(NpnError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a>, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, bias } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * fan_in];
                    // dx[batch, in] = dy[batch, out] * W^T[out, in]
                    kernels::gemm(
                        batch, fan_out, fan_in, 1.0, dy.data(), (fan_out, 1), wv.data(),
                        (1, fan_out), 0.0, &mut dx, (fan_in, 1),
                    );
                    self.accumulate(grads, *x, Tensor { shape: xv.shape().to_vec(), data: dx });
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    // dW[in, out] = x^T[in, batch] * dy[batch, out]
                    kernels::gemm(
                        fan_in, batch, fan_out, 1.0, xv.data(), (1, fan_in), dy.data(),
                        (fan_out, 1), 0.0, &mut dw, (fan_out, 1),
                    );
                    self.accumulate(grads, *w, Tensor { shape: wv.shape().to_vec(), data: dw });
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; fan_out];
                        for row in dy.data().chunks(fan_out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let kv = self.value(*kernel);
                let cout = kv.shape()[0];
                let (patch, positions) = (geom.patch_len(), geom.positions());
                let batch = self.value(*x).shape()[0];
                let img = geom.cin * geom.h * geom.w;
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; cout * patch];
                    for b in 0..batch {
                        // dK[cout, patch] += dy_b[cout, P] * cols_b[P, patch]
                        kernels::gemm(
                            cout, positions, patch, 1.0,
                            &dy.data()[b * cout * positions..][..cout * positions],
                            (positions, 1),
                            &cols[b * positions * patch..][..positions * patch],
                            (patch, 1), 1.0, &mut dk, (patch, 1),
                        );
                    }
                    self.accumulate(grads, *kernel, Tensor { shape: kv.shape().to_vec(), data: dk });
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; cout];
                    for (i, plane) in dy.data().chunks(positions).enumerate() {
                        db[i % cout] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * img];
                    let mut dcols = vec![0.0; positions * patch];
                    for b in 0..batch {
                        // dcols[P, patch] = dy_b^T[P, cout] * K[cout, patch]
                        kernels::gemm(
                            positions, cout, patch, 1.0,
                            &dy.data()[b * cout * positions..][..cout * positions],
                            (1, positions), kv.data(), (patch, 1), 0.0, &mut dcols, (patch, 1),
                        );
                        kernels::col2im(&dcols, geom, &mut dx[b * img..][..img]);
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor { shape, data: dx });
                }
            }
            Op::Relu(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor { shape: dy.shape().to_vec(), data });
            }
            Op::MaxPool2x2 { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx[src] += g;
                }
                self.accumulate(grads, *x, Tensor { shape: xv.shape().to_vec(), data: dx });
            }
            Op::MaskUnits { x, mask } => {
                let xv = self.value(*x);
                let mv = self.value(*mask).data();
                let units = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                if self.wants(*x) {
                    let mut dx = dy.data().to_vec();
                    for (i, block) in dx.chunks_mut(inner).enumerate() {
                        let m = mv[i % units];
                        block.iter_mut().for_each(|v| *v *= m);
                    }
                    self.accumulate(grads, *x, Tensor { shape: xv.shape().to_vec(), data: dx });
                }
                if self.wants(*mask) {
                    let mut dm = vec![0.0; units];
                    for (i, (gb, xb)) in dy.data().chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                        dm[i % units] += gb.iter().zip(xb).map(|(g, v)| g * v).sum::<f64>();
                    }
                    self.accumulate(grads, *mask, Tensor::vector(dm));
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor { shape, data: dy.data().to_vec() });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = dy.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, Tensor { shape: dy.shape().to_vec(), data });
                }
                if self.wants(*b) {
                    let data = dy.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, Tensor { shape: dy.shape().to_vec(), data });
                }
            }
            Op::Scale(x, factor) => {
                let data = dy.data().iter().map(|g| g * factor).collect();
                self.accumulate(grads, *x, Tensor { shape: dy.shape().to_vec(), data });
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let (batch, classes) = (shape[0], shape[1]);
                let scale = dy.data()[0] / batch as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(classes).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor { shape, data: d });
            }
            Op::MeanSquaredError { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = 2.0 * dy.data()[0] / pv.numel() as f64;
                let diff: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(p, t)| scale * (p - t)).collect();
                if self.wants(*target) {
                    let neg = diff.iter().map(|v| -v).collect();
                    self.accumulate(grads, *target, Tensor { shape: tv.shape().to_vec(), data: neg });
                }
                self.accumulate(grads, *pred, Tensor { shape: pv.shape().to_vec(), data: diff });
            }
        }
    }
}
