use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.index as usize
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    ScaleColumns {
        x: Var,
        factors: Vec<f32>,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    PolyExcess {
        x: Var,
        coeffs: Vec<f32>,
        threshold: f32,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    SquaredDistance {
        x: Var,
        reference: Vec<f32>,
    },
    LogitMargin {
        logits: Var,
        labels: Vec<usize>,
        kappa: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations of one forward pass for a single backward sweep.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and the backward sweep is a plain reverse iteration.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    keep_caches: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            keep_caches: true,
        }
    }

    /// A tape that skips backward-only caches. Backward still works but
    /// recomputes what it needs.
    pub fn inference() -> Self {
        Self {
            keep_caches: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Disconnected);
        }
        self.nodes.get(v.idx()).ok_or(Error::Disconnected)
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx()]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.node(v).requires_grad);
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (n, c, h, wd) = self.value(x).dims4("conv2d input")?;
        let (k, wc, kh, kw) = self.value(w).dims4("conv2d weight")?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if self.value(b).shape() != [k] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{k}]", self.value(b).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})"),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let keep = self.keep_caches && self.node(w).requires_grad;
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            &geom,
            keep,
        );
        let value = Tensor::new(vec![n, k, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Non-overlapping max pooling with a square window. Ties route the
    /// gradient to the first maximal element.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2d")?;
        if size == 0 || h < size || w < size {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {size} does not fit {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / size, w / size);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = base + (oy * size + dy) * w + ox * size + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let area = h * w;
        if area == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial plane"));
        }
        let out = self
            .value(x)
            .data()
            .chunks(area)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as f32)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x · w + b` for `x: [N,D]`, `w: [D,E]`, `b: [E]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        let e = self.value(w).shape().get(1).copied().unwrap_or(0);
        if self.value(b).shape() != [e] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?}, expected [{e}]", self.value(b).shape()),
            ));
        }
        self.affine(x, w, Some(b))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine(x, w, None)
    }

    fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (n, d) = self.value(x).dims2("linear input")?;
        let (wd, e) = self.value(w).dims2("linear weight")?;
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!("input width {d} does not match weight rows {wd}"),
            ));
        }
        let mut out = vec![0.0; n * e];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(e) {
                row.copy_from_slice(bias);
            }
        }
        gemm(n, d, e, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let value = Tensor::new(vec![n, e], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = [t.batch(), t.sample_len()];
        self.reshape(x, &shape).expect("flatten preserves size")
    }

    /// Multiplies column `j` of a `[N,C]` matrix by the constant `factors[j]`.
    pub fn scale_columns(&mut self, x: Var, factors: &[f32]) -> Result<Var> {
        let (_, c) = self.value(x).dims2("scale_columns")?;
        if factors.len() != c {
            return Err(Error::shape(
                "scale_columns",
                format!("{} factors for {c} columns", factors.len()),
            ));
        }
        let src = self.value(x);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::ScaleColumns {
                x,
                factors: factors.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[n,c,:,:] = x[n,c,:,:] · s[n,c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_scale")?;
        if self.value(s).shape() != [n, c] {
            return Err(Error::shape(
                "channel_scale",
                format!("scale shape {:?}, expected [{n}, {c}]", self.value(s).shape()),
            ));
        }
        let area = h * w;
        let scale = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, &f) in data.chunks_mut(area).zip(scale) {
            for v in plane {
                *v *= f;
            }
        }
        let value = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.push(value, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for (i, (row, p)) in z.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (pj, e) in p.iter_mut().zip(&exps) {
                *pj = (e / sum) as f32;
            }
            total += sum.ln() + max - row[labels[i]] as f64;
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Elementwise `f(x) · relu(sign(f(x) − t))` for the polynomial `f` with
    /// ascending coefficients.
    pub fn poly_excess(&mut self, x: Var, coeffs: &[f32], threshold: f32) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| {
                let f = kernels::horner(coeffs, v);
                if f > threshold {
                    f
                } else {
                    0.0
                }
            })
            .collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(
            value,
            Op::PolyExcess {
                x,
                coeffs: coeffs.to_vec(),
                threshold,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| v * factor).collect(),
        };
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    /// `Σ (x − reference)²` over every element.
    pub fn squared_distance(&mut self, x: Var, reference: &Tensor) -> Result<Var> {
        if self.value(x).shape() != reference.shape() {
            return Err(Error::shape(
                "squared_distance",
                format!("{:?} vs {:?}", self.value(x).shape(), reference.shape()),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(reference.data())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::SquaredDistance {
                x,
                reference: reference.data().to_vec(),
            },
            &[x],
        ))
    }

    /// `Σₙ max(z[n,yₙ] − max_{j≠yₙ} z[n,j], −κ)`: the margin term of the
    /// Carlini-Wagner objective, summed over the batch.
    pub fn logit_margin(&mut self, logits: Var, labels: &[usize], kappa: f32) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("logit_margin")?;
        if labels.len() != n {
            return Err(Error::shape(
                "logit_margin",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if k < 2 {
            return Err(Error::shape("logit_margin", "need at least two classes"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let total: f64 = z
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| {
                let (_, other) = best_other(row, y);
                ((row[y] - other) as f64).max(-kappa as f64)
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::LogitMargin {
                logits,
                labels: labels.to_vec(),
                kappa,
            },
            &[logits],
        ))
    }

    /// Gradients of a scalar output with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", node.value.shape()),
            ));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back through the tape.
    pub fn backward_with_seed(&self, output: Var, seed: &[f32]) -> Result<Gradients> {
        let node = self.check(output)?;
        if !node.requires_grad {
            return Err(Error::Disconnected);
        }
        if seed.len() != node.value.len() {
            return Err(Error::shape(
                "backward",
                format!("seed has {} values, output has {}", seed.len(), node.value.len()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.idx() + 1];
        grads[output.idx()] = Some(seed.to_vec());
        for i in (0..=output.idx()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
        if !self.node(v).requires_grad {
            return;
        }
        match &mut grads[v.idx()] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let n = self.value(*x).batch();
                let res = kernels::conv_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    cols,
                    n,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    self.requires_grad(*b),
                );
                if let Some(dx) = res.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = res.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(db) = res.db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i as usize] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let t = self.value(*x);
                let area = t.len() / g.len();
                let inv = 1.0 / area as f32;
                let mut dx = vec![0.0; t.len()];
                for (plane, &gv) in dx.chunks_mut(area).zip(g) {
                    plane.fill(gv * inv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let e = self.value(*w).shape()[1];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, e, d, g, false, self.value(*w).data(), true, &mut dx, 0.0);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; d * e];
                    gemm(d, n, e, self.value(*x).data(), true, g, false, &mut dw, 0.0);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0f64; e];
                        for row in g.chunks(e) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v as f64;
                            }
                        }
                        self.accumulate(grads, *b, db.into_iter().map(|v| v as f32).collect());
                    }
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::ScaleColumns { x, factors } => {
                let c = factors.len();
                let mut dx = g.to_vec();
                for row in dx.chunks_mut(c) {
                    for (v, f) in row.iter_mut().zip(factors) {
                        *v *= f;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelScale { x, s } => {
                let scale = self.value(*s).data();
                let area = g.len() / scale.len();
                if self.requires_grad(*x) {
                    let mut dx = g.to_vec();
                    for (plane, &f) in dx.chunks_mut(area).zip(scale) {
                        for v in plane {
                            *v *= f;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*s) {
                    let ds = g
                        .chunks(area)
                        .zip(self.value(*x).data().chunks(area))
                        .map(|(gp, xp)| {
                            gp.iter().zip(xp).map(|(&a, &b)| (a * b) as f64).sum::<f64>() as f32
                        })
                        .collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f32;
                let mut dz = probs.clone();
                for (row, &y) in dz.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::PolyExcess {
                x,
                coeffs,
                threshold,
            } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if kernels::horner(coeffs, v) > *threshold {
                            gv * kernels::horner_derivative(coeffs, v)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; len]);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * factor).collect());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::SquaredDistance { x, reference } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(reference)
                    .map(|(&a, &r)| 2.0 * (a - r) * g[0])
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LogitMargin {
                logits,
                labels,
                kappa,
            } => {
                let z = self.value(*logits).data();
                let k = z.len() / labels.len();
                let mut dz = vec![0.0; z.len()];
                for ((row, out), &y) in z.chunks(k).zip(dz.chunks_mut(k)).zip(labels) {
                    let (j, other) = best_other(row, y);
                    if row[y] - other > -kappa {
                        out[y] += g[0];
                        out[j] -= g[0];
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}

/// Index and value of the largest entry other than `skip`.
fn best_other(row: &[f32], skip: usize) -> (usize, f32) {
    let mut best = (usize::MAX, f32::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if j != skip && (best.0 == usize::MAX || v > best.1) {
            best = (j, v);
        }
    }
    best
}

/// Result of a backward sweep.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` shaped like its value; zeros when nothing flowed in.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx()).and_then(Option::take)
    }
}
