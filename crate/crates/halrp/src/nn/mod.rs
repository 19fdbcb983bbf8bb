//! Minimal deterministic feed-forward training core.
//!
//! Dense and 2-D convolution layers with ReLU, max-pooling and flatten in
//! between, one classifier head per task, and plain SGD. Layers come in two
//! parameterizations: free weights (base training and warm-up) and the
//! low-rank form `diag(r)·W_base·diag(s) + U·diag(σ)·Vᵀ` whose base stays
//! frozen while r, s, U, σ, V and the bias train. Convolution runs as im2col
//! plus a matrix multiply so everything reduces to the dense kernels.

mod im2col;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor4};
use crate::perturb::TaskLayerParams;
use crate::reg_prune::{rs_subgrad, uv_subgrad, RegCoefficients};
use crate::rng::Rng;

pub type TaskId = usize;

/// Logical shape of the activation flowing between layers. Data is always
/// stored as a flat N×features matrix; images use feature index
/// c·H·W + h·W + w.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

/// Weights of a parametric layer. Non-parametric layers store nothing.
#[derive(Debug, Clone)]
pub enum LayerWeights {
    Dense {
        w: Matrix,
        b: Vec<f64>,
    },
    Conv {
        w: Tensor4,
        b: Vec<f64>,
    },
    DenseLowRank {
        base: Matrix,
        params: TaskLayerParams,
        b: Vec<f64>,
    },
    ConvLowRank {
        base: Tensor4,
        params: TaskLayerParams,
        b: Vec<f64>,
    },
}

impl LayerWeights {
    pub fn bias(&self) -> &[f64] {
        match self {
            LayerWeights::Dense { b, .. }
            | LayerWeights::Conv { b, .. }
            | LayerWeights::DenseLowRank { b, .. }
            | LayerWeights::ConvLowRank { b, .. } => b,
        }
    }

    /// Materialized dense weight for dense-shaped layers.
    pub fn effective_dense(&self) -> Option<Matrix> {
        match self {
            LayerWeights::Dense { w, .. } => Some(w.clone()),
            LayerWeights::DenseLowRank { base, params, .. } => {
                Some(materialize_dense(base, params))
            }
            _ => None,
        }
    }

    /// Materialized kernel tensor for conv-shaped layers.
    pub fn effective_conv(&self) -> Option<Tensor4> {
        match self {
            LayerWeights::Conv { w, .. } => Some(w.clone()),
            LayerWeights::ConvLowRank { base, params, .. } => Some(materialize_conv(base, params)),
            _ => None,
        }
    }
}

fn materialize_dense(base: &Matrix, p: &TaskLayerParams) -> Matrix {
    let b = p.low_rank.reconstruct();
    Matrix::from_fn(base.rows(), base.cols(), |j, i| {
        p.r[j] * base.get(j, i) * p.s[i] + b.get(j, i)
    })
}

fn materialize_conv(base: &Tensor4, p: &TaskLayerParams) -> Tensor4 {
    let (kh, kw, out_ch, in_ch) = base.dims();
    let b = p.low_rank.reconstruct();
    Tensor4::from_fn(kh, kw, out_ch, in_ch, |h, w, j, i| {
        p.r[j] * base.get(h, w, j, i) * p.s[i] + b.get(j, i)
    })
}

/// Per-task classifier over the flattened final activation.
#[derive(Debug, Clone)]
pub struct Head {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// A labeled mini-batch or dataset slice: inputs in [0, 1], one integer label
/// per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Self {
        assert_eq!(inputs.rows(), labels.len(), "one label per input row");
        Batch { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let inputs = Matrix::from_fn(indices.len(), self.inputs.cols(), |r, c| {
            self.inputs.get(indices[r], c)
        });
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch { inputs, labels }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    weights: Vec<Option<LayerWeights>>,
    shapes: Vec<Shape>,
    heads: BTreeMap<TaskId, Head>,
}

/// Uniform fan-based init bound: sqrt(6 / (fan_in + fan_out)).
fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Network {
    /// Build a network, validating that shapes chain consistently, and
    /// initialize the weights from the seed. Biases start at zero.
    pub fn new(specs: Vec<LayerSpec>, input_shape: Shape, seed: u64) -> Result<Network> {
        let mut shapes = vec![input_shape];
        let mut weights = Vec::with_capacity(specs.len());
        let mut rng = Rng::derive(seed, 0x006e_6574);
        for (idx, spec) in specs.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let (next, w) = match *spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if cur.len() != in_dim {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: dense expects {in_dim} features, chain provides {}",
                            cur.len()
                        )));
                    }
                    let bound = init_bound(in_dim, out_dim);
                    let w = Matrix::from_fn(out_dim, in_dim, |_, _| rng.uniform(-bound, bound));
                    (
                        Shape::Flat(out_dim),
                        Some(LayerWeights::Dense {
                            w,
                            b: vec![0.0; out_dim],
                        }),
                    )
                }
                LayerSpec::Conv2d {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = match cur {
                        Shape::Image {
                            channels,
                            height,
                            width,
                        } => (channels, height, width),
                        Shape::Flat(_) => {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {idx}: conv2d needs an image input"
                            )))
                        }
                    };
                    if c != in_channels {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: conv2d expects {in_channels} channels, got {c}"
                        )));
                    }
                    if kernel == 0 || stride == 0 {
                        return Err(Error::InvalidInput(
                            "kernel and stride must be at least 1".into(),
                        ));
                    }
                    if h + 2 * padding < kernel
                        || w + 2 * padding < kernel
                        || !(h + 2 * padding - kernel).is_multiple_of(stride)
                        || !(w + 2 * padding - kernel).is_multiple_of(stride)
                    {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: conv2d geometry does not tile {h}x{w} \
                             (kernel {kernel}, stride {stride}, padding {padding})"
                        )));
                    }
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let bound = init_bound(fan_in, fan_out);
                    let t = Tensor4::from_fn(
                        kernel,
                        kernel,
                        out_channels,
                        in_channels,
                        |_, _, _, _| rng.uniform(-bound, bound),
                    );
                    (
                        Shape::Image {
                            channels: out_channels,
                            height: im2col::out_size(h, kernel, stride, padding),
                            width: im2col::out_size(w, kernel, stride, padding),
                        },
                        Some(LayerWeights::Conv {
                            w: t,
                            b: vec![0.0; out_channels],
                        }),
                    )
                }
                LayerSpec::Relu => (cur, None),
                LayerSpec::MaxPool { size } => {
                    let (c, h, w) = match cur {
                        Shape::Image {
                            channels,
                            height,
                            width,
                        } => (channels, height, width),
                        Shape::Flat(_) => {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {idx}: maxpool needs an image input"
                            )))
                        }
                    };
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: pool size {size} does not tile {h}x{w}"
                        )));
                    }
                    (
                        Shape::Image {
                            channels: c,
                            height: h / size,
                            width: w / size,
                        },
                        None,
                    )
                }
                LayerSpec::Flatten => match cur {
                    Shape::Image { .. } => (Shape::Flat(cur.len()), None),
                    Shape::Flat(_) => {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {idx}: flatten needs an image input"
                        )))
                    }
                },
            };
            shapes.push(next);
            weights.push(w);
        }
        Ok(Network {
            specs,
            weights,
            shapes,
            heads: BTreeMap::new(),
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    pub fn layer_weights(&self) -> &[Option<LayerWeights>] {
        &self.weights
    }

    pub fn layer_weights_mut(&mut self) -> &mut [Option<LayerWeights>] {
        &mut self.weights
    }

    /// Indices of parametric layers, in order.
    pub fn parametric_layers(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.as_ref().map(|_| i))
            .collect()
    }

    pub fn add_head(&mut self, task: TaskId, classes: usize, seed: u64) {
        let feat = self.output_shape().len();
        let bound = init_bound(feat, classes);
        let mut rng = Rng::derive(seed, 0x6865_6164 ^ task as u64);
        let w = Matrix::from_fn(classes, feat, |_, _| rng.uniform(-bound, bound));
        self.heads.insert(
            task,
            Head {
                w,
                b: vec![0.0; classes],
            },
        );
    }

    pub fn set_head(&mut self, task: TaskId, head: Head) {
        self.heads.insert(task, head);
    }

    pub fn head(&self, task: TaskId) -> Result<&Head> {
        self.heads.get(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, Head> {
        &self.heads
    }

    pub fn clear_heads(&mut self) {
        self.heads.clear();
    }

    /// Forward pass producing N×C logits for the given task head.
    pub fn forward(&self, task: TaskId, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(task, inputs)?.logits)
    }

    fn forward_trace(&self, task: TaskId, inputs: &Matrix) -> Result<Trace> {
        let head = self.head(task)?;
        if inputs.cols() != self.shapes[0].len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                inputs.cols(),
                self.shapes[0].len()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::InvalidInput("non-finite input batch".into()));
        }
        let n = inputs.rows();
        let mut acts: Vec<Matrix> = vec![inputs.clone()];
        let mut patches: Vec<Option<Matrix>> = vec![None; self.specs.len()];
        let mut kernels: Vec<Option<Matrix>> = vec![None; self.specs.len()];
        let mut dense_eff: Vec<Option<Matrix>> = vec![None; self.specs.len()];
        let mut pool_src: Vec<Option<Vec<usize>>> = vec![None; self.specs.len()];

        for (idx, spec) in self.specs.iter().enumerate() {
            let x = acts.last().unwrap();
            let out = match *spec {
                LayerSpec::Dense { .. } => {
                    let lw = self.weights[idx].as_ref().unwrap();
                    let w = lw.effective_dense().unwrap();
                    let b = lw.bias();
                    let mut y = x.matmul(&w.transpose());
                    for r in 0..y.rows() {
                        for c in 0..y.cols() {
                            let v = y.get(r, c) + b[c];
                            y.set(r, c, v);
                        }
                    }
                    dense_eff[idx] = Some(w);
                    y
                }
                LayerSpec::Conv2d {
                    kernel,
                    out_channels,
                    stride,
                    padding,
                    ..
                } => {
                    let (c, h, w) = match self.shapes[idx] {
                        Shape::Image {
                            channels,
                            height,
                            width,
                        } => (channels, height, width),
                        _ => unreachable!("validated at construction"),
                    };
                    let lw = self.weights[idx].as_ref().unwrap();
                    let kern = im2col::kernel_matrix(&lw.effective_conv().unwrap());
                    let b = lw.bias();
                    let p = im2col::im2col(x, c, h, w, kernel, stride, padding);
                    let y_flat = p.matmul(&kern.transpose());
                    let oh = im2col::out_size(h, kernel, stride, padding);
                    let ow = im2col::out_size(w, kernel, stride, padding);
                    let spatial = oh * ow;
                    let y = Matrix::from_fn(n, out_channels * spatial, |sample, feat| {
                        let j = feat / spatial;
                        let pos = feat % spatial;
                        y_flat.get(sample * spatial + pos, j) + b[j]
                    });
                    patches[idx] = Some(p);
                    kernels[idx] = Some(kern);
                    y
                }
                LayerSpec::Relu => Matrix::from_fn(n, x.cols(), |r, c| x.get(r, c).max(0.0)),
                LayerSpec::MaxPool { size } => {
                    let (c, h, w) = match self.shapes[idx] {
                        Shape::Image {
                            channels,
                            height,
                            width,
                        } => (channels, height, width),
                        _ => unreachable!(),
                    };
                    let (oh, ow) = (h / size, w / size);
                    let mut y = Matrix::zeros(n, c * oh * ow);
                    let mut src = vec![0usize; n * c * oh * ow];
                    for sample in 0..n {
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_feat = 0usize;
                                    for ky in 0..size {
                                        for kx in 0..size {
                                            let iy = oy * size + ky;
                                            let ix = ox * size + kx;
                                            let feat = (ch * h + iy) * w + ix;
                                            let v = x.get(sample, feat);
                                            if v > best {
                                                best = v;
                                                best_feat = feat;
                                            }
                                        }
                                    }
                                    let out_feat = (ch * oh + oy) * ow + ox;
                                    y.set(sample, out_feat, best);
                                    src[sample * (c * oh * ow) + out_feat] = best_feat;
                                }
                            }
                        }
                    }
                    pool_src[idx] = Some(src);
                    y
                }
                LayerSpec::Flatten => x.clone(),
            };
            acts.push(out);
        }

        let last = acts.last().unwrap();
        let mut logits = last.matmul(&head.w.transpose());
        for r in 0..logits.rows() {
            for c in 0..logits.cols() {
                let v = logits.get(r, c) + head.b[c];
                logits.set(r, c, v);
            }
        }
        Ok(Trace {
            acts,
            patches,
            kernels,
            dense_eff,
            pool_src,
            logits,
        })
    }

    /// Mean loss and gradients over the batch for the given task. Gradients
    /// cover every trainable array: plain weights, the low-rank
    /// reparameterization (r, s, U, σ, V), biases, and the active head.
    pub fn backward(&self, task: TaskId, batch: &Batch) -> Result<(f64, Gradients)> {
        let head = self.head(task)?;
        check_labels(batch, head.w.rows())?;
        let trace = self.forward_trace(task, &batch.inputs)?;
        let loss_value = loss(&trace.logits, &batch.labels);

        let n = batch.len();
        let classes = head.w.rows();
        // d(mean CE)/d(logits) = (softmax - onehot) / N
        let mut dlogits = Matrix::zeros(n, classes);
        for r in 0..n {
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..classes {
                maxv = maxv.max(trace.logits.get(r, c));
            }
            let mut denom = 0.0;
            for c in 0..classes {
                denom += (trace.logits.get(r, c) - maxv).exp();
            }
            for c in 0..classes {
                let p = (trace.logits.get(r, c) - maxv).exp() / denom;
                let onehot = if batch.labels[r] == c { 1.0 } else { 0.0 };
                dlogits.set(r, c, (p - onehot) / n as f64);
            }
        }

        let last = trace.acts.last().unwrap();
        let head_w_grad = dlogits.transpose().matmul(last);
        let head_b_grad: Vec<f64> = (0..classes)
            .map(|c| (0..n).map(|r| dlogits.get(r, c)).sum())
            .collect();
        let mut dx = dlogits.matmul(&head.w);

        let mut layer_grads: Vec<Option<LayerGrad>> = vec![None; self.specs.len()];
        for idx in (0..self.specs.len()).rev() {
            let x = &trace.acts[idx];
            match self.specs[idx] {
                LayerSpec::Dense { .. } => {
                    let dw_eff = dx.transpose().matmul(x);
                    let db: Vec<f64> = (0..dx.cols())
                        .map(|c| (0..dx.rows()).map(|r| dx.get(r, c)).sum())
                        .collect();
                    let w_eff = trace.dense_eff[idx].as_ref().unwrap();
                    let new_dx = dx.matmul(w_eff);
                    layer_grads[idx] = Some(self.dense_grad_from_effective(idx, dw_eff, db));
                    dx = new_dx;
                }
                LayerSpec::Conv2d {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = match self.shapes[idx] {
                        Shape::Image {
                            channels,
                            height,
                            width,
                        } => (channels, height, width),
                        _ => unreachable!(),
                    };
                    let oh = im2col::out_size(h, kernel, stride, padding);
                    let ow = im2col::out_size(w, kernel, stride, padding);
                    let spatial = oh * ow;
                    let dy_flat = Matrix::from_fn(n * spatial, out_channels, |row, j| {
                        let sample = row / spatial;
                        let pos = row % spatial;
                        dx.get(sample, j * spatial + pos)
                    });
                    let p = trace.patches[idx].as_ref().unwrap();
                    let kern = trace.kernels[idx].as_ref().unwrap();
                    let dk = dy_flat.transpose().matmul(p);
                    let db: Vec<f64> = (0..out_channels)
                        .map(|j| (0..n * spatial).map(|r| dy_flat.get(r, j)).sum())
                        .collect();
                    let dp = dy_flat.matmul(kern);
                    dx = im2col::col2im(&dp, n, c, h, w, kernel, stride, padding);
                    let dw4 = im2col::kernel_tensor(&dk, kernel, out_channels, in_channels);
                    layer_grads[idx] = Some(self.conv_grad_from_effective(idx, dw4, db));
                }
                LayerSpec::Relu => {
                    dx = Matrix::from_fn(dx.rows(), dx.cols(), |r, c| {
                        if x.get(r, c) > 0.0 {
                            dx.get(r, c)
                        } else {
                            0.0
                        }
                    });
                }
                LayerSpec::MaxPool { .. } => {
                    let src = trace.pool_src[idx].as_ref().unwrap();
                    let mut back = Matrix::zeros(n, x.cols());
                    let out_feats = dx.cols();
                    for sample in 0..n {
                        for feat in 0..out_feats {
                            let from = src[sample * out_feats + feat];
                            let v = back.get(sample, from) + dx.get(sample, feat);
                            back.set(sample, from, v);
                        }
                    }
                    dx = back;
                }
                LayerSpec::Flatten => {}
            }
        }

        let grads = Gradients::new(layer_grads, head_w_grad, head_b_grad);
        Ok((loss_value, grads))
    }

    /// Chain dL/dW_eff into the layer's trainable arrays.
    fn dense_grad_from_effective(&self, idx: usize, dw_eff: Matrix, db: Vec<f64>) -> LayerGrad {
        match self.weights[idx].as_ref().unwrap() {
            LayerWeights::Dense { .. } => LayerGrad::Dense { w: dw_eff, b: db },
            LayerWeights::DenseLowRank { base, params, .. } => {
                let (j_dim, i_dim) = (base.rows(), base.cols());
                let mut dr = vec![0.0; j_dim];
                let mut ds = vec![0.0; i_dim];
                for j in 0..j_dim {
                    for i in 0..i_dim {
                        let g = dw_eff.get(j, i);
                        dr[j] += g * base.get(j, i) * params.s[i];
                        ds[i] += g * params.r[j] * base.get(j, i);
                    }
                }
                let (du, dsigma, dv) = low_rank_factor_grads(&dw_eff, params);
                LayerGrad::LowRank {
                    r: dr,
                    s: ds,
                    u: du,
                    sigma: dsigma,
                    v: dv,
                    b: db,
                }
            }
            _ => unreachable!("dense spec with non-dense weights"),
        }
    }

    fn conv_grad_from_effective(&self, idx: usize, dw4: Tensor4, db: Vec<f64>) -> LayerGrad {
        match self.weights[idx].as_ref().unwrap() {
            LayerWeights::Conv { .. } => LayerGrad::Conv { w: dw4, b: db },
            LayerWeights::ConvLowRank { base, params, .. } => {
                let (kh, kw, j_dim, i_dim) = base.dims();
                let mut dr = vec![0.0; j_dim];
                let mut ds = vec![0.0; i_dim];
                let mut db_mat = Matrix::zeros(j_dim, i_dim);
                for h in 0..kh {
                    for w in 0..kw {
                        for j in 0..j_dim {
                            for i in 0..i_dim {
                                let g = dw4.get(h, w, j, i);
                                dr[j] += g * base.get(h, w, j, i) * params.s[i];
                                ds[i] += g * params.r[j] * base.get(h, w, j, i);
                                let v = db_mat.get(j, i) + g;
                                db_mat.set(j, i, v);
                            }
                        }
                    }
                }
                let (du, dsigma, dv) = low_rank_factor_grads(&db_mat, params);
                LayerGrad::LowRank {
                    r: dr,
                    s: ds,
                    u: du,
                    sigma: dsigma,
                    v: dv,
                    b: db,
                }
            }
            _ => unreachable!("conv spec with non-conv weights"),
        }
    }

    /// Class predictions: argmax of the logits, first index winning ties.
    pub fn predict(&self, task: TaskId, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(task, inputs)?;
        Ok(argmax_rows(&logits))
    }

    /// Fraction of batch rows classified correctly.
    pub fn accuracy(&self, task: TaskId, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict(task, &batch.inputs)?;
        let correct = preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

struct Trace {
    acts: Vec<Matrix>,
    patches: Vec<Option<Matrix>>,
    kernels: Vec<Option<Matrix>>,
    dense_eff: Vec<Option<Matrix>>,
    pool_src: Vec<Option<Vec<usize>>>,
    logits: Matrix,
}

/// dL/dU = G·V·diag(σ), dL/dσ_t = u_tᵀ·G·v_t, dL/dV = Gᵀ·U·diag(σ) for the
/// residual term U·diag(σ)·Vᵀ with G = dL/dW_eff (or its spatial sum for
/// conv).
fn low_rank_factor_grads(g: &Matrix, params: &TaskLayerParams) -> (Matrix, Vec<f64>, Matrix) {
    let u = &params.low_rank.u_k;
    let v = &params.low_rank.v_k;
    let sigma = &params.low_rank.sigma_k;
    let k = params.k;
    let gv = g.matmul(v); // J×k
    let gtu = g.transpose().matmul(u); // I×k
    let du = Matrix::from_fn(u.rows(), k, |j, t| gv.get(j, t) * sigma[t]);
    let dv = Matrix::from_fn(v.rows(), k, |i, t| gtu.get(i, t) * sigma[t]);
    let dsigma: Vec<f64> = (0..k)
        .map(|t| (0..u.rows()).map(|j| u.get(j, t) * gv.get(j, t)).sum())
        .collect();
    (du, dsigma, dv)
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let mut best = 0usize;
            for c in 1..m.cols() {
                if m.get(r, c) > m.get(r, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn check_labels(batch: &Batch, classes: usize) -> Result<()> {
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside the head's {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy, computed through a stable log-sum-exp.
pub fn loss(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let mut maxv = f64::NEG_INFINITY;
        for c in 0..logits.cols() {
            maxv = maxv.max(logits.get(r, c));
        }
        let mut denom = 0.0;
        for c in 0..logits.cols() {
            denom += (logits.get(r, c) - maxv).exp();
        }
        total += maxv + denom.ln() - logits.get(r, labels[r]);
    }
    total / logits.rows() as f64
}

/// Per-layer gradient arrays mirroring the trainable weights.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Dense {
        w: Matrix,
        b: Vec<f64>,
    },
    Conv {
        w: Tensor4,
        b: Vec<f64>,
    },
    LowRank {
        r: Vec<f64>,
        s: Vec<f64>,
        u: Matrix,
        sigma: Vec<f64>,
        v: Matrix,
        b: Vec<f64>,
    },
}

impl LayerGrad {
    /// Flattened weight-gradient values in canonical order (biases excluded).
    fn weight_values(&self) -> Vec<f64> {
        match self {
            LayerGrad::Dense { w, .. } => w.data().to_vec(),
            LayerGrad::Conv { w, .. } => w.data().to_vec(),
            LayerGrad::LowRank {
                r, s, u, sigma, v, ..
            } => {
                let mut out = r.clone();
                out.extend_from_slice(s);
                out.extend_from_slice(u.data());
                out.extend_from_slice(sigma);
                out.extend_from_slice(v.data());
                out
            }
        }
    }
}

/// Gradients for one backward pass: per-layer arrays plus the active head,
/// with a cache of each parametric layer's flattened weight-gradient L2 norm.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    weight_norms: Vec<Option<f64>>,
}

impl Gradients {
    fn new(layers: Vec<Option<LayerGrad>>, head_w: Matrix, head_b: Vec<f64>) -> Self {
        let weight_norms = layers
            .iter()
            .map(|lg| {
                lg.as_ref()
                    .map(|g| g.weight_values().iter().map(|x| x * x).sum::<f64>().sqrt())
            })
            .collect();
        Gradients {
            layers,
            head_w,
            head_b,
            weight_norms,
        }
    }

    /// Cached L2 norm of the flattened weight gradient for a layer.
    pub fn weight_norm(&self, layer: usize) -> Option<f64> {
        self.weight_norms.get(layer).copied().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| match g {
            LayerGrad::Dense { w, b } => w.is_finite() && b.iter().all(|x| x.is_finite()),
            LayerGrad::Conv { w, b } => w.is_finite() && b.iter().all(|x| x.is_finite()),
            LayerGrad::LowRank {
                r,
                s,
                u,
                sigma,
                v,
                b,
            } => {
                u.is_finite()
                    && v.is_finite()
                    && r.iter()
                        .chain(s)
                        .chain(sigma)
                        .chain(b)
                        .all(|x| x.is_finite())
            }
        }) && self.head_w.is_finite()
            && self.head_b.iter().all(|x| x.is_finite())
    }
}

/// Options for `train`.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub shuffle_seed: u64,
    pub reg: Option<RegCoefficients>,
}

impl TrainOpts {
    pub fn new(epochs: usize, lr: f64, batch_size: usize, shuffle_seed: u64) -> Self {
        TrainOpts {
            epochs,
            lr,
            batch_size,
            momentum: 0.0,
            shuffle_seed,
            reg: None,
        }
    }
}

struct Velocity {
    layers: Vec<Option<LayerGrad>>,
    head_w: Matrix,
    head_b: Vec<f64>,
}

/// Mini-batch SGD with deterministic shuffling. Returns the trained network;
/// the input is untouched. With `reg` set, the penalty subgradients are added
/// to every low-rank layer's r, s, U and V gradients.
pub fn train(net: &Network, task: TaskId, data: &Batch, opts: &TrainOpts) -> Result<Network> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty batch".into()));
    }
    let head = net.head(task)?;
    check_labels(data, head.w.rows())?;
    let mut net = net.clone();
    if opts.epochs == 0 {
        return Ok(net);
    }
    let mut rng = Rng::derive(opts.shuffle_seed, 0x7368_7566);
    let batch_size = opts.batch_size.max(1);
    let mut velocity: Option<Velocity> = None;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch = data.select(chunk);
            let (loss_value, mut grads) = net.backward(task, &batch)?;
            if !loss_value.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if let Some(c) = &opts.reg {
                apply_reg_subgradients(&net, &mut grads, c);
            }
            apply_sgd(&mut net, task, &grads, opts, &mut velocity);
        }
    }
    Ok(net)
}

/// Add the penalty subgradients to the low-rank layer gradients in place:
/// r and s get 2·λ₁·x, U and V get λ₀·sign(x) + 2·λ₁·x. Plain layers,
/// sigma, biases and heads are untouched.
pub fn apply_reg_subgradients(net: &Network, grads: &mut Gradients, c: &RegCoefficients) {
    for (idx, lg) in grads.layers.iter_mut().enumerate() {
        let params = match net.weights[idx].as_ref() {
            Some(LayerWeights::DenseLowRank { params, .. })
            | Some(LayerWeights::ConvLowRank { params, .. }) => params,
            _ => continue,
        };
        if let Some(LayerGrad::LowRank { r, s, u, v, .. }) = lg.as_mut() {
            for (g, x) in r.iter_mut().zip(&params.r) {
                *g += rs_subgrad(*x, c);
            }
            for (g, x) in s.iter_mut().zip(&params.s) {
                *g += rs_subgrad(*x, c);
            }
            for (g, x) in u.data_mut().iter_mut().zip(params.low_rank.u_k.data()) {
                *g += uv_subgrad(*x, c);
            }
            for (g, x) in v.data_mut().iter_mut().zip(params.low_rank.v_k.data()) {
                *g += uv_subgrad(*x, c);
            }
        }
    }
}

fn step_slice(dst: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, momentum: f64) {
    for ((w, &g), v) in dst.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

fn apply_sgd(
    net: &mut Network,
    task: TaskId,
    grads: &Gradients,
    opts: &TrainOpts,
    velocity: &mut Option<Velocity>,
) {
    let vel = velocity.get_or_insert_with(|| Velocity {
        layers: grads
            .layers
            .iter()
            .map(|lg| {
                lg.as_ref().map(|g| match g {
                    LayerGrad::Dense { w, b } => LayerGrad::Dense {
                        w: Matrix::zeros(w.rows(), w.cols()),
                        b: vec![0.0; b.len()],
                    },
                    LayerGrad::Conv { w, b } => {
                        let (kh, kw, j, i) = w.dims();
                        LayerGrad::Conv {
                            w: Tensor4::zeros(kh, kw, j, i),
                            b: vec![0.0; b.len()],
                        }
                    }
                    LayerGrad::LowRank {
                        r,
                        s,
                        u,
                        sigma,
                        v,
                        b,
                    } => LayerGrad::LowRank {
                        r: vec![0.0; r.len()],
                        s: vec![0.0; s.len()],
                        u: Matrix::zeros(u.rows(), u.cols()),
                        sigma: vec![0.0; sigma.len()],
                        v: Matrix::zeros(v.rows(), v.cols()),
                        b: vec![0.0; b.len()],
                    },
                })
            })
            .collect(),
        head_w: Matrix::zeros(grads.head_w.rows(), grads.head_w.cols()),
        head_b: vec![0.0; grads.head_b.len()],
    });

    let (lr, momentum) = (opts.lr, opts.momentum);
    for idx in 0..net.specs.len() {
        let (Some(weights), Some(grad), Some(vel_g)) = (
            net.weights[idx].as_mut(),
            grads.layers[idx].as_ref(),
            vel.layers[idx].as_mut(),
        ) else {
            continue;
        };
        match (weights, grad, vel_g) {
            (
                LayerWeights::Dense { w, b },
                LayerGrad::Dense { w: gw, b: gb },
                LayerGrad::Dense { w: vw, b: vb },
            ) => {
                step_slice(w.data_mut(), gw.data(), vw.data_mut(), lr, momentum);
                step_slice(b, gb, vb, lr, momentum);
            }
            (
                LayerWeights::Conv { w, b },
                LayerGrad::Conv { w: gw, b: gb },
                LayerGrad::Conv { w: vw, b: vb },
            ) => {
                step_slice(w.data_mut(), gw.data(), vw.data_mut(), lr, momentum);
                step_slice(b, gb, vb, lr, momentum);
            }
            (
                LayerWeights::DenseLowRank { params, b, .. },
                LayerGrad::LowRank {
                    r: gr,
                    s: gs,
                    u: gu,
                    sigma: gsig,
                    v: gv,
                    b: gb,
                },
                LayerGrad::LowRank {
                    r: vr,
                    s: vs,
                    u: vu,
                    sigma: vsig,
                    v: vv,
                    b: vb,
                },
            )
            | (
                LayerWeights::ConvLowRank { params, b, .. },
                LayerGrad::LowRank {
                    r: gr,
                    s: gs,
                    u: gu,
                    sigma: gsig,
                    v: gv,
                    b: gb,
                },
                LayerGrad::LowRank {
                    r: vr,
                    s: vs,
                    u: vu,
                    sigma: vsig,
                    v: vv,
                    b: vb,
                },
            ) => {
                step_slice(&mut params.r, gr, vr, lr, momentum);
                step_slice(&mut params.s, gs, vs, lr, momentum);
                step_slice(
                    params.low_rank.u_k.data_mut(),
                    gu.data(),
                    vu.data_mut(),
                    lr,
                    momentum,
                );
                step_slice(&mut params.low_rank.sigma_k, gsig, vsig, lr, momentum);
                step_slice(
                    params.low_rank.v_k.data_mut(),
                    gv.data(),
                    vv.data_mut(),
                    lr,
                    momentum,
                );
                step_slice(b, gb, vb, lr, momentum);
            }
            _ => unreachable!("gradient kind matches weight kind"),
        }
    }
    let head = net.heads.get_mut(&task).expect("head checked earlier");
    step_slice(
        head.w.data_mut(),
        grads.head_w.data(),
        vel.head_w.data_mut(),
        lr,
        momentum,
    );
    step_slice(&mut head.b, &grads.head_b, &mut vel.head_b, lr, momentum);
}

// ---------------------------------------------------------------------------
// Flat parameter indexing. The finite-difference suites perturb single
// scalars through this view; the order is canonical: per layer (r, s, U, σ,
// V | W), then the bias, then the active head's weights and bias.
// ---------------------------------------------------------------------------

/// Flat read/write access to every trainable scalar of (network, task head).
pub struct ParamView<'a> {
    net: &'a mut Network,
    task: TaskId,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    DenseW(usize),
    ConvW(usize),
    LowRankR(usize),
    LowRankS(usize),
    LowRankU(usize),
    LowRankSigma(usize),
    LowRankV(usize),
    Bias(usize),
    HeadW,
    HeadB,
}

impl<'a> ParamView<'a> {
    pub fn new(net: &'a mut Network, task: TaskId) -> Result<Self> {
        net.head(task)?;
        let mut segments = Vec::new();
        for (idx, lw) in net.weights.iter().enumerate() {
            match lw {
                Some(LayerWeights::Dense { .. }) => {
                    segments.push(Segment::DenseW(idx));
                    segments.push(Segment::Bias(idx));
                }
                Some(LayerWeights::Conv { .. }) => {
                    segments.push(Segment::ConvW(idx));
                    segments.push(Segment::Bias(idx));
                }
                Some(LayerWeights::DenseLowRank { .. })
                | Some(LayerWeights::ConvLowRank { .. }) => {
                    segments.push(Segment::LowRankR(idx));
                    segments.push(Segment::LowRankS(idx));
                    segments.push(Segment::LowRankU(idx));
                    segments.push(Segment::LowRankSigma(idx));
                    segments.push(Segment::LowRankV(idx));
                    segments.push(Segment::Bias(idx));
                }
                None => {}
            }
        }
        segments.push(Segment::HeadW);
        segments.push(Segment::HeadB);
        Ok(ParamView {
            net,
            task,
            segments,
        })
    }

    fn segment_slice(&self, seg: Segment) -> &[f64] {
        match seg {
            Segment::DenseW(i) => match self.net.weights[i].as_ref().unwrap() {
                LayerWeights::Dense { w, .. } => w.data(),
                _ => unreachable!(),
            },
            Segment::ConvW(i) => match self.net.weights[i].as_ref().unwrap() {
                LayerWeights::Conv { w, .. } => w.data(),
                _ => unreachable!(),
            },
            Segment::LowRankR(i)
            | Segment::LowRankS(i)
            | Segment::LowRankU(i)
            | Segment::LowRankSigma(i)
            | Segment::LowRankV(i) => {
                let params = match self.net.weights[i].as_ref().unwrap() {
                    LayerWeights::DenseLowRank { params, .. }
                    | LayerWeights::ConvLowRank { params, .. } => params,
                    _ => unreachable!(),
                };
                match seg {
                    Segment::LowRankR(_) => &params.r,
                    Segment::LowRankS(_) => &params.s,
                    Segment::LowRankU(_) => params.low_rank.u_k.data(),
                    Segment::LowRankSigma(_) => &params.low_rank.sigma_k,
                    Segment::LowRankV(_) => params.low_rank.v_k.data(),
                    _ => unreachable!(),
                }
            }
            Segment::Bias(i) => self.net.weights[i].as_ref().unwrap().bias(),
            Segment::HeadW => self.net.heads[&self.task].w.data(),
            Segment::HeadB => &self.net.heads[&self.task].b,
        }
    }

    fn segment_slice_mut(&mut self, seg: Segment) -> &mut [f64] {
        match seg {
            Segment::DenseW(i) => match self.net.weights[i].as_mut().unwrap() {
                LayerWeights::Dense { w, .. } => w.data_mut(),
                _ => unreachable!(),
            },
            Segment::ConvW(i) => match self.net.weights[i].as_mut().unwrap() {
                LayerWeights::Conv { w, .. } => w.data_mut(),
                _ => unreachable!(),
            },
            Segment::LowRankR(i)
            | Segment::LowRankS(i)
            | Segment::LowRankU(i)
            | Segment::LowRankSigma(i)
            | Segment::LowRankV(i) => {
                let params = match self.net.weights[i].as_mut().unwrap() {
                    LayerWeights::DenseLowRank { params, .. }
                    | LayerWeights::ConvLowRank { params, .. } => params,
                    _ => unreachable!(),
                };
                match seg {
                    Segment::LowRankR(_) => &mut params.r,
                    Segment::LowRankS(_) => &mut params.s,
                    Segment::LowRankU(_) => params.low_rank.u_k.data_mut(),
                    Segment::LowRankSigma(_) => &mut params.low_rank.sigma_k,
                    Segment::LowRankV(_) => params.low_rank.v_k.data_mut(),
                    _ => unreachable!(),
                }
            }
            Segment::Bias(i) => match self.net.weights[i].as_mut().unwrap() {
                LayerWeights::Dense { b, .. }
                | LayerWeights::Conv { b, .. }
                | LayerWeights::DenseLowRank { b, .. }
                | LayerWeights::ConvLowRank { b, .. } => b,
            },
            Segment::HeadW => self.net.heads.get_mut(&self.task).unwrap().w.data_mut(),
            Segment::HeadB => &mut self.net.heads.get_mut(&self.task).unwrap().b,
        }
    }

    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|&s| self.segment_slice(s).len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut idx: usize) -> (Segment, usize) {
        for &seg in &self.segments {
            let len = self.segment_slice(seg).len();
            if idx < len {
                return (seg, idx);
            }
            idx -= len;
        }
        panic!("parameter index out of range");
    }

    pub fn get(&self, idx: usize) -> f64 {
        let (seg, off) = self.locate(idx);
        self.segment_slice(seg)[off]
    }

    /// The network behind the view, for evaluating perturbed parameters.
    pub fn net(&self) -> &Network {
        self.net
    }

    pub fn set(&mut self, idx: usize, v: f64) {
        let (seg, off) = self.locate(idx);
        self.segment_slice_mut(seg)[off] = v;
    }

    /// Flatten a `Gradients` into the same canonical order.
    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &seg in &self.segments {
            match seg {
                Segment::DenseW(i) | Segment::ConvW(i) => match grads.layers[i].as_ref().unwrap() {
                    LayerGrad::Dense { w, .. } => out.extend_from_slice(w.data()),
                    LayerGrad::Conv { w, .. } => out.extend_from_slice(w.data()),
                    _ => unreachable!(),
                },
                Segment::LowRankR(i)
                | Segment::LowRankS(i)
                | Segment::LowRankU(i)
                | Segment::LowRankSigma(i)
                | Segment::LowRankV(i) => match grads.layers[i].as_ref().unwrap() {
                    LayerGrad::LowRank {
                        r, s, u, sigma, v, ..
                    } => match seg {
                        Segment::LowRankR(_) => out.extend_from_slice(r),
                        Segment::LowRankS(_) => out.extend_from_slice(s),
                        Segment::LowRankU(_) => out.extend_from_slice(u.data()),
                        Segment::LowRankSigma(_) => out.extend_from_slice(sigma),
                        Segment::LowRankV(_) => out.extend_from_slice(v.data()),
                        _ => unreachable!(),
                    },
                    _ => unreachable!(),
                },
                Segment::Bias(i) => match grads.layers[i].as_ref().unwrap() {
                    LayerGrad::Dense { b, .. }
                    | LayerGrad::Conv { b, .. }
                    | LayerGrad::LowRank { b, .. } => out.extend_from_slice(b),
                },
                Segment::HeadW => out.extend_from_slice(grads.head_w.data()),
                Segment::HeadB => out.extend_from_slice(&grads.head_b),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::truncate;
    use crate::perturb;

    fn flat_batch(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Batch {
        let cols = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Batch::new(Matrix::from_vec(labels.len(), cols, data), labels)
    }

    #[test]
    fn forward_zero_weights_gives_zero_logits() {
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 3,
                out_dim: 2,
            }],
            Shape::Flat(3),
            0,
        )
        .unwrap();
        if let Some(LayerWeights::Dense { w, b }) = net.weights[0].as_mut() {
            *w = Matrix::zeros(2, 3);
            b.fill(0.0);
        }
        net.add_head(0, 4, 0);
        if let Some(h) = net.heads.get_mut(&0) {
            h.w = Matrix::zeros(4, 2);
            h.b = vec![0.0; 4];
        }
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.4]);
        let logits = net.forward(0, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_identity_dense_reads_head_column() {
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 3,
                out_dim: 3,
            }],
            Shape::Flat(3),
            0,
        )
        .unwrap();
        if let Some(LayerWeights::Dense { w, .. }) = net.weights[0].as_mut() {
            *w = Matrix::identity(3);
        }
        net.add_head(0, 2, 7);
        let head_w = net.head(0).unwrap().w.clone();
        // e1 through the identity layer picks out the head's first column.
        let x = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        let logits = net.forward(0, &x).unwrap();
        for c in 0..2 {
            assert!((logits.get(0, c) - head_w.get(c, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let net = {
            let mut n = Network::new(
                vec![
                    LayerSpec::Dense {
                        in_dim: 4,
                        out_dim: 5,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        in_dim: 5,
                        out_dim: 3,
                    },
                ],
                Shape::Flat(4),
                11,
            )
            .unwrap();
            n.add_head(0, 2, 13);
            n
        };
        let mut rng = Rng::new(3);
        let x = Matrix::random(6, 4, 0.0, 1.0, &mut rng);
        let logits = net.forward(0, &x).unwrap();

        // Independent straight-line re-computation with explicit loops.
        let w0 = net.weights[0].as_ref().unwrap().effective_dense().unwrap();
        let b0 = net.weights[0].as_ref().unwrap().bias().to_vec();
        let w2 = net.weights[2].as_ref().unwrap().effective_dense().unwrap();
        let b2 = net.weights[2].as_ref().unwrap().bias().to_vec();
        let head = net.head(0).unwrap();
        for sample in 0..6 {
            let mut h1 = [0.0f64; 5];
            for (j, out) in h1.iter_mut().enumerate() {
                for i in 0..4 {
                    *out += w0.get(j, i) * x.get(sample, i);
                }
                *out = (*out + b0[j]).max(0.0);
            }
            let mut h2 = [0.0f64; 3];
            for (j, out) in h2.iter_mut().enumerate() {
                for (i, &v) in h1.iter().enumerate() {
                    *out += w2.get(j, i) * v;
                }
                *out += b2[j];
            }
            for c in 0..2 {
                let mut z = head.b[c];
                for (i, &v) in h2.iter().enumerate() {
                    z += head.w.get(c, i) * v;
                }
                assert!((logits.get(sample, c) - z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loss_uniform_logits_is_log_c() {
        for c in [2usize, 5, 10] {
            let logits = Matrix::zeros(3, c);
            let l = loss(&logits, &[0, c - 1, c / 2]);
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_two_class_margin() {
        // Scalar oracle: ln(1 + (C-1)·e^{-m}) for C = 2, m = 1.
        let expected = (1.0 + (-1.0f64).exp()).ln();
        let logits = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        assert!((loss(&logits, &[0]) - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        // Large margins drive the loss to zero.
        let confident = Matrix::from_vec(1, 2, vec![60.0, 0.0]);
        assert!(loss(&confident, &[0]) < 1e-20);
    }

    #[test]
    fn loss_invariant_under_class_permutation() {
        let logits = Matrix::from_vec(2, 3, vec![0.4, -1.0, 2.2, 0.0, 0.5, -0.3]);
        let labels = [2usize, 1];
        let perm = [2usize, 0, 1]; // class c -> perm[c]
        let permuted = Matrix::from_fn(2, 3, |r, c| {
            let orig = perm.iter().position(|&p| p == c).unwrap();
            logits.get(r, orig)
        });
        let permuted_labels: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        assert!((loss(&logits, &labels) - loss(&permuted, &permuted_labels)).abs() < 1e-12);
    }

    #[test]
    fn gradients_vanish_at_a_minimum() {
        // Identical inputs with balanced labels: the uniform prediction of a
        // zero network is the minimizer, so every gradient is zero.
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 2,
                out_dim: 2,
            }],
            Shape::Flat(2),
            0,
        )
        .unwrap();
        if let Some(LayerWeights::Dense { w, .. }) = net.weights[0].as_mut() {
            *w = Matrix::zeros(2, 2);
        }
        net.add_head(0, 2, 0);
        if let Some(h) = net.heads.get_mut(&0) {
            h.w = Matrix::zeros(2, 2);
        }
        let batch = flat_batch(vec![vec![0.3, 0.7], vec![0.3, 0.7]], vec![0, 1]);
        let (_, grads) = net.backward(0, &batch).unwrap();
        assert!(grads.weight_norm(0).unwrap() < 1e-6);
        assert!(grads.head_w.data().iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn mean_gradient_combines_linearly_over_batches() {
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 3,
                out_dim: 4,
            }],
            Shape::Flat(3),
            5,
        )
        .unwrap();
        net.add_head(0, 2, 6);
        let mut rng = Rng::new(8);
        let full = Batch::new(Matrix::random(4, 3, 0.0, 1.0, &mut rng), vec![0, 1, 1, 0]);
        let (_, g_full) = net.backward(0, &full).unwrap();
        let (_, g_a) = net.backward(0, &full.select(&[0, 1])).unwrap();
        let (_, g_b) = net.backward(0, &full.select(&[2, 3])).unwrap();
        for idx in 0..g_full.head_w.data().len() {
            let combined = 0.5 * g_a.head_w.data()[idx] + 0.5 * g_b.head_w.data()[idx];
            assert!((g_full.head_w.data()[idx] - combined).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_norm_cache_matches_naive_flatten() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 4,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 2,
                },
            ],
            Shape::Flat(3),
            1,
        )
        .unwrap();
        net.add_head(0, 2, 2);
        let mut rng = Rng::new(3);
        let batch = Batch::new(
            Matrix::random(5, 3, 0.0, 1.0, &mut rng),
            vec![0, 1, 0, 1, 1],
        );
        let (_, grads) = net.backward(0, &batch).unwrap();
        for idx in [0usize, 2] {
            let Some(LayerGrad::Dense { w, .. }) = grads.layers[idx].as_ref() else {
                panic!("expected dense grad");
            };
            let naive = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_eq!(grads.weight_norm(idx).unwrap(), naive);
        }
    }

    fn central_diff_check(
        net: &Network,
        task: TaskId,
        batch: &Batch,
        reg: Option<RegCoefficients>,
    ) {
        let (_, mut grads) = net.backward(task, batch).unwrap();
        if let Some(c) = &reg {
            apply_reg_subgradients(net, &mut grads, c);
        }
        let mut work = net.clone();
        let mut view = ParamView::new(&mut work, task).unwrap();
        let analytic = view.flatten_grads(&grads);
        let n_params = view.len();
        assert_eq!(analytic.len(), n_params);
        let eps = 1e-4;
        let mut max_rel = 0.0f64;
        for idx in 0..n_params {
            let orig = view.get(idx);
            view.set(idx, orig + eps);
            let plus = objective(view.net, task, batch, &reg);
            view.set(idx, orig - eps);
            let minus = objective(view.net, task, batch, &reg);
            view.set(idx, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-3);
            let rel = (analytic[idx] - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    fn objective(net: &Network, task: TaskId, batch: &Batch, reg: &Option<RegCoefficients>) -> f64 {
        let logits = net.forward(task, &batch.inputs).unwrap();
        let mut total = loss(&logits, &batch.labels);
        if let Some(c) = reg {
            for lw in net.weights.iter().flatten() {
                if let LayerWeights::DenseLowRank { params, .. }
                | LayerWeights::ConvLowRank { params, .. } = lw
                {
                    total += crate::reg_prune::reg_loss_layer(params, c);
                }
            }
        }
        total
    }

    #[test]
    fn gradient_check_dense_relu() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 5,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: 5,
                    out_dim: 3,
                },
            ],
            Shape::Flat(4),
            21,
        )
        .unwrap();
        net.add_head(0, 3, 22);
        let mut rng = Rng::new(23);
        let batch = Batch::new(
            Matrix::random(6, 4, 0.0, 1.0, &mut rng),
            vec![0, 1, 2, 0, 1, 2],
        );
        central_diff_check(&net, 0, &batch, None);
    }

    #[test]
    fn gradient_check_conv_pool_flatten() {
        let mut net = Network::new(
            vec![
                LayerSpec::Conv2d {
                    kernel: 3,
                    in_channels: 2,
                    out_channels: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
            ],
            Shape::Image {
                channels: 2,
                height: 4,
                width: 4,
            },
            31,
        )
        .unwrap();
        net.add_head(0, 2, 32);
        let mut rng = Rng::new(33);
        let batch = Batch::new(Matrix::random(3, 32, 0.0, 1.0, &mut rng), vec![0, 1, 0]);
        central_diff_check(&net, 0, &batch, None);
    }

    #[test]
    fn gradient_check_strided_padded_conv() {
        // 7x7 input, kernel 3, stride 2, padding 1 -> 4x4 output.
        let mut net = Network::new(
            vec![
                LayerSpec::Conv2d {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 2,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            Shape::Image {
                channels: 1,
                height: 7,
                width: 7,
            },
            35,
        )
        .unwrap();
        assert_eq!(net.output_shape(), Shape::Flat(2 * 4 * 4));
        net.add_head(0, 3, 36);
        let mut rng = Rng::new(37);
        let batch = Batch::new(Matrix::random(4, 49, 0.0, 1.0, &mut rng), vec![0, 1, 2, 1]);
        central_diff_check(&net, 0, &batch, None);
    }

    fn low_rank_dense_net(seed: u64, k: usize) -> Network {
        let mut rng = Rng::new(seed);
        let base = Matrix::random(5, 4, -0.8, 0.8, &mut rng);
        let free = Matrix::random(5, 4, -0.8, 0.8, &mut rng);
        let (r, s, f) = perturb::decompose_fc(&free, &base).unwrap();
        let params = TaskLayerParams {
            layer_index: 0,
            r,
            s,
            low_rank: truncate(&f, k).unwrap(),
            k,
        };
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 4,
                out_dim: 5,
            }],
            Shape::Flat(4),
            seed,
        )
        .unwrap();
        net.weights[0] = Some(LayerWeights::DenseLowRank {
            base,
            params,
            b: vec![0.05; 5],
        });
        net.add_head(1, 3, seed + 1);
        net
    }

    #[test]
    fn gradient_check_low_rank_dense() {
        let net = low_rank_dense_net(41, 2);
        let mut rng = Rng::new(42);
        let batch = Batch::new(
            Matrix::random(5, 4, 0.0, 1.0, &mut rng),
            vec![0, 1, 2, 1, 0],
        );
        central_diff_check(&net, 1, &batch, None);
    }

    #[test]
    fn weight_norm_cache_covers_low_rank_layers() {
        let net = low_rank_dense_net(45, 2);
        let mut rng = Rng::new(46);
        let batch = Batch::new(Matrix::random(4, 4, 0.0, 1.0, &mut rng), vec![0, 1, 2, 0]);
        let (_, grads) = net.backward(1, &batch).unwrap();
        let Some(LayerGrad::LowRank {
            r, s, u, sigma, v, ..
        }) = grads.layers[0].as_ref()
        else {
            panic!("expected low-rank grad");
        };
        let mut acc = 0.0;
        for x in r
            .iter()
            .chain(s)
            .chain(u.data())
            .chain(sigma)
            .chain(v.data())
        {
            acc += x * x;
        }
        assert_eq!(grads.weight_norm(0).unwrap(), acc.sqrt());
    }

    #[test]
    fn gradient_check_low_rank_dense_with_regularizer() {
        let net = low_rank_dense_net(43, 3);
        let mut rng = Rng::new(44);
        let batch = Batch::new(Matrix::random(4, 4, 0.0, 1.0, &mut rng), vec![2, 0, 1, 1]);
        // Entries of U/V sit well away from the L1 kink relative to eps=1e-4.
        central_diff_check(&net, 1, &batch, Some(RegCoefficients::new(1e-2, 1e-2)));
    }

    #[test]
    fn gradient_check_low_rank_conv() {
        let mut rng = Rng::new(51);
        let base = Tensor4::from_fn(3, 3, 3, 2, |_, _, _, _| rng.uniform(-0.5, 0.5));
        let free = Tensor4::from_fn(3, 3, 3, 2, |_, _, _, _| rng.uniform(-0.5, 0.5));
        let (r, s, f) = perturb::decompose_conv(&free, &base).unwrap();
        let params = TaskLayerParams {
            layer_index: 0,
            r,
            s,
            low_rank: truncate(&f, 2).unwrap(),
            k: 2,
        };
        let mut net = Network::new(
            vec![
                LayerSpec::Conv2d {
                    kernel: 3,
                    in_channels: 2,
                    out_channels: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            Shape::Image {
                channels: 2,
                height: 5,
                width: 5,
            },
            52,
        )
        .unwrap();
        net.weights[0] = Some(LayerWeights::ConvLowRank {
            base,
            params,
            b: vec![0.02; 3],
        });
        net.add_head(2, 2, 53);
        let batch = Batch::new(Matrix::random(3, 50, 0.0, 1.0, &mut rng), vec![0, 1, 1]);
        central_diff_check(&net, 2, &batch, None);
    }

    #[test]
    fn train_epoch_zero_is_identity_and_lr_zero_freezes() {
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 2,
                out_dim: 3,
            }],
            Shape::Flat(2),
            61,
        )
        .unwrap();
        net.add_head(0, 2, 62);
        let batch = flat_batch(vec![vec![0.1, 0.9], vec![0.8, 0.2]], vec![1, 0]);

        let same = train(&net, 0, &batch, &TrainOpts::new(0, 0.5, 2, 0)).unwrap();
        assert_nets_bitwise_equal(&net, &same);

        let frozen = train(&net, 0, &batch, &TrainOpts::new(4, 0.0, 2, 0)).unwrap();
        assert_nets_bitwise_equal(&net, &frozen);
    }

    fn assert_nets_bitwise_equal(a: &Network, b: &Network) {
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            match (wa, wb) {
                (None, None) => {}
                (
                    Some(LayerWeights::Dense { w: x, b: bx }),
                    Some(LayerWeights::Dense { w: y, b: by }),
                ) => {
                    assert_eq!(x.data(), y.data());
                    assert_eq!(bx, by);
                }
                _ => panic!("layer kind changed"),
            }
        }
        for (t, ha) in a.heads.iter() {
            let hb = &b.heads[t];
            assert_eq!(ha.w.data(), hb.w.data());
            assert_eq!(ha.b, hb.b);
        }
    }

    #[test]
    fn train_decreases_loss_on_separable_toy() {
        // Head-only linear model on two separable points.
        let mut net = Network::new(vec![], Shape::Flat(2), 71).unwrap();
        net.add_head(0, 2, 72);
        let batch = flat_batch(vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![0, 1]);
        let mut cur = net.clone();
        let mut prev_loss = loss(&cur.forward(0, &batch.inputs).unwrap(), &batch.labels);
        for _ in 0..5 {
            cur = train(&cur, 0, &batch, &TrainOpts::new(1, 0.5, 2, 9)).unwrap();
            let l = loss(&cur.forward(0, &batch.inputs).unwrap(), &batch.labels);
            assert!(l < prev_loss, "loss failed to decrease: {l} vs {prev_loss}");
            prev_loss = l;
        }
    }

    #[test]
    fn train_is_deterministic_for_a_seed() {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 4,
                },
                LayerSpec::Relu,
            ],
            Shape::Flat(3),
            81,
        )
        .unwrap();
        net.add_head(0, 2, 82);
        let mut rng = Rng::new(83);
        let batch = Batch::new(
            Matrix::random(16, 3, 0.0, 1.0, &mut rng),
            (0..16).map(|i| i % 2).collect(),
        );
        let opts = TrainOpts::new(6, 0.1, 4, 17);
        let a = train(&net, 0, &batch, &opts).unwrap();
        let b = train(&net, 0, &batch, &opts).unwrap();
        assert_nets_bitwise_equal_any(&a, &b);
    }

    fn assert_nets_bitwise_equal_any(a: &Network, b: &Network) {
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            match (wa, wb) {
                (None, None) => {}
                (Some(x), Some(y)) => match (x, y) {
                    (
                        LayerWeights::Dense { w: xw, b: xb },
                        LayerWeights::Dense { w: yw, b: yb },
                    ) => {
                        assert_eq!(xw.data(), yw.data());
                        assert_eq!(xb, yb);
                    }
                    (LayerWeights::Conv { w: xw, b: xb }, LayerWeights::Conv { w: yw, b: yb }) => {
                        assert_eq!(xw.data(), yw.data());
                        assert_eq!(xb, yb);
                    }
                    _ => panic!("unexpected layer kinds"),
                },
                _ => panic!("layer presence changed"),
            }
        }
        for (t, ha) in a.heads.iter() {
            let hb = &b.heads[t];
            assert_eq!(ha.w.data(), hb.w.data());
            assert_eq!(ha.b, hb.b);
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut net = Network::new(vec![], Shape::Flat(2), 91).unwrap();
        net.add_head(0, 2, 92);
        // A head this saturated drives the cross-entropy past f64::MAX on the
        // very first batch.
        if let Some(h) = net.heads.get_mut(&0) {
            h.w = Matrix::from_vec(2, 2, vec![1.7e308, 1.7e308, -1.7e308, -1.7e308]);
        }
        let batch = flat_batch(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![1, 1]);
        let err = train(&net, 0, &batch, &TrainOpts::new(3, 0.1, 2, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 }), "got {err:?}");
    }

    #[test]
    fn forward_unknown_task_and_bad_labels() {
        let mut net = Network::new(vec![], Shape::Flat(2), 93).unwrap();
        net.add_head(0, 2, 94);
        let x = Matrix::from_vec(1, 2, vec![0.5, 0.5]);
        assert!(matches!(net.forward(7, &x), Err(Error::UnknownTask(7))));
        let batch = flat_batch(vec![vec![0.5, 0.5]], vec![5]);
        assert!(net.backward(0, &batch).is_err());
    }
}
