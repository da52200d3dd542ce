//! Reverse-mode automatic differentiation over layer-granular operations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and whatever it needs for the backward rule. Nodes can only refer to
//! nodes created before them, so the append order is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use thiserror::Error;

use crate::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in layer `{layer}`: {detail}")]
    Dimension { layer: String, detail: String },
    #[error("channel mismatch in layer `{layer}`: expected {expected} input channels, got {actual}")]
    Channel {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn dim_err(layer: &str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Dimension {
        layer: layer.to_string(),
        detail: detail.into(),
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Batch-norm statistics source for one forward pass.
pub enum BatchNormStats<'a, T> {
    /// Normalize with batch statistics and fold them into the running buffers.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    /// Normalize with the stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

enum Op<T> {
    Input,
    Param(String),
    MaskMul {
        x: NodeId,
        mask: Vec<T>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Flatten {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Square {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, usize)>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// `(parameter name, gradient)` for every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params
            .iter()
            .filter_map(|(name, i)| self.grads[*i].as_deref().map(|g| (name.as_str(), g)))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf bound to a parameter name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Param(name.to_string()), true)
    }

    /// Elementwise product with a fixed 0/1 mask; the mask also gates the gradient.
    pub fn mask_mul(&mut self, layer: &str, x: NodeId, mask: Vec<T>) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(dim_err(
                layer,
                format!("mask has {} entries, tensor has {}", mask.len(), xv.len()),
            ));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MaskMul { x, mask }, rg))
    }

    /// `y = x · w + b` with `x: (N, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(
        &mut self,
        layer: &str,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(dim_err(layer, format!("linear expects 2-D input and weight, got {xs:?} and {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[1]);
        if ws[0] != fin {
            return Err(dim_err(layer, format!("input has {fin} features, weight expects {}", ws[0])));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != fout {
                return Err(dim_err(layer, format!("bias has {} entries, expected {fout}", bv.len())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nn(n, fin, fout, self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(vec![n, fout], out)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution with square kernels; `x: (N, C, H, W)`, `w: (O, C, k, k)`.
    pub fn conv2d(
        &mut self,
        layer: &str,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err(layer, format!("conv2d expects (N,C,H,W) input and (O,C,k,k) weight, got {xs:?} and {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[1] != c {
            return Err(AutodiffError::Channel {
                layer: layer.to_string(),
                expected: ws[1],
                actual: c,
            });
        }
        let geometry = ConvGeometry::new(c, h, wd, k, stride, padding)
            .ok_or_else(|| dim_err(layer, format!("kernel {k} does not fit a {h}x{wd} input with padding {padding}")))?;
        let (rows, ncols) = (geometry.col_rows(), geometry.col_cols());
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != o {
                    return Err(dim_err(layer, format!("bias has {} entries, expected {o}", bv.len())));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = vec![T::zero(); n * o * ncols];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let img = c * h * wd;
        for s in 0..n {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            im2col(&geometry, &xd[s * img..(s + 1) * img], col);
            let dst = &mut out[s * o * ncols..(s + 1) * o * ncols];
            if let Some(bias) = &bias {
                for (ch, plane) in dst.chunks_mut(ncols).enumerate() {
                    plane.fill(bias[ch]);
                }
            }
            gemm_nn(o, rows, ncols, wdata, col, dst);
        }
        let value = Tensor::new(vec![n, o, geometry.out_height, geometry.out_width], out)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geometry,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization of `(N, C, H, W)` or `(N, C)` input.
    pub fn batch_norm(
        &mut self,
        layer: &str,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BatchNormStats<'_, T>,
        eps: T,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 && xs.len() != 2 {
            return Err(dim_err(layer, format!("batch norm expects 2-D or 4-D input, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(AutodiffError::Channel {
                layer: layer.to_string(),
                expected: gv.len(),
                actual: c,
            });
        }
        let count = n * spatial;
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            BatchNormStats::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(dim_err(layer, "running statistics do not match channel count"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        mean[ch] += xd[base..base + spatial].iter().copied().sum::<T>();
                    }
                }
                let inv_count = T::one() / T::lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv_count);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        var[ch] += xd[base..base + spatial]
                            .iter()
                            .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<T>();
                    }
                }
                let unbias = if count > 1 {
                    T::lit(count as f64) / T::lit((count - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..c {
                    var[ch] *= inv_count;
                    running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean[ch];
                    running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * var[ch] * unbias;
                }
                (mean, var, true)
            }
            BatchNormStats::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(dim_err(layer, "running statistics do not match channel count"));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("relu preserves shape");
        let rg = self.needs(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn max_pool2d(&mut self, layer: &str, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err(layer, format!("max pool expects (N,C,H,W), got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(dim_err(layer, format!("pool window {kernel} does not fit {h}x{w}")));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Averages over every spatial position: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, layer: &str, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err(layer, format!("global average pool expects (N,C,H,W), got {xs:?}")));
        }
        let spatial = xs[2] * xs[3];
        let scale = T::one() / T::lit(spatial as f64);
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.shape().first().copied().unwrap_or(1);
        let value = xv
            .clone()
            .reshape(vec![n, xv.len() / n])
            .expect("flatten preserves element count");
        let rg = self.needs(x);
        self.push(value, Op::Flatten { x }, rg)
    }

    pub fn add(&mut self, layer: &str, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                layer,
                format!("cannot add {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("square preserves shape");
        let rg = self.needs(x);
        self.push(value, Op::Square { x }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("logits {ls:?} do not match {} labels", labels.len()),
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(AutodiffError::LabelOutOfRange { label, classes: k });
            }
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += z.ln() + max - row[label];
        }
        loss /= T::lit(n as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    params.push((name.clone(), i));
                    grads[i] = Some(g);
                }
                Op::MaskMul { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let (n, fin) = (xs[0], xs[1]);
                    let fout = node.value.shape()[1];
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); n * fin];
                        gemm_nt(n, fout, fin, &g, self.value(*w).data(), &mut dx);
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); fin * fout];
                        gemm_tn(n, fin, fout, self.value(*x).data(), &g, &mut dw);
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geometry,
                    cols,
                } => {
                    let n = self.shape(*x)[0];
                    let o = node.value.shape()[1];
                    let (rows, ncols) = (geometry.col_rows(), geometry.col_cols());
                    let img = geometry.channels * geometry.height * geometry.width;
                    let wdata = self.value(*w).data();
                    let mut dw = self.needs(*w).then(|| vec![T::zero(); o * rows]);
                    let mut dx = self.needs(*x).then(|| vec![T::zero(); n * img]);
                    let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![T::zero(); o]);
                    let mut dcol = vec![T::zero(); rows * ncols];
                    for s in 0..n {
                        let gs = &g[s * o * ncols..(s + 1) * o * ncols];
                        let col = &cols[s * rows * ncols..(s + 1) * rows * ncols];
                        if let Some(dw) = dw.as_mut() {
                            gemm_nt(o, ncols, rows, gs, col, dw);
                        }
                        if let Some(dx) = dx.as_mut() {
                            dcol.fill(T::zero());
                            gemm_tn(o, rows, ncols, wdata, gs, &mut dcol);
                            col2im(geometry, &dcol, &mut dx[s * img..(s + 1) * img]);
                        }
                        if let Some(db) = db.as_mut() {
                            for (d, plane) in db.iter_mut().zip(gs.chunks(ncols)) {
                                *d += plane.iter().copied().sum::<T>();
                            }
                        }
                    }
                    if let Some(dw) = dw {
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if let (Some(db), Some(b)) = (db, b) {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let spatial: usize = xs[2..].iter().product();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for i in base..base + spatial {
                                dgamma[ch] += g[i] * xhat[i];
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); g.len()];
                        let m = T::lit((n * spatial) as f64);
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * spatial;
                                let scale = gv[ch] * inv_std[ch];
                                for i in base..base + spatial {
                                    dx[i] = if *batch_stats {
                                        scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                    } else {
                                        scale * g[i]
                                    };
                                }
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        self.accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.needs(*beta) {
                        self.accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Relu { x } => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&d, &src) in g.iter().zip(argmax) {
                        dx[src] += d;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.shape(*x);
                    let spatial = xs[2] * xs[3];
                    let scale = T::one() / T::lit(spatial as f64);
                    let dx = g
                        .iter()
                        .flat_map(|&d| std::iter::repeat_n(d * scale, spatial))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Flatten { x } => self.accumulate(&mut grads, *x, g),
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Square { x } => {
                    let two = T::lit(2.0);
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| two * v * d)
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let dx = vec![g[0]; self.value(*x).len()];
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / T::lit(labels.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &label) in labels.iter().enumerate() {
                        dl[i * k + label] -= scale;
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: NodeId, contribution: Vec<T>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, &c)| *e += c),
            slot => *slot = Some(contribution),
        }
    }
}
