//! Reverse-mode autodiff over a recorded op tape.
//!
//! Values live in an arena owned by the tape and are addressed by `TensorId`.
//! Recording an op validates shapes, runs the forward kernel immediately, and
//! appends a node only when some input requires a gradient, so eval-mode
//! graphs cost nothing beyond the forward values. `backward` walks nodes in
//! reverse, sums gradients into multi-consumer inputs, and frees each
//! intermediate gradient as soon as its producing node has been processed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, row_major_strides, Element, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug)]
pub enum Op<E: Element> {
    Add,
    Sub,
    Mul,
    MatMul,
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Pad { before: Vec<usize>, after: Vec<usize> },
    Slice { start: Vec<usize>, stop: Vec<usize>, step: Vec<usize> },
    Broadcast { shape: Vec<usize> },
    Relu,
    Relu6,
    Exp,
    Log,
    /// Empty `axes` reduces over every axis.
    Sum { axes: Vec<usize>, keep_dims: bool },
    Mean { axes: Vec<usize>, keep_dims: bool },
    MaxReduce { axes: Vec<usize>, keep_dims: bool },
    /// Inputs: x, kernel [kh,kw,c,cout], optional bias [cout].
    Conv2d { stride: usize, padding: Padding },
    /// Inputs: x, kernel [kh,kw,c].
    DepthwiseConv2d { stride: usize, padding: Padding },
    MaxPool2d { window: usize, stride: usize },
    /// Inputs: x, scale, shift. `mean`/`var` are the statistics the forward
    /// pass normalizes with; `batch_stats` says they came from this batch,
    /// which switches backward to the full training-mode formula.
    BatchNorm { mean: Vec<E>, var: Vec<E>, eps: E, batch_stats: bool },
    /// Input: theta [n,2,3]. Emits a pixel-space sampling grid [n,oh,ow,2].
    AffineGrid { out_hw: (usize, usize), src_hw: (usize, usize) },
    /// Inputs: image [n,h,w,c], grid [n,oh,ow,2] in pixel coordinates.
    GridSample,
}

impl<E: Element> Op<E> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Pad { .. } => "pad",
            Op::Slice { .. } => "slice",
            Op::Broadcast { .. } => "broadcast",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxReduce { .. } => "max_reduce",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AffineGrid { .. } => "affine_grid",
            Op::GridSample => "grid_sample",
        }
    }
}

enum Saved {
    None,
    Indices(Vec<u32>),
}

struct Node<E: Element> {
    op: Op<E>,
    inputs: Vec<TensorId>,
    out: TensorId,
}

struct Entry<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    producer: Option<usize>,
    saved: Saved,
}

pub struct Gradients<E: Element> {
    map: HashMap<TensorId, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<E>> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor<E>> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Tape<E: Element> {
    entries: Vec<Entry<E>>,
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), nodes: Vec::new() }
    }

    /// Puts a value on the tape as a leaf.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.entries.len());
        self.entries.push(Entry { value, requires_grad, producer: None, saved: Saved::None });
        id
    }

    pub fn constant(&mut self, value: Tensor<E>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn try_value(&self, id: TensorId) -> Result<&Tensor<E>> {
        self.entries.get(id.0).map(|e| &e.value).ok_or(Error::NotOnTape { id: id.0 })
    }

    /// Panics on an id from another tape; use `try_value` when unsure.
    pub fn value(&self, id: TensorId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.entries[id.0].requires_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.nodes.clear();
    }

    /// Validates, runs the forward kernel, and appends a node when any input
    /// requires a gradient.
    pub fn record(&mut self, op: Op<E>, inputs: &[TensorId]) -> Result<TensorId> {
        for id in inputs {
            if id.0 >= self.entries.len() {
                return Err(Error::NotOnTape { id: id.0 });
            }
        }
        let vals: Vec<&Tensor<E>> = inputs.iter().map(|id| &self.entries[id.0].value).collect();
        let (value, saved) = forward(&op, &vals)?;
        let requires_grad = inputs.iter().any(|id| self.entries[id.0].requires_grad);
        let out = TensorId(self.entries.len());
        let producer = requires_grad.then(|| {
            self.nodes.push(Node { op, inputs: inputs.to_vec(), out });
            self.nodes.len() - 1
        });
        self.entries.push(Entry { value, requires_grad, producer, saved });
        Ok(out)
    }

    /// Accumulates d(loss)/d(leaf) for every requires-grad leaf reachable
    /// from `loss`, which must be scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<E>> {
        let lentry = self.try_value(loss)?;
        if lentry.numel() != 1 {
            return Err(Error::LossNotScalar { shape: lentry.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<E>>> = Vec::new();
        grads.resize_with(self.entries.len(), || None);
        grads[loss.0] = Some(Tensor::full(lentry.shape(), E::one()));
        if let Some(last) = self.entries[loss.0].producer {
            for ni in (0..=last).rev() {
                let Some(gout) = grads[self.nodes[ni].out.0].take() else { continue };
                let node = &self.nodes[ni];
                let igrads = self.input_grads(node, &gout)?;
                for (id, ig) in node.inputs.clone().into_iter().zip(igrads) {
                    let Some(ig) = ig else { continue };
                    match &mut grads[id.0] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        let mut map = HashMap::new();
        for (i, slot) in grads.iter_mut().enumerate() {
            let Some(g) = slot.take() else { continue };
            let e = &self.entries[i];
            if e.requires_grad && e.producer.is_none() {
                map.insert(TensorId(i), g);
            }
        }
        Ok(Gradients { map })
    }

    fn input_grads(&self, node: &Node<E>, gout: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let need: Vec<bool> = node.inputs.iter().map(|id| self.entries[id.0].requires_grad).collect();
        let val = |k: usize| &self.entries[node.inputs[k].0].value;
        let out_val = &self.entries[node.out.0].value;
        let out_saved = &self.entries[node.out.0].saved;
        let g = gout.data();
        let grads = match &node.op {
            Op::Add => vec![
                need[0].then(|| gout.clone()),
                need[1].then(|| gout.clone()),
            ],
            Op::Sub => vec![
                need[0].then(|| gout.clone()),
                need[1].then(|| gout.map(|v| -v)),
            ],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    need[0].then(|| zip_mul(gout, b)),
                    need[1].then(|| zip_mul(gout, a)),
                ]
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let da = need[0].then(|| {
                    let bt = kernels::transpose2d(b.data(), k, n);
                    Tensor::new(vec![m, k], kernels::matmul(g, &bt, m, n, k)).expect("shape")
                });
                let db = need[1].then(|| {
                    let at = kernels::transpose2d(a.data(), m, k);
                    Tensor::new(vec![k, n], kernels::matmul(&at, g, k, m, n)).expect("shape")
                });
                vec![da, db]
            }
            Op::Reshape { .. } => {
                vec![need[0].then(|| gout.reshaped(val(0).shape()).expect("same numel"))]
            }
            Op::Transpose { perm } => {
                // walking the input in row-major order visits gout at the
                // same derived offsets the forward pass wrote to
                vec![need[0].then(|| {
                    let in_shape = val(0).shape();
                    let strides = transpose_strides(in_shape, perm);
                    let mut dx = vec![E::zero(); val(0).numel()];
                    let mut i = 0;
                    kernels::walk(in_shape, &strides, |off| {
                        dx[i] = g[off];
                        i += 1;
                    });
                    Tensor::new(in_shape.to_vec(), dx).expect("shape")
                })]
            }
            Op::Pad { before, .. } => {
                vec![need[0].then(|| {
                    let in_shape = val(0).shape();
                    let out_strides = row_major_strides(gout.shape());
                    let base: usize = before.iter().zip(&out_strides).map(|(b, s)| b * s).sum();
                    let strides: Vec<isize> = out_strides.iter().map(|&s| s as isize).collect();
                    let mut dx = vec![E::zero(); val(0).numel()];
                    let mut i = 0;
                    kernels::walk(in_shape, &strides, |off| {
                        dx[i] = g[base + off];
                        i += 1;
                    });
                    Tensor::new(in_shape.to_vec(), dx).expect("shape")
                })]
            }
            Op::Slice { start, step, .. } => {
                vec![need[0].then(|| {
                    let in_shape = val(0).shape();
                    let in_strides = row_major_strides(in_shape);
                    let base: usize = start.iter().zip(&in_strides).map(|(b, s)| b * s).sum();
                    let strides: Vec<isize> =
                        in_strides.iter().zip(step).map(|(&s, &st)| (s * st) as isize).collect();
                    let mut dx = vec![E::zero(); val(0).numel()];
                    let mut i = 0;
                    kernels::walk(gout.shape(), &strides, |off| {
                        dx[base + off] += g[i];
                        i += 1;
                    });
                    Tensor::new(in_shape.to_vec(), dx).expect("shape")
                })]
            }
            Op::Broadcast { .. } => {
                vec![need[0].then(|| {
                    let in_shape = val(0).shape();
                    let strides = broadcast_strides(in_shape, gout.shape());
                    let mut dx = vec![E::zero(); val(0).numel()];
                    let mut i = 0;
                    kernels::walk(gout.shape(), &strides, |off| {
                        dx[off] += g[i];
                        i += 1;
                    });
                    Tensor::new(in_shape.to_vec(), dx).expect("shape")
                })]
            }
            Op::Relu => {
                let y = out_val.data();
                vec![need[0].then(|| {
                    Tensor::new(
                        gout.shape().to_vec(),
                        g.iter().zip(y).map(|(&gv, &yv)| if yv > E::zero() { gv } else { E::zero() }).collect(),
                    )
                    .expect("shape")
                })]
            }
            Op::Relu6 => {
                let y = out_val.data();
                let six = E::from_f64(6.0);
                vec![need[0].then(|| {
                    Tensor::new(
                        gout.shape().to_vec(),
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &yv)| if yv > E::zero() && yv < six { gv } else { E::zero() })
                            .collect(),
                    )
                    .expect("shape")
                })]
            }
            Op::Exp => {
                let y = out_val.data();
                vec![need[0].then(|| {
                    Tensor::new(gout.shape().to_vec(), g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect())
                        .expect("shape")
                })]
            }
            Op::Log => {
                let x = val(0).data();
                vec![need[0].then(|| {
                    Tensor::new(gout.shape().to_vec(), g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect())
                        .expect("shape")
                })]
            }
            Op::Sum { axes, keep_dims } | Op::Mean { axes, keep_dims } => {
                let in_shape = val(0).shape();
                let axes = normalize_axes(axes, in_shape.len());
                let scale = match &node.op {
                    Op::Mean { .. } => {
                        let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                        E::from_f64(1.0 / count as f64)
                    }
                    _ => E::one(),
                };
                let _ = keep_dims;
                vec![need[0].then(|| {
                    let strides = reduce_strides(in_shape, &axes);
                    let mut dx = vec![E::zero(); val(0).numel()];
                    let mut i = 0;
                    kernels::walk(in_shape, &strides, |off| {
                        dx[i] = g[off] * scale;
                        i += 1;
                    });
                    Tensor::new(in_shape.to_vec(), dx).expect("shape")
                })]
            }
            Op::MaxReduce { .. } => {
                let Saved::Indices(arg) = out_saved else { unreachable!("max_reduce saves argmax") };
                vec![need[0].then(|| {
                    Tensor::new(
                        val(0).shape().to_vec(),
                        kernels::scatter_add_by_index(g, arg, val(0).numel()),
                    )
                    .expect("shape")
                })]
            }
            Op::Conv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geom = conv_geom(x.shape(), w.shape()[0], w.shape()[1], w.shape()[3], *stride, *padding, "conv2d")?;
                let has_bias = node.inputs.len() == 3;
                let kg = kernels::conv2d_bwd(
                    x.data(),
                    w.data(),
                    g,
                    &geom,
                    need[0],
                    need[1],
                    has_bias && need[2],
                );
                let mut out = vec![
                    kg.dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
                    kg.dw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape")),
                ];
                if has_bias {
                    out.push(kg.db.map(|d| Tensor::new(vec![geom.cout], d).expect("shape")));
                }
                out
            }
            Op::DepthwiseConv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geom = conv_geom(x.shape(), w.shape()[0], w.shape()[1], x.shape()[3], *stride, *padding, "depthwise_conv2d")?;
                let (dx, dw) = kernels::depthwise_bwd(x.data(), w.data(), g, &geom, need[0], need[1]);
                vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape")),
                ]
            }
            Op::MaxPool2d { .. } => {
                let Saved::Indices(arg) = out_saved else { unreachable!("max_pool saves argmax") };
                vec![need[0].then(|| {
                    Tensor::new(
                        val(0).shape().to_vec(),
                        kernels::scatter_add_by_index(g, arg, val(0).numel()),
                    )
                    .expect("shape")
                })]
            }
            Op::BatchNorm { mean, var, eps, batch_stats } => {
                let x = val(0);
                let scale = val(1);
                let (dx, dscale, dshift) = if *batch_stats {
                    kernels::bn_bwd_train(x.data(), g, scale.data(), mean, var, *eps)
                } else {
                    kernels::bn_bwd_eval(x.data(), g, scale.data(), mean, var, *eps)
                };
                let c = scale.numel();
                vec![
                    need[0].then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape")),
                    need[1].then(|| Tensor::new(vec![c], dscale).expect("shape")),
                    need[2].then(|| Tensor::new(vec![c], dshift).expect("shape")),
                ]
            }
            Op::AffineGrid { out_hw, src_hw } => {
                let n = val(0).shape()[0];
                vec![need[0].then(|| {
                    let d = kernels::affine_grid_bwd(g, n, out_hw.0, out_hw.1, src_hw.0, src_hw.1);
                    Tensor::new(vec![n, 2, 3], d).expect("shape")
                })]
            }
            Op::GridSample => {
                let (img, grid) = (val(0), val(1));
                let [n, h, w, c] = [img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]];
                let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
                let (dimg, dgrid) = kernels::grid_sample_bwd(
                    img.data(),
                    grid.data(),
                    g,
                    n,
                    h,
                    w,
                    c,
                    oh,
                    ow,
                    need[0],
                    need[1],
                );
                vec![
                    dimg.map(|d| Tensor::new(img.shape().to_vec(), d).expect("shape")),
                    dgrid.map(|d| Tensor::new(grid.shape().to_vec(), d).expect("shape")),
                ]
            }
        };
        Ok(grads)
    }

    // ── op helpers ──────────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        self.record(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        self.record(Op::Transpose { perm: perm.to_vec() }, &[x])
    }

    pub fn pad(&mut self, x: TensorId, before: &[usize], after: &[usize]) -> Result<TensorId> {
        self.record(Op::Pad { before: before.to_vec(), after: after.to_vec() }, &[x])
    }

    pub fn slice(&mut self, x: TensorId, start: &[usize], stop: &[usize], step: &[usize]) -> Result<TensorId> {
        self.record(
            Op::Slice { start: start.to_vec(), stop: stop.to_vec(), step: step.to_vec() },
            &[x],
        )
    }

    pub fn broadcast(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        self.record(Op::Broadcast { shape: shape.to_vec() }, &[x])
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(Op::Relu, &[x])
    }

    pub fn relu6(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(Op::Relu6, &[x])
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(Op::Log, &[x])
    }

    pub fn sum(&mut self, x: TensorId, axes: &[usize], keep_dims: bool) -> Result<TensorId> {
        self.record(Op::Sum { axes: axes.to_vec(), keep_dims }, &[x])
    }

    pub fn mean(&mut self, x: TensorId, axes: &[usize], keep_dims: bool) -> Result<TensorId> {
        self.record(Op::Mean { axes: axes.to_vec(), keep_dims }, &[x])
    }

    pub fn max_reduce(&mut self, x: TensorId, axes: &[usize], keep_dims: bool) -> Result<TensorId> {
        self.record(Op::MaxReduce { axes: axes.to_vec(), keep_dims }, &[x])
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.record(Op::Conv2d { stride, padding }, &inputs)
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        self.record(Op::DepthwiseConv2d { stride, padding }, &[x, kernel])
    }

    pub fn max_pool2d(&mut self, x: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        self.record(Op::MaxPool2d { window, stride }, &[x])
    }

    pub fn batch_norm(
        &mut self,
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        mean: Vec<E>,
        var: Vec<E>,
        eps: E,
        batch_stats: bool,
    ) -> Result<TensorId> {
        self.record(Op::BatchNorm { mean, var, eps, batch_stats }, &[x, scale, shift])
    }

    pub fn affine_grid(
        &mut self,
        theta: TensorId,
        out_hw: (usize, usize),
        src_hw: (usize, usize),
    ) -> Result<TensorId> {
        self.record(Op::AffineGrid { out_hw, src_hw }, &[theta])
    }

    pub fn grid_sample(&mut self, image: TensorId, grid: TensorId) -> Result<TensorId> {
        self.record(Op::GridSample, &[image, grid])
    }
}

// ── shape helpers shared by forward and backward ────────────────────────────

fn normalize_axes(axes: &[usize], rank: usize) -> Vec<usize> {
    if axes.is_empty() {
        (0..rank).collect()
    } else {
        axes.to_vec()
    }
}

fn validate_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidShape { op, detail: format!("axis {a} out of range for rank {rank}") });
        }
        if seen[a] {
            return Err(Error::InvalidShape { op, detail: format!("axis {a} repeated") });
        }
        seen[a] = true;
    }
    Ok(())
}

fn reduced_shape(in_shape: &[usize], axes: &[usize], keep_dims: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &d) in in_shape.iter().enumerate() {
        if axes.contains(&i) {
            if keep_dims {
                out.push(1);
            }
        } else {
            out.push(d);
        }
    }
    out
}

/// Derived strides that map an input walk onto the reduced output buffer.
fn reduce_strides(in_shape: &[usize], axes: &[usize]) -> Vec<isize> {
    let keep: Vec<usize> = reduced_shape(in_shape, axes, true);
    let kstr = row_major_strides(&keep);
    in_shape
        .iter()
        .enumerate()
        .map(|(i, _)| if axes.contains(&i) { 0 } else { kstr[i] as isize })
        .collect()
}

/// Derived strides that map an output walk onto the (right-aligned,
/// possibly dim-1) input buffer.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<isize> {
    let offset = out_shape.len() - in_shape.len();
    let in_strides = row_major_strides(in_shape);
    out_shape
        .iter()
        .enumerate()
        .map(|(o, _)| {
            if o < offset {
                0
            } else if in_shape[o - offset] == 1 {
                0
            } else {
                in_strides[o - offset] as isize
            }
        })
        .collect()
}

/// Derived strides for walking the input of a transpose in row-major order
/// while writing at the permuted output offsets.
fn transpose_strides(in_shape: &[usize], perm: &[usize]) -> Vec<isize> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let out_strides = row_major_strides(&out_shape);
    let mut inv = vec![0usize; perm.len()];
    for (o, &p) in perm.iter().enumerate() {
        inv[p] = o;
    }
    (0..in_shape.len()).map(|ax| out_strides[inv[ax]] as isize).collect()
}

fn conv_geom(
    x_shape: &[usize],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    padding: Padding,
    op: &'static str,
) -> Result<ConvGeom> {
    ConvGeom::resolve(x_shape[0], x_shape[1], x_shape[2], x_shape[3], kh, kw, cout, stride, padding).ok_or(
        Error::InvalidShape {
            op,
            detail: format!(
                "kernel {kh}x{kw} stride {stride} does not fit input {}x{}",
                x_shape[1], x_shape[2]
            ),
        },
    )
}

fn zip_mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
    .expect("shape")
}

fn expect_rank<E: Element>(op: &'static str, t: &Tensor<E>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn expect_arity(op: &'static str, got: usize, want: std::ops::RangeInclusive<usize>) -> Result<()> {
    if !want.contains(&got) {
        return Err(Error::InvalidShape { op, detail: format!("expected {want:?} inputs, got {got}") });
    }
    Ok(())
}

fn forward<E: Element>(op: &Op<E>, vals: &[&Tensor<E>]) -> Result<(Tensor<E>, Saved)> {
    let name = op.name();
    let plain = |t: Tensor<E>| (t, Saved::None);
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            expect_arity(name, vals.len(), 2..=2)?;
            let (a, b) = (vals[0], vals[1]);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch { op: name, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Ok(plain(Tensor::new(a.shape().to_vec(), data)?))
        }
        Op::MatMul => {
            expect_arity(name, vals.len(), 2..=2)?;
            let (a, b) = (vals[0], vals[1]);
            expect_rank(name, a, 2)?;
            expect_rank(name, b, 2)?;
            if a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch { op: name, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Ok(plain(Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?))
        }
        Op::Reshape { shape } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            if numel(shape) != x.numel() || shape.iter().any(|&d| d == 0) {
                return Err(Error::ShapeMismatch { op: name, lhs: x.shape().to_vec(), rhs: shape.clone() });
            }
            Ok(plain(Tensor::new(shape.clone(), x.data().to_vec())?))
        }
        Op::Transpose { perm } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(Error::InvalidShape {
                    op: name,
                    detail: format!("perm {:?} is not a permutation of rank {}", perm, x.rank()),
                });
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            let strides = transpose_strides(x.shape(), perm);
            let mut out = vec![E::zero(); x.numel()];
            let mut i = 0;
            let data = x.data();
            kernels::walk(x.shape(), &strides, |off| {
                out[off] = data[i];
                i += 1;
            });
            Ok(plain(Tensor::new(out_shape, out)?))
        }
        Op::Pad { before, after } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            if before.len() != x.rank() || after.len() != x.rank() {
                return Err(Error::InvalidShape {
                    op: name,
                    detail: format!("pad widths rank {}/{} vs tensor rank {}", before.len(), after.len(), x.rank()),
                });
            }
            let out_shape: Vec<usize> =
                x.shape().iter().zip(before).zip(after).map(|((&d, &b), &a)| d + b + a).collect();
            let out_strides = row_major_strides(&out_shape);
            let base: usize = before.iter().zip(&out_strides).map(|(b, s)| b * s).sum();
            let strides: Vec<isize> = out_strides.iter().map(|&s| s as isize).collect();
            let mut out = vec![E::zero(); numel(&out_shape)];
            let mut i = 0;
            let data = x.data();
            kernels::walk(x.shape(), &strides, |off| {
                out[base + off] = data[i];
                i += 1;
            });
            Ok(plain(Tensor::new(out_shape, out)?))
        }
        Op::Slice { start, stop, step } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            if start.len() != x.rank() || stop.len() != x.rank() || step.len() != x.rank() {
                return Err(Error::InvalidShape { op: name, detail: "slice spec rank mismatch".into() });
            }
            let mut out_shape = Vec::with_capacity(x.rank());
            for ax in 0..x.rank() {
                if step[ax] == 0 || start[ax] >= stop[ax] || stop[ax] > x.shape()[ax] {
                    return Err(Error::InvalidShape {
                        op: name,
                        detail: format!(
                            "axis {ax}: start {} stop {} step {} out of bounds for dim {}",
                            start[ax], stop[ax], step[ax], x.shape()[ax]
                        ),
                    });
                }
                out_shape.push((stop[ax] - start[ax]).div_ceil(step[ax]));
            }
            let in_strides = row_major_strides(x.shape());
            let base: usize = start.iter().zip(&in_strides).map(|(b, s)| b * s).sum();
            let strides: Vec<isize> =
                in_strides.iter().zip(step).map(|(&s, &st)| (s * st) as isize).collect();
            let mut out = vec![E::zero(); numel(&out_shape)];
            let mut i = 0;
            let data = x.data();
            kernels::walk(&out_shape, &strides, |off| {
                out[i] = data[base + off];
                i += 1;
            });
            Ok(plain(Tensor::new(out_shape, out)?))
        }
        Op::Broadcast { shape } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            if shape.len() < x.rank() {
                return Err(Error::ShapeMismatch { op: name, lhs: x.shape().to_vec(), rhs: shape.clone() });
            }
            let offset = shape.len() - x.rank();
            for (i, &d) in x.shape().iter().enumerate() {
                if d != shape[offset + i] && d != 1 {
                    return Err(Error::ShapeMismatch { op: name, lhs: x.shape().to_vec(), rhs: shape.clone() });
                }
            }
            let strides = broadcast_strides(x.shape(), shape);
            let mut out = vec![E::zero(); numel(shape)];
            let mut i = 0;
            let data = x.data();
            kernels::walk(shape, &strides, |off| {
                out[i] = data[off];
                i += 1;
            });
            Ok(plain(Tensor::new(shape.clone(), out)?))
        }
        Op::Relu => {
            expect_arity(name, vals.len(), 1..=1)?;
            Ok(plain(vals[0].map(|v| if v > E::zero() { v } else { E::zero() })))
        }
        Op::Relu6 => {
            expect_arity(name, vals.len(), 1..=1)?;
            let six = E::from_f64(6.0);
            Ok(plain(vals[0].map(|v| {
                if v <= E::zero() {
                    E::zero()
                } else if v >= six {
                    six
                } else {
                    v
                }
            })))
        }
        Op::Exp => {
            expect_arity(name, vals.len(), 1..=1)?;
            Ok(plain(vals[0].map(|v| v.exp())))
        }
        Op::Log => {
            expect_arity(name, vals.len(), 1..=1)?;
            Ok(plain(vals[0].map(|v| v.ln())))
        }
        Op::Sum { axes, keep_dims } | Op::Mean { axes, keep_dims } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            let axes = normalize_axes(axes, x.rank());
            validate_axes(name, &axes, x.rank())?;
            let out_shape = reduced_shape(x.shape(), &axes, *keep_dims);
            let strides = reduce_strides(x.shape(), &axes);
            let mut out = vec![E::zero(); numel(&out_shape)];
            let mut i = 0;
            let data = x.data();
            kernels::walk(x.shape(), &strides, |off| {
                out[off] += data[i];
                i += 1;
            });
            if matches!(op, Op::Mean { .. }) {
                let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                let inv = E::from_f64(1.0 / count as f64);
                for v in &mut out {
                    *v *= inv;
                }
            }
            Ok(plain(Tensor::new(out_shape, out)?))
        }
        Op::MaxReduce { axes, keep_dims } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            let axes = normalize_axes(axes, x.rank());
            validate_axes(name, &axes, x.rank())?;
            if x.numel() > u32::MAX as usize {
                return Err(Error::InvalidShape { op: name, detail: "tensor too large for argmax bookkeeping".into() });
            }
            let out_shape = reduced_shape(x.shape(), &axes, *keep_dims);
            let strides = reduce_strides(x.shape(), &axes);
            let mut out = vec![E::neg_infinity(); numel(&out_shape)];
            let mut arg = vec![0u32; out.len()];
            let mut i = 0;
            let data = x.data();
            kernels::walk(x.shape(), &strides, |off| {
                if data[i] > out[off] {
                    out[off] = data[i];
                    arg[off] = i as u32;
                }
                i += 1;
            });
            Ok((Tensor::new(out_shape, out)?, Saved::Indices(arg)))
        }
        Op::Conv2d { stride, padding } => {
            expect_arity(name, vals.len(), 2..=3)?;
            let (x, w) = (vals[0], vals[1]);
            expect_rank(name, x, 4)?;
            expect_rank(name, w, 4)?;
            if x.shape()[3] != w.shape()[2] {
                return Err(Error::ShapeMismatch { op: name, lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
            }
            let geom = conv_geom(x.shape(), w.shape()[0], w.shape()[1], w.shape()[3], *stride, *padding, name)?;
            let bias = match vals.get(2) {
                Some(b) => {
                    if b.shape() != [geom.cout] {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            lhs: b.shape().to_vec(),
                            rhs: vec![geom.cout],
                        });
                    }
                    Some(b.data())
                }
                None => None,
            };
            let out = kernels::conv2d_fwd(x.data(), w.data(), bias, &geom);
            Ok(plain(Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.cout], out)?))
        }
        Op::DepthwiseConv2d { stride, padding } => {
            expect_arity(name, vals.len(), 2..=2)?;
            let (x, w) = (vals[0], vals[1]);
            expect_rank(name, x, 4)?;
            expect_rank(name, w, 3)?;
            if x.shape()[3] != w.shape()[2] {
                return Err(Error::ShapeMismatch { op: name, lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
            }
            let geom = conv_geom(x.shape(), w.shape()[0], w.shape()[1], x.shape()[3], *stride, *padding, name)?;
            let out = kernels::depthwise_fwd(x.data(), w.data(), &geom);
            Ok(plain(Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.c], out)?))
        }
        Op::MaxPool2d { window, stride } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let x = vals[0];
            expect_rank(name, x, 4)?;
            let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            if *window == 0 || *stride == 0 || h < *window || w < *window {
                return Err(Error::InvalidShape {
                    op: name,
                    detail: format!("window {window} stride {stride} does not fit input {h}x{w}"),
                });
            }
            if x.numel() > u32::MAX as usize {
                return Err(Error::InvalidShape { op: name, detail: "tensor too large for argmax bookkeeping".into() });
            }
            let (out, arg, oh, ow) = kernels::maxpool_fwd(x.data(), n, h, w, c, *window, *stride);
            Ok((Tensor::new(vec![n, oh, ow, c], out)?, Saved::Indices(arg)))
        }
        Op::BatchNorm { mean, var, eps, .. } => {
            expect_arity(name, vals.len(), 3..=3)?;
            let (x, scale, shift) = (vals[0], vals[1], vals[2]);
            if x.rank() < 2 {
                return Err(Error::InvalidShape { op: name, detail: format!("needs channels-last rank >= 2, got {:?}", x.shape()) });
            }
            let c = *x.shape().last().expect("rank >= 2");
            for (label, len) in [("scale", scale.numel()), ("shift", shift.numel()), ("mean", mean.len()), ("var", var.len())] {
                if len != c {
                    return Err(Error::InvalidShape {
                        op: name,
                        detail: format!("{label} has {len} channels, input has {c}"),
                    });
                }
            }
            let out = kernels::bn_fwd(x.data(), scale.data(), shift.data(), mean, var, *eps);
            Ok(plain(Tensor::new(x.shape().to_vec(), out)?))
        }
        Op::AffineGrid { out_hw, src_hw } => {
            expect_arity(name, vals.len(), 1..=1)?;
            let theta = vals[0];
            if theta.rank() != 3 || theta.shape()[1] != 2 || theta.shape()[2] != 3 {
                return Err(Error::InvalidShape {
                    op: name,
                    detail: format!("theta must be [n,2,3], got {:?}", theta.shape()),
                });
            }
            let n = theta.shape()[0];
            let (oh, ow) = *out_hw;
            let (sh, sw) = *src_hw;
            if oh == 0 || ow == 0 || sh == 0 || sw == 0 {
                return Err(Error::InvalidShape { op: name, detail: "grid extents must be positive".into() });
            }
            let grid = kernels::affine_grid_fwd(theta.data(), n, oh, ow, sh, sw);
            Ok(plain(Tensor::new(vec![n, oh, ow, 2], grid)?))
        }
        Op::GridSample => {
            expect_arity(name, vals.len(), 2..=2)?;
            let (img, grid) = (vals[0], vals[1]);
            expect_rank(name, img, 4)?;
            expect_rank(name, grid, 4)?;
            if grid.shape()[3] != 2 || grid.shape()[0] != img.shape()[0] {
                return Err(Error::ShapeMismatch { op: name, lhs: img.shape().to_vec(), rhs: grid.shape().to_vec() });
            }
            let [n, h, w, c] = [img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]];
            let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
            let out = kernels::grid_sample_fwd(img.data(), grid.data(), n, h, w, c, oh, ow);
            Ok(plain(Tensor::new(vec![n, oh, ow, c], out)?))
        }
    }
}
