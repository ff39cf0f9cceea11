//! Neural-net layers recorded onto a tape.
//!
//! Layer functions bind their parameter tensors as tape leaves and append the
//! ids to `binds` in a fixed canonical order (documented per struct). The
//! optimizer relies on that order matching `Model::visit_trainable_mut`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Padding, Tape, TensorId};
use crate::tensor::{Element, Tensor};

/// Fan-in scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)). Drawn in
/// f64 row major, so f32 and f64 models built from one seed see the same
/// values.
pub fn he_uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Linear,
    Relu,
    Relu6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub fn activate<E: Element>(tape: &mut Tape<E>, x: TensorId, act: Act) -> Result<TensorId> {
    match act {
        Act::Linear => Ok(x),
        Act::Relu => tape.relu(x),
        Act::Relu6 => tape.relu6(x),
    }
}

// ── convolution ─────────────────────────────────────────────────────────────

/// Bind order: kernel, then bias if present.
#[derive(Clone, Debug)]
pub struct ConvParams<E: Element> {
    pub kernel: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: Padding,
}

impl<E: Element> ConvParams<E> {
    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

pub fn conv2d<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    p: &ConvParams<E>,
    act: Act,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let k = tape.leaf(p.kernel.clone(), trainable);
    binds.push(k);
    let b = p.bias.as_ref().map(|b| {
        let id = tape.leaf(b.clone(), trainable);
        binds.push(id);
        id
    });
    let y = tape.conv2d(x, k, b, p.stride, p.padding)?;
    activate(tape, y, act)
}

// ── batch norm ──────────────────────────────────────────────────────────────

/// Bind order: scale, shift. Running statistics use biased batch variance and
/// are blended as `running = momentum*running + (1-momentum)*batch`; the first
/// training batch copies its statistics outright.
#[derive(Clone, Debug)]
pub struct BatchNormState<E: Element> {
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub momentum: E,
    pub eps: E,
    pub initialized: bool,
}

impl<E: Element> BatchNormState<E> {
    pub fn new(channels: usize) -> Self {
        Self::with(channels, E::from_f64(0.99), E::from_f64(1e-3))
    }

    pub fn with(channels: usize, momentum: E, eps: E) -> Self {
        BatchNormState {
            scale: Tensor::full(&[channels], E::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::one()),
            momentum,
            eps,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

pub fn batch_norm<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    st: &mut BatchNormState<E>,
    phase: Phase,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let v = tape.try_value(x)?;
    if v.rank() < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            detail: format!("needs channels-last rank >= 2, got {:?}", v.shape()),
        });
    }
    let c = *v.shape().last().expect("rank checked");
    if c != st.channels() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: v.shape().to_vec(),
            rhs: vec![st.channels()],
        });
    }
    let (mean, var) = match phase {
        Phase::Train => {
            let (mean, var) = kernels::channel_moments(v.data(), c);
            if st.initialized {
                let m = st.momentum;
                let om = E::one() - m;
                for (r, &b) in st.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = m * *r + om * b;
                }
                for (r, &b) in st.running_var.data_mut().iter_mut().zip(&var) {
                    *r = m * *r + om * b;
                }
            } else {
                st.running_mean = Tensor::new(vec![c], mean.clone())?;
                st.running_var = Tensor::new(vec![c], var.clone())?;
                st.initialized = true;
            }
            (mean, var)
        }
        Phase::Eval => {
            if !st.initialized {
                return Err(Error::BatchNormUninitialized);
            }
            (st.running_mean.data().to_vec(), st.running_var.data().to_vec())
        }
    };
    let scale = tape.leaf(st.scale.clone(), trainable);
    binds.push(scale);
    let shift = tape.leaf(st.shift.clone(), trainable);
    binds.push(shift);
    tape.batch_norm(x, scale, shift, mean, var, st.eps, matches!(phase, Phase::Train))
}

// ── inverted bottleneck ─────────────────────────────────────────────────────

/// Expand (1x1) -> BN -> relu6 -> depthwise (kxk, stride) -> BN -> relu6 ->
/// project (1x1) -> BN, with a residual around the whole block when stride is
/// 1 and channel counts match. None of the convolutions carry a bias; the BN
/// shifts play that role.
///
/// Bind order: expand, bn1.{scale,shift}, depthwise, bn2.{scale,shift},
/// project, bn3.{scale,shift}.
#[derive(Clone, Debug)]
pub struct BottleneckParams<E: Element> {
    pub expand: Tensor<E>,
    pub bn1: BatchNormState<E>,
    pub depthwise: Tensor<E>,
    pub bn2: BatchNormState<E>,
    pub project: Tensor<E>,
    pub bn3: BatchNormState<E>,
    pub stride: usize,
    pub residual: bool,
}

impl<E: Element> BottleneckParams<E> {
    pub fn param_count(&self) -> usize {
        self.expand.numel() + self.depthwise.numel() + self.project.numel()
    }

    pub fn aux_count(&self) -> usize {
        2 * (self.bn1.channels() + self.bn2.channels() + self.bn3.channels())
    }
}

pub fn inverted_bottleneck<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    p: &mut BottleneckParams<E>,
    phase: Phase,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    if p.residual {
        if p.stride != 1 {
            return Err(Error::InvalidShape {
                op: "inverted_bottleneck",
                detail: format!("residual needs stride 1, got {}", p.stride),
            });
        }
        let (cin, cout) = (p.expand.shape()[2], p.project.shape()[3]);
        if cin != cout {
            return Err(Error::ShapeMismatch {
                op: "inverted_bottleneck",
                lhs: vec![cin],
                rhs: vec![cout],
            });
        }
    }
    let ek = tape.leaf(p.expand.clone(), trainable);
    binds.push(ek);
    let h = tape.conv2d(x, ek, None, 1, Padding::Same)?;
    let h = batch_norm(tape, h, &mut p.bn1, phase, trainable, binds)?;
    let h = tape.relu6(h)?;
    let dk = tape.leaf(p.depthwise.clone(), trainable);
    binds.push(dk);
    let h = tape.depthwise_conv2d(h, dk, p.stride, Padding::Same)?;
    let h = batch_norm(tape, h, &mut p.bn2, phase, trainable, binds)?;
    let h = tape.relu6(h)?;
    let pk = tape.leaf(p.project.clone(), trainable);
    binds.push(pk);
    let h = tape.conv2d(h, pk, None, 1, Padding::Same)?;
    let h = batch_norm(tape, h, &mut p.bn3, phase, trainable, binds)?;
    if p.residual {
        tape.add(x, h)
    } else {
        Ok(h)
    }
}

// ── depthwise separable convolution ─────────────────────────────────────────

/// Depthwise kxk followed by a 1x1 pointwise mix. Bind order: depthwise,
/// pointwise, bias if present.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparableParams<E: Element> {
    pub depthwise: Tensor<E>,
    pub pointwise: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: Padding,
}

pub fn depthwise_separable<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    p: &DepthwiseSeparableParams<E>,
    act: Act,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let dk = tape.leaf(p.depthwise.clone(), trainable);
    binds.push(dk);
    let h = tape.depthwise_conv2d(x, dk, p.stride, p.padding)?;
    let pk = tape.leaf(p.pointwise.clone(), trainable);
    binds.push(pk);
    let b = p.bias.as_ref().map(|b| {
        let id = tape.leaf(b.clone(), trainable);
        binds.push(id);
        id
    });
    let y = tape.conv2d(h, pk, b, 1, Padding::Same)?;
    activate(tape, y, act)
}

/// Parameter count of a depthwise-separable block with kernel k, depth d and
/// n output channels (biasless).
pub fn depthwise_separable_param_count(k: usize, d: usize, n: usize) -> usize {
    k * k * d + d * n
}

pub fn full_conv_param_count(k: usize, d: usize, n: usize) -> usize {
    k * k * d * n
}

/// Closed-form count ratio of separable over full: 1/n + 1/k^2.
pub fn separable_reduction_ratio(k: usize, n: usize) -> f64 {
    1.0 / n as f64 + 1.0 / (k * k) as f64
}

// ── pooling, dense, loss ────────────────────────────────────────────────────

pub fn max_pool<E: Element>(tape: &mut Tape<E>, x: TensorId, window: usize, stride: usize) -> Result<TensorId> {
    tape.max_pool2d(x, window, stride)
}

/// Mean over the spatial axes, keeping them as 1x1.
pub fn global_avg_pool<E: Element>(tape: &mut Tape<E>, x: TensorId) -> Result<TensorId> {
    let v = tape.try_value(x)?;
    if v.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "global_avg_pool",
            detail: format!("expected rank 4, got {:?}", v.shape()),
        });
    }
    tape.mean(x, &[1, 2], true)
}

pub fn flatten<E: Element>(tape: &mut Tape<E>, x: TensorId) -> Result<TensorId> {
    let v = tape.try_value(x)?;
    let n = v.shape()[0];
    let d = v.numel() / n;
    tape.reshape(x, &[n, d])
}

/// x (flattened to [n,d]) * w [d,units] + bias. Bind order: weight, bias.
pub fn dense<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    act: Act,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let x2 = if tape.try_value(x)?.rank() == 2 { x } else { flatten(tape, x)? };
    let d = tape.value(x2).shape()[1];
    if w.rank() != 2 || w.shape()[0] != d {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: tape.value(x2).shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let units = w.shape()[1];
    let n = tape.value(x2).shape()[0];
    let wid = tape.leaf(w.clone(), trainable);
    binds.push(wid);
    let mut y = tape.matmul(x2, wid)?;
    if let Some(b) = bias {
        let bid = tape.leaf(b.clone(), trainable);
        binds.push(bid);
        let bb = tape.broadcast(bid, &[n, units])?;
        y = tape.add(y, bb)?;
    }
    activate(tape, y, act)
}

/// Mean softmax cross-entropy over the batch, built from primitive ops via
/// the log-sum-exp form: lse(z) - z[label], with the row max subtracted for
/// range safety. Gradient is exact softmax minus one-hot.
pub fn softmax_cross_entropy<E: Element>(
    tape: &mut Tape<E>,
    logits: TensorId,
    labels: &[usize],
) -> Result<TensorId> {
    let v = tape.try_value(logits)?;
    if v.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            detail: format!("logits must be [n,classes], got {:?}", v.shape()),
        });
    }
    let (n, k) = (v.shape()[0], v.shape()[1]);
    if labels.len() != n {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for batch of {n}", labels.len()),
        });
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let m = tape.max_reduce(logits, &[1], true)?;
    let mb = tape.broadcast(m, &[n, k])?;
    let zs = tape.sub(logits, mb)?;
    let e = tape.exp(zs)?;
    let s = tape.sum(e, &[1], true)?;
    let l = tape.log(s)?;
    let lse = tape.add(l, m)?;
    let one_hot = Tensor::from_fn(&[n, k], |idx| if labels[idx[0]] == idx[1] { E::one() } else { E::zero() });
    let oh = tape.constant(one_hot);
    let zl = tape.mul(logits, oh)?;
    let sl = tape.sum(zl, &[1], true)?;
    let per = tape.sub(lse, sl)?;
    tape.mean(per, &[], false)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows<E: Element>(logits: &Tensor<E>) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
