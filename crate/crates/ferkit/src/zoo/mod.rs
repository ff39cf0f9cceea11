//! Architecture specs, parameter ledgers, and runnable models.
//!
//! A spec is a plain description (layer list plus input variant); `ledger`
//! walks it symbolically to produce per-layer parameter counts, and
//! `Model::build` materializes seeded tensors with the exact same geometry.
//! Multi-stream variants run one backbone per input stream (or a single
//! shared backbone over the concatenated batch) and merge features along the
//! channel axis before the classifier head.

pub mod serialize;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, he_uniform, Act, BatchNormState, BottleneckParams, ConvParams, Phase};
use crate::stl::{self, StlParams};
use crate::tape::{Padding, Tape, TensorId};
use crate::tensor::{Element, Tensor};

// ── specs ───────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Plain,
    LaplacianConcat,
    SobelConcat,
    ParallelLaplacian,
    ParallelSobel,
}

impl Variant {
    /// Channel count of each input stream. Concat variants stack the filter
    /// responses onto the grayscale image; parallel variants feed them to a
    /// second backbone.
    pub fn stream_channels(self) -> Vec<usize> {
        match self {
            Variant::Plain => vec![1],
            Variant::LaplacianConcat => vec![2],
            Variant::SobelConcat => vec![3],
            Variant::ParallelLaplacian => vec![1, 1],
            Variant::ParallelSobel => vec![1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::LaplacianConcat => "laplacian-concat",
            Variant::SobelConcat => "sobel-concat",
            Variant::ParallelLaplacian => "parallel-laplacian",
            Variant::ParallelSobel => "parallel-sobel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config {
                detail: format!(
                    "unknown variant `{s}` (expected one of: {})",
                    Variant::all().map(|v| v.name()).join(", ")
                ),
            })
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Plain,
            Variant::LaplacianConcat,
            Variant::SobelConcat,
            Variant::ParallelLaplacian,
            Variant::ParallelSobel,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { c: usize, k: usize, stride: usize, bias: bool, act: Act },
    Bottleneck { c: usize, stride: usize, t: usize },
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Dense { units: usize, bias: bool, act: Act },
}

/// The last layer is the classifier head; it runs on the merged stream
/// features instead of inside each stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input_hw: (usize, usize),
    pub classes: usize,
    pub variant: Variant,
    pub stl: bool,
    pub share_streams: bool,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn with_stl(mut self, on: bool) -> Self {
        self.stl = on;
        self
    }

    pub fn with_shared_streams(mut self, on: bool) -> Self {
        self.share_streams = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config { detail: format!("{} classes", self.classes) });
        }
        if self.layers.len() < 2 {
            return Err(Error::Config { detail: "need at least one layer plus a head".into() });
        }
        match *self.layers.last().expect("non-empty") {
            LayerSpec::Conv2d { c, .. } if c == self.classes => {}
            LayerSpec::Dense { units, .. } if units == self.classes => {}
            other => {
                return Err(Error::Config {
                    detail: format!("head {other:?} does not emit {} classes", self.classes),
                })
            }
        }
        let chans = self.variant.stream_channels();
        if self.share_streams && chans.iter().any(|&c| c != chans[0]) {
            return Err(Error::Config {
                detail: format!(
                    "variant {} has uneven stream widths {chans:?}; weights cannot be shared",
                    self.variant.name()
                ),
            });
        }
        Ok(())
    }
}

/// Backbone from Table-style description: two standalone 3x3 convs, twelve
/// inverted bottlenecks (expansion 6), global average pool, then a biasless
/// 1x1 classifier conv.
pub fn base(classes: usize) -> ArchSpec {
    use LayerSpec::*;
    let bn = |c, stride| Bottleneck { c, stride, t: 6 };
    ArchSpec {
        name: "base".into(),
        input_hw: (64, 64),
        classes,
        variant: Variant::Plain,
        stl: false,
        share_streams: false,
        layers: vec![
            Conv2d { c: 48, k: 3, stride: 1, bias: true, act: Act::Relu },
            Conv2d { c: 32, k: 3, stride: 1, bias: true, act: Act::Relu },
            bn(32, 2),
            bn(24, 2),
            bn(24, 1),
            bn(32, 2),
            bn(32, 1),
            bn(32, 1),
            bn(64, 1),
            bn(64, 1),
            bn(64, 1),
            bn(64, 1),
            bn(128, 1),
            bn(256, 1),
            GlobalAvgPool,
            Conv2d { c: classes, k: 1, stride: 1, bias: false, act: Act::Linear },
        ],
    }
}

/// VGG13-style reference: ten biased 3x3 convs in two-then-three blocks with
/// 2x2 pooling, and a three-layer dense classifier.
pub fn vgg13(classes: usize) -> ArchSpec {
    use LayerSpec::*;
    let conv = |c| Conv2d { c, k: 3, stride: 1, bias: true, act: Act::Relu };
    let pool = MaxPool { window: 2, stride: 2 };
    ArchSpec {
        name: "vgg13".into(),
        input_hw: (64, 64),
        classes,
        variant: Variant::Plain,
        stl: false,
        share_streams: false,
        layers: vec![
            conv(64),
            conv(64),
            pool,
            conv(128),
            conv(128),
            pool,
            conv(256),
            conv(256),
            conv(256),
            pool,
            conv(256),
            conv(256),
            conv(256),
            pool,
            Dense { units: 1024, bias: true, act: Act::Relu },
            Dense { units: 1024, bias: true, act: Act::Relu },
            Dense { units: classes, bias: true, act: Act::Linear },
        ],
    }
}

pub fn by_name(name: &str, classes: usize) -> Result<ArchSpec> {
    match name {
        "base" => Ok(base(classes)),
        "vgg13" => Ok(vgg13(classes)),
        _ => Err(Error::UnknownArch { name: name.to_string() }),
    }
}

pub const ARCH_NAMES: [&str; 2] = ["base", "vgg13"];

// ── ledger ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerRow {
    pub name: String,
    /// input geometry [h, w, c] seen by the layer
    pub input: [usize; 3],
    /// weights counted in the headline total
    pub params: usize,
    /// batch-norm scales and shifts, tracked separately
    pub aux: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLedger {
    pub rows: Vec<LedgerRow>,
    pub total: usize,
    pub auxiliary: usize,
}

impl fmt::Display for ParamLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>12} {:>10} {:>8}", "layer", "input", "params", "aux")?;
        for r in &self.rows {
            let input = format!("{}x{}x{}", r.input[0], r.input[1], r.input[2]);
            writeln!(f, "{:<18} {:>12} {:>10} {:>8}", r.name, input, r.params, r.aux)?;
        }
        writeln!(f, "Auxiliary {}", self.auxiliary)?;
        writeln!(f, "Total {}", self.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    h: usize,
    w: usize,
    c: usize,
}

fn layer_stats(layer: &LayerSpec, g: Geom) -> Result<(usize, usize, Geom)> {
    match *layer {
        LayerSpec::Conv2d { c, k, stride, bias, .. } => {
            let params = k * k * g.c * c + if bias { c } else { 0 };
            let out = Geom { h: g.h.div_ceil(stride), w: g.w.div_ceil(stride), c };
            Ok((params, 0, out))
        }
        LayerSpec::Bottleneck { c, stride, t } => {
            let tc = t * g.c;
            let params = g.c * tc + 9 * tc + tc * c;
            let aux = 2 * (tc + tc + c);
            let out = Geom { h: g.h.div_ceil(stride), w: g.w.div_ceil(stride), c };
            Ok((params, aux, out))
        }
        LayerSpec::MaxPool { window, stride } => {
            if g.h < window || g.w < window {
                return Err(Error::ArchShape {
                    layer: "maxpool".into(),
                    detail: format!("window {window} exceeds input {}x{}", g.h, g.w),
                });
            }
            let out = Geom { h: (g.h - window) / stride + 1, w: (g.w - window) / stride + 1, c: g.c };
            Ok((0, 0, out))
        }
        LayerSpec::GlobalAvgPool => Ok((0, 0, Geom { h: 1, w: 1, c: g.c })),
        LayerSpec::Dense { units, bias, .. } => {
            let d = g.h * g.w * g.c;
            let params = d * units + if bias { units } else { 0 };
            Ok((params, 0, Geom { h: 1, w: 1, c: units }))
        }
    }
}

fn row_name(layer: &LayerSpec, counters: &mut [usize; 4]) -> String {
    match layer {
        LayerSpec::Conv2d { .. } => {
            counters[0] += 1;
            format!("conv{}", counters[0])
        }
        LayerSpec::Bottleneck { .. } => {
            counters[1] += 1;
            format!("bottleneck{}", counters[1])
        }
        LayerSpec::MaxPool { .. } => {
            counters[2] += 1;
            format!("maxpool{}", counters[2])
        }
        LayerSpec::GlobalAvgPool => "gap".into(),
        LayerSpec::Dense { .. } => {
            counters[3] += 1;
            format!("dense{}", counters[3])
        }
    }
}

pub fn ledger(spec: &ArchSpec) -> Result<ParamLedger> {
    spec.validate()?;
    let chans = spec.variant.stream_channels();
    let built: Vec<usize> = if spec.share_streams { vec![chans[0]] } else { chans.clone() };
    let multi = built.len() > 1;
    let body = &spec.layers[..spec.layers.len() - 1];

    let mut rows = Vec::new();
    let mut feat = None;
    for (si, &cin) in built.iter().enumerate() {
        let prefix = if multi { format!("s{si}.") } else { String::new() };
        let mut g = Geom { h: spec.input_hw.0, w: spec.input_hw.1, c: cin };
        if spec.stl {
            let params = stl::param_count_for(cin, g.h, g.w)?;
            rows.push(LedgerRow {
                name: format!("{prefix}stl"),
                input: [g.h, g.w, g.c],
                params,
                aux: 0,
            });
        }
        let mut counters = [0usize; 4];
        for layer in body {
            let name = format!("{prefix}{}", row_name(layer, &mut counters));
            let (params, aux, out) = layer_stats(layer, g)?;
            rows.push(LedgerRow { name, input: [g.h, g.w, g.c], params, aux });
            g = out;
        }
        feat = Some(g);
    }
    let feat = feat.expect("at least one stream");
    // every input stream contributes one feature block, shared weights or not
    let head_in = Geom { h: feat.h, w: feat.w, c: feat.c * chans.len() };
    let head = spec.layers.last().expect("non-empty");
    let (params, aux, out) = layer_stats(head, head_in)?;
    if out.c != spec.classes {
        return Err(Error::Config {
            detail: format!("head emits {} channels, expected {}", out.c, spec.classes),
        });
    }
    rows.push(LedgerRow {
        name: "head".into(),
        input: [head_in.h, head_in.w, head_in.c],
        params,
        aux,
    });

    let total = rows.iter().map(|r| r.params).sum();
    let auxiliary = rows.iter().map(|r| r.aux).sum();
    Ok(ParamLedger { rows, total, auxiliary })
}

// ── runnable models ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Block<E: Element> {
    Conv { p: ConvParams<E>, act: Act },
    Bottleneck(BottleneckParams<E>),
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Dense { w: Tensor<E>, b: Option<Tensor<E>>, act: Act },
}

#[derive(Clone, Debug)]
pub struct Stream<E: Element> {
    pub stl: Option<StlParams<E>>,
    pub blocks: Vec<Block<E>>,
}

#[derive(Clone, Debug)]
pub struct Model<E: Element> {
    pub spec: ArchSpec,
    pub seed: u64,
    pub streams: Vec<Stream<E>>,
    pub head: Block<E>,
}

fn build_block<E: Element>(layer: &LayerSpec, g: Geom, rng: &mut ChaCha8Rng) -> Block<E> {
    match *layer {
        LayerSpec::Conv2d { c, k, stride, bias, act } => Block::Conv {
            p: ConvParams {
                kernel: he_uniform(rng, &[k, k, g.c, c], k * k * g.c),
                bias: bias.then(|| Tensor::zeros(&[c])),
                stride,
                padding: Padding::Same,
            },
            act,
        },
        LayerSpec::Bottleneck { c, stride, t } => {
            let tc = t * g.c;
            Block::Bottleneck(BottleneckParams {
                expand: he_uniform(rng, &[1, 1, g.c, tc], g.c),
                bn1: BatchNormState::new(tc),
                depthwise: he_uniform(rng, &[3, 3, tc], 9),
                bn2: BatchNormState::new(tc),
                project: he_uniform(rng, &[1, 1, tc, c], tc),
                bn3: BatchNormState::new(c),
                stride,
                residual: stride == 1 && g.c == c,
            })
        }
        LayerSpec::MaxPool { window, stride } => Block::MaxPool { window, stride },
        LayerSpec::GlobalAvgPool => Block::GlobalAvgPool,
        LayerSpec::Dense { units, bias, act } => {
            let d = g.h * g.w * g.c;
            Block::Dense {
                w: he_uniform(rng, &[d, units], d),
                b: bias.then(|| Tensor::zeros(&[units])),
                act,
            }
        }
    }
}

fn run_block<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    block: &mut Block<E>,
    phase: Phase,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    match block {
        Block::Conv { p, act } => layers::conv2d(tape, x, p, *act, trainable, binds),
        Block::Bottleneck(p) => layers::inverted_bottleneck(tape, x, p, phase, trainable, binds),
        Block::MaxPool { window, stride } => tape.max_pool2d(x, *window, *stride),
        Block::GlobalAvgPool => layers::global_avg_pool(tape, x),
        Block::Dense { w, b, act } => layers::dense(tape, x, w, b.as_ref(), *act, trainable, binds),
    }
}

/// Concatenate along one axis by padding each part to the full extent and
/// summing; gradients route back through the pad slices.
fn concat_axis<E: Element>(tape: &mut Tape<E>, parts: &[TensorId], axis: usize) -> Result<TensorId> {
    let rank = tape.try_value(parts[0])?.rank();
    let sizes: Vec<usize> = parts
        .iter()
        .map(|&p| Ok(tape.try_value(p)?.shape()[axis]))
        .collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    let mut acc = None;
    let mut offset = 0;
    for (&p, &sz) in parts.iter().zip(&sizes) {
        let mut before = vec![0; rank];
        let mut after = vec![0; rank];
        before[axis] = offset;
        after[axis] = total - offset - sz;
        let padded = tape.pad(p, &before, &after)?;
        acc = Some(match acc {
            None => padded,
            Some(a) => tape.add(a, padded)?,
        });
        offset += sz;
    }
    Ok(acc.expect("nonempty parts"))
}

fn split_batch<E: Element>(tape: &mut Tape<E>, x: TensorId, k: usize) -> Result<Vec<TensorId>> {
    let shape = tape.try_value(x)?.shape().to_vec();
    let n = shape[0] / k;
    let step = vec![1; shape.len()];
    (0..k)
        .map(|i| {
            let mut start = vec![0; shape.len()];
            let mut stop = shape.clone();
            start[0] = i * n;
            stop[0] = (i + 1) * n;
            tape.slice(x, &start, &stop, &step)
        })
        .collect()
}

fn run_stream<E: Element>(
    tape: &mut Tape<E>,
    stream: &mut Stream<E>,
    x: TensorId,
    phase: Phase,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let mut h = x;
    if let Some(stl) = &stream.stl {
        h = stl::stl_forward(tape, h, stl, trainable, binds)?;
    }
    for block in &mut stream.blocks {
        h = run_block(tape, h, block, phase, trainable, binds)?;
    }
    let v = tape.try_value(h)?;
    if v.rank() == 2 {
        let (n, d) = (v.shape()[0], v.shape()[1]);
        h = tape.reshape(h, &[n, 1, 1, d])?;
    }
    Ok(h)
}

impl<E: Element> Model<E> {
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = spec.variant.stream_channels();
        let built: Vec<usize> = if spec.share_streams { vec![chans[0]] } else { chans.clone() };
        let body = &spec.layers[..spec.layers.len() - 1];

        let mut streams = Vec::with_capacity(built.len());
        let mut feat = None;
        for &cin in &built {
            let mut g = Geom { h: spec.input_hw.0, w: spec.input_hw.1, c: cin };
            let stl = if spec.stl {
                Some(StlParams::init(cin, g.h, g.w, &mut rng)?)
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(body.len());
            for layer in body {
                blocks.push(build_block(layer, g, &mut rng));
                g = layer_stats(layer, g)?.2;
            }
            feat = Some(g);
            streams.push(Stream { stl, blocks });
        }
        let feat = feat.expect("at least one stream");
        let head_in = Geom { h: feat.h, w: feat.w, c: feat.c * chans.len() };
        let head = build_block(spec.layers.last().expect("non-empty"), head_in, &mut rng);
        Ok(Model { spec: spec.clone(), seed, streams, head })
    }

    /// Record the full forward pass, returning flattened logits [n, classes]
    /// and the parameter leaves in canonical bind order.
    pub fn forward(
        &mut self,
        tape: &mut Tape<E>,
        inputs: &[TensorId],
        phase: Phase,
        trainable: bool,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let chans = self.spec.variant.stream_channels();
        if inputs.len() != chans.len() {
            return Err(Error::ArchShape {
                layer: "model".into(),
                detail: format!("{} input streams, expected {}", inputs.len(), chans.len()),
            });
        }
        let mut batch = None;
        for (i, (&x, &c)) in inputs.iter().zip(&chans).enumerate() {
            let v = tape.try_value(x)?;
            let want_h = self.spec.input_hw.0;
            let want_w = self.spec.input_hw.1;
            match v.shape() {
                [n, h, w, vc] if *h == want_h && *w == want_w && *vc == c => {
                    if *batch.get_or_insert(*n) != *n {
                        return Err(Error::ArchShape {
                            layer: "model".into(),
                            detail: "stream batches differ".into(),
                        });
                    }
                }
                other => {
                    return Err(Error::ArchShape {
                        layer: "model".into(),
                        detail: format!(
                            "stream {i} input {other:?}, expected [n,{want_h},{want_w},{c}]"
                        ),
                    })
                }
            }
        }

        let mut binds = Vec::new();
        let feats = if self.spec.share_streams && inputs.len() > 1 {
            // one weight set: run the union batch through the stream once so
            // each parameter binds a single leaf
            let joined = concat_axis(tape, inputs, 0)?;
            let f = run_stream(tape, &mut self.streams[0], joined, phase, trainable, &mut binds)?;
            split_batch(tape, f, inputs.len())?
        } else {
            let mut feats = Vec::with_capacity(inputs.len());
            for (si, &x) in inputs.iter().enumerate() {
                feats.push(run_stream(tape, &mut self.streams[si], x, phase, trainable, &mut binds)?);
            }
            feats
        };
        let feat = if feats.len() == 1 { feats[0] } else { concat_axis(tape, &feats, 3)? };
        let logits = run_block(tape, feat, &mut self.head, phase, trainable, &mut binds)?;
        let v = tape.try_value(logits)?;
        let flat = match v.shape() {
            [_, _] => logits,
            [n, 1, 1, k] => {
                let (n, k) = (*n, *k);
                tape.reshape(logits, &[n, k])?
            }
            other => {
                return Err(Error::ArchShape {
                    layer: "head".into(),
                    detail: format!("classifier produced {other:?}"),
                })
            }
        };
        Ok((flat, binds))
    }

    /// Trainable tensors in the exact order `forward` binds them.
    pub fn visit_trainable_mut(&mut self, f: &mut impl FnMut(&mut Tensor<E>)) {
        for s in &mut self.streams {
            if let Some(stl) = &mut s.stl {
                visit_stl_mut(stl, &mut |_, t| f(t));
            }
            for b in &mut s.blocks {
                visit_block_mut(b, false, &mut |_, t| f(t));
            }
        }
        visit_block_mut(&mut self.head, false, &mut |_, t| f(t));
    }

    /// All persistent tensors (parameters plus running statistics) with
    /// stable names; defines the checkpoint layout.
    pub fn visit_state_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<E>)) {
        let multi = self.streams.len() > 1;
        for (si, s) in self.streams.iter_mut().enumerate() {
            let prefix = if multi { format!("s{si}.") } else { String::new() };
            if let Some(stl) = &mut s.stl {
                visit_stl_mut(stl, &mut |name, t| f(&format!("{prefix}stl.{name}"), t));
            }
            let mut counters = [0usize; 4];
            let specs: Vec<LayerSpec> = self.spec.layers[..self.spec.layers.len() - 1].to_vec();
            for (b, layer) in s.blocks.iter_mut().zip(&specs) {
                let name = format!("{prefix}{}", row_name(layer, &mut counters));
                visit_block_mut(b, true, &mut |field, t| f(&format!("{name}.{field}"), t));
            }
        }
        visit_block_mut(&mut self.head, true, &mut |field, t| f(&format!("head.{field}"), t));
    }

    /// Batch-norm states in bind order, for checkpointing the init flags.
    pub fn visit_bn_mut(&mut self, f: &mut impl FnMut(&mut BatchNormState<E>)) {
        for s in &mut self.streams {
            for b in &mut s.blocks {
                if let Block::Bottleneck(p) = b {
                    f(&mut p.bn1);
                    f(&mut p.bn2);
                    f(&mut p.bn3);
                }
            }
        }
        if let Block::Bottleneck(p) = &mut self.head {
            f(&mut p.bn1);
            f(&mut p.bn2);
            f(&mut p.bn3);
        }
    }

    /// (trainable, auxiliary) element counts of the materialized tensors.
    pub fn param_counts(&mut self) -> (usize, usize) {
        let mut trainable = 0usize;
        let mut aux = 0usize;
        self.visit_trainable_mut(&mut |t| trainable += t.numel());
        self.visit_bn_mut(&mut |bn| aux += bn.scale.numel() + bn.shift.numel());
        (trainable - aux, aux)
    }
}

fn visit_stl_mut<E: Element>(p: &mut StlParams<E>, f: &mut impl FnMut(&str, &mut Tensor<E>)) {
    f("conv1.kernel", &mut p.conv1.kernel);
    if let Some(b) = &mut p.conv1.bias {
        f("conv1.bias", b);
    }
    f("conv2.kernel", &mut p.conv2.kernel);
    if let Some(b) = &mut p.conv2.bias {
        f("conv2.bias", b);
    }
    f("fc1.weight", &mut p.fc1_w);
    f("fc1.bias", &mut p.fc1_b);
    f("fc2.weight", &mut p.fc2_w);
    f("fc2.bias", &mut p.fc2_b);
}

/// Field order matches the bind order of the corresponding layer functions.
/// With `state` set, running statistics follow each BN's scale and shift.
fn visit_block_mut<E: Element>(
    b: &mut Block<E>,
    state: bool,
    f: &mut impl FnMut(&str, &mut Tensor<E>),
) {
    let bn = |tag: &str, s: &mut BatchNormState<E>, f: &mut dyn FnMut(&str, &mut Tensor<E>)| {
        f(&format!("{tag}.scale"), &mut s.scale);
        f(&format!("{tag}.shift"), &mut s.shift);
        if state {
            f(&format!("{tag}.running_mean"), &mut s.running_mean);
            f(&format!("{tag}.running_var"), &mut s.running_var);
        }
    };
    match b {
        Block::Conv { p, .. } => {
            f("kernel", &mut p.kernel);
            if let Some(bias) = &mut p.bias {
                f("bias", bias);
            }
        }
        Block::Bottleneck(p) => {
            f("expand", &mut p.expand);
            bn("bn1", &mut p.bn1, f);
            f("depthwise", &mut p.depthwise);
            bn("bn2", &mut p.bn2, f);
            f("project", &mut p.project);
            bn("bn3", &mut p.bn3, f);
        }
        Block::MaxPool { .. } | Block::GlobalAvgPool => {}
        Block::Dense { w, b, .. } => {
            f("weight", w);
            if let Some(bias) = b {
                f("bias", bias);
            }
        }
    }
}
