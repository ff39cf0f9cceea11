//! Datasets and input assembly.
//!
//! Samples keep raw 0..255 grayscale intensities; filtering, resizing, and
//! normalization happen in `assemble_variant` so every loader feeds the same
//! pipeline.

pub mod ferplus;
pub mod kdef;
pub mod prep;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filters::{self, NormMode};
use crate::tensor::Tensor;
use crate::zoo::Variant;

#[derive(Clone, Debug)]
pub struct Sample {
    /// raw intensities 0..255, shape [h,w]
    pub gray: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn check_labels(&self) -> Result<()> {
        let k = self.classes();
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if s.label >= k {
                return Err(Error::LabelOutOfRange { label: s.label, classes: k });
            }
        }
        Ok(())
    }
}

/// Whitespace-separated u8 intensities into an [h,w] tensor.
pub fn parse_pixels(s: &str, h: usize, w: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(h * w);
    for tok in s.split_ascii_whitespace() {
        let v: u8 = tok.parse().map_err(|_| Error::InvalidShape {
            op: "parse_pixels",
            detail: format!("bad intensity `{tok}`"),
        })?;
        data.push(v as f32);
    }
    if data.len() != h * w {
        return Err(Error::InvalidShape {
            op: "parse_pixels",
            detail: format!("{} values for {h}x{w}", data.len()),
        });
    }
    Tensor::new(vec![h, w], data)
}

/// Annotation vote columns, in file order.
pub const VOTE_COLUMNS: [&str; 10] = [
    "neutral", "happiness", "surprise", "sadness", "anger", "disgust", "fear", "contempt",
    "unknown", "NF",
];

/// The eight emotion classes (vote columns minus unknown/NF).
pub fn emotion_classes() -> Vec<String> {
    VOTE_COLUMNS[..8].iter().map(|s| s.to_string()).collect()
}

/// Majority label from the ten annotator-vote columns. The image is dropped
/// (None) when `unknown` or `not-face` ties or beats every emotion; ties
/// between emotions resolve to the first column.
pub fn majority_vote(votes: &[u32; 10]) -> Option<usize> {
    let mut best = 0usize;
    for i in 1..8 {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    if votes[8].max(votes[9]) >= votes[best] {
        None
    } else {
        Some(best)
    }
}

/// Resize a raw gray image, apply the variant's filters on the raw scale,
/// and normalize every channel with the same map. Returns one [h,w,c] tensor
/// per model input stream.
pub fn assemble_variant(
    gray_raw: &Tensor<f32>,
    variant: Variant,
    out_hw: (usize, usize),
    norm: NormMode,
) -> Result<Vec<Tensor<f32>>> {
    let g = filters::resize_bilinear(gray_raw, out_hw.0, out_hw.1)?;
    let stack = |parts: &[&Tensor<f32>]| -> Result<Tensor<f32>> {
        Ok(filters::normalize(&filters::concat_channels(parts)?, norm))
    };
    match variant {
        Variant::Plain => Ok(vec![stack(&[&g])?]),
        Variant::LaplacianConcat => {
            let l = filters::laplacian(&g)?;
            Ok(vec![stack(&[&g, &l])?])
        }
        Variant::SobelConcat => {
            let (gx, gy) = filters::sobel(&g)?;
            Ok(vec![stack(&[&g, &gx, &gy])?])
        }
        Variant::ParallelLaplacian => {
            let l = filters::laplacian(&g)?;
            Ok(vec![stack(&[&g])?, stack(&[&l])?])
        }
        Variant::ParallelSobel => {
            let (gx, gy) = filters::sobel(&g)?;
            Ok(vec![stack(&[&g])?, stack(&[&gx, &gy])?])
        }
    }
}

/// Stack same-shaped [h,w,c] tensors into [n,h,w,c].
pub fn stack_batch(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "stack_batch",
        detail: "empty batch".into(),
    })?;
    let shape = first.shape();
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(shape);
    let stride = first.numel();
    let mut data = Vec::with_capacity(parts.len() * stride);
    for p in parts {
        if p.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: shape.to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(out_shape, data)
}

/// Deterministic epoch order: Fisher-Yates permutation of 0..n chunked into
/// batches; a short trailing batch is kept.
pub fn shuffle_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
