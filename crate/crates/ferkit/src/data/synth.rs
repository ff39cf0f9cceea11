//! Synthetic grayscale sets for fast end-to-end checks. Both generators emit
//! integer 0..255 intensities at the model's native 64x64 size.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::tensor::Tensor;

pub const SIDE: usize = 64;

fn gen_split(
    rng: &mut ChaCha8Rng,
    per_class: usize,
    classes: usize,
    image: &mut impl FnMut(&mut ChaCha8Rng, usize) -> Tensor<f32>,
) -> Vec<Sample> {
    let mut out = Vec::with_capacity(per_class * classes);
    for label in 0..classes {
        for _ in 0..per_class {
            out.push(Sample { gray: image(rng, label), label });
        }
    }
    out
}

fn make(
    name: &str,
    counts: (usize, usize, usize),
    classes: usize,
    seed: u64,
    image: &mut impl FnMut(&mut ChaCha8Rng, usize) -> Tensor<f32>,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        name: name.into(),
        class_names: (0..classes).map(|k| format!("{name}{k}")).collect(),
        train: gen_split(&mut rng, counts.0, classes, image),
        val: gen_split(&mut rng, counts.1, classes, image),
        test: gen_split(&mut rng, counts.2, classes, image),
    }
}

/// Eight classes of thresholded gratings at 22.5 degree steps, with random
/// phase and wavelength per image.
pub fn oriented_bars(train_per_class: usize, val_per_class: usize, test_per_class: usize, seed: u64) -> Dataset {
    let mut image = |rng: &mut ChaCha8Rng, label: usize| {
        let angle = label as f64 * PI / 8.0;
        let (cs, sn) = (angle.cos(), angle.sin());
        let wavelength = 12.0 + 8.0 * rng.random::<f64>();
        let phase = 2.0 * PI * rng.random::<f64>();
        Tensor::from_fn(&[SIDE, SIDE], |i| {
            let proj = i[1] as f64 * cs + i[0] as f64 * sn;
            if (2.0 * PI * proj / wavelength + phase).cos() > 0.0 {
                230.0
            } else {
                25.0
            }
        })
    };
    make("bars", (train_per_class, val_per_class, test_per_class), 8, seed, &mut image)
}

/// Eight classes of linear intensity ramps at 45 degree steps. The base level
/// varies widely per image and pixel noise is added, so the ramp direction is
/// the only reliable signal.
pub fn directional_ramps(train_per_class: usize, val_per_class: usize, test_per_class: usize, seed: u64) -> Dataset {
    let mut image = |rng: &mut ChaCha8Rng, label: usize| {
        let angle = label as f64 * PI / 4.0;
        let (cs, sn) = (angle.cos(), angle.sin());
        let base = 40.0 + 140.0 * rng.random::<f64>();
        let amp = 60.0;
        let half = (SIDE - 1) as f64 / 2.0;
        Tensor::from_fn(&[SIDE, SIDE], |i| {
            let proj = ((i[1] as f64 - half) * cs + (i[0] as f64 - half) * sn) / half;
            let noise = rng.random::<f64>() * 16.0 - 8.0;
            (base + amp * proj + noise).clamp(0.0, 255.0).round() as f32
        })
    };
    make("ramps", (train_per_class, val_per_class, test_per_class), 8, seed, &mut image)
}
