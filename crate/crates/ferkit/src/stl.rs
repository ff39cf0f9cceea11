//! Spatial transformer layer: a small localization net predicts one affine
//! map per sample, which rewarps the input through bilinear resampling.
//!
//! The localization head starts as the identity transform (zero weights,
//! identity bias), so an untrained module passes its input through unchanged,
//! bit for bit.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, he_uniform, Act, ConvParams};
use crate::tape::{Padding, Tape, TensorId};
use crate::tensor::{Element, Tensor};

pub const IDENTITY_THETA: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Bind order: conv1 kernel, conv1 bias, conv2 kernel, conv2 bias, fc1
/// weight, fc1 bias, fc2 weight, fc2 bias.
#[derive(Clone, Debug)]
pub struct StlParams<E: Element> {
    pub conv1: ConvParams<E>,
    pub conv2: ConvParams<E>,
    pub fc1_w: Tensor<E>,
    pub fc1_b: Tensor<E>,
    pub fc2_w: Tensor<E>,
    pub fc2_b: Tensor<E>,
    pub input_hw: (usize, usize),
}

fn check_pool_divisibility(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::ArchShape {
            layer: "stl".into(),
            detail: format!("input {h}x{w} must be divisible by 4 for the two pooling stages"),
        });
    }
    Ok(())
}

/// Trainable parameter count of a module for the given input geometry:
/// two biased 3x3 convs (cin->8->10), then fc 10*(h/4)*(w/4)->32->6.
pub fn param_count_for(cin: usize, h: usize, w: usize) -> Result<usize> {
    check_pool_divisibility(h, w)?;
    let conv1 = 9 * cin * 8 + 8;
    let conv2 = 9 * 8 * 10 + 10;
    let d = (h / 4) * (w / 4) * 10;
    let fc1 = d * 32 + 32;
    let fc2 = 32 * 6 + 6;
    Ok(conv1 + conv2 + fc1 + fc2)
}

impl<E: Element> StlParams<E> {
    pub fn init(cin: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_pool_divisibility(h, w)?;
        let conv1 = ConvParams {
            kernel: he_uniform(rng, &[3, 3, cin, 8], 9 * cin),
            bias: Some(Tensor::zeros(&[8])),
            stride: 1,
            padding: Padding::Same,
        };
        let conv2 = ConvParams {
            kernel: he_uniform(rng, &[3, 3, 8, 10], 9 * 8),
            bias: Some(Tensor::zeros(&[10])),
            stride: 1,
            padding: Padding::Same,
        };
        let d = (h / 4) * (w / 4) * 10;
        Ok(StlParams {
            conv1,
            conv2,
            fc1_w: he_uniform(rng, &[d, 32], d),
            fc1_b: Tensor::zeros(&[32]),
            fc2_w: Tensor::zeros(&[32, 6]),
            fc2_b: Tensor::from_fn(&[1, 6], |i| E::from_f64(IDENTITY_THETA[i[1]])).reshaped(&[6]).expect("6 elements"),
            input_hw: (h, w),
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.fc1_w.numel()
            + self.fc1_b.numel()
            + self.fc2_w.numel()
            + self.fc2_b.numel()
    }
}

/// conv(3x3,8) relu, pool 2/2, conv(3x3,10) relu, pool 2/2, fc 32 relu,
/// fc 6, reshape to [n,2,3] theta, then warp x by the predicted grid.
pub fn stl_forward<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    p: &StlParams<E>,
    trainable: bool,
    binds: &mut Vec<TensorId>,
) -> Result<TensorId> {
    let v = tape.try_value(x)?;
    if v.rank() != 4 {
        return Err(Error::ArchShape {
            layer: "stl".into(),
            detail: format!("expected [n,h,w,c] input, got {:?}", v.shape()),
        });
    }
    let (n, h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    if (h, w) != p.input_hw || c != p.conv1.kernel.shape()[2] {
        return Err(Error::ArchShape {
            layer: "stl".into(),
            detail: format!(
                "input {:?} does not match module built for {}x{}x{}",
                v.shape(),
                p.input_hw.0,
                p.input_hw.1,
                p.conv1.kernel.shape()[2]
            ),
        });
    }
    let l1 = layers::conv2d(tape, x, &p.conv1, Act::Relu, trainable, binds)?;
    let l1 = tape.max_pool2d(l1, 2, 2)?;
    let l2 = layers::conv2d(tape, l1, &p.conv2, Act::Relu, trainable, binds)?;
    let l2 = tape.max_pool2d(l2, 2, 2)?;
    let f = layers::dense(tape, l2, &p.fc1_w, Some(&p.fc1_b), Act::Relu, trainable, binds)?;
    let theta = layers::dense(tape, f, &p.fc2_w, Some(&p.fc2_b), Act::Linear, trainable, binds)?;
    let theta = tape.reshape(theta, &[n, 2, 3])?;
    let grid = tape.affine_grid(theta, (h, w), (h, w))?;
    tape.grid_sample(x, grid)
}
