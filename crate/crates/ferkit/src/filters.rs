//! Fixed image filters and resampling on grayscale [h,w] tensors.
//!
//! Filters use correlation (no kernel flip) with replicate edge padding and
//! return same-sized outputs. On images whose values are small integers the
//! results are integer-valued and therefore exact in f32.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

fn expect_gray<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected [h,w], got {:?}", x.shape()),
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn correlate3<E: Element>(x: &Tensor<E>, k: &[[f64; 3]; 3]) -> Tensor<E> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let coeff: Vec<E> = k.iter().flatten().map(|&v| E::from_f64(v)).collect();
    Tensor::from_fn(&[h, w], |idx| {
        let (i, j) = (idx[0] as isize, idx[1] as isize);
        let mut acc = E::zero();
        for di in 0..3isize {
            let si = (i + di - 1).clamp(0, h as isize - 1) as usize;
            for dj in 0..3isize {
                let sj = (j + dj - 1).clamp(0, w as isize - 1) as usize;
                acc += coeff[(di * 3 + dj) as usize] * data[si * w + sj];
            }
        }
        acc
    })
}

/// Horizontal and vertical Sobel responses.
pub fn sobel<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
    expect_gray("sobel", x)?;
    Ok((correlate3(x, &SOBEL_X), correlate3(x, &SOBEL_Y)))
}

pub fn laplacian<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    expect_gray("laplacian", x)?;
    Ok(correlate3(x, &LAPLACIAN))
}

/// Corner-aligned bilinear resize. Equal input and output sizes reproduce the
/// input bit for bit: the sample coordinate is then exactly integral and the
/// interpolation form v0 + f*(v1-v0) returns v0 untouched when f is 0.
pub fn resize_bilinear<E: Element>(x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let (h, w) = expect_gray("resize_bilinear", x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidShape {
            op: "resize_bilinear",
            detail: format!("output {oh}x{ow} must be positive"),
        });
    }
    let ry = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let rx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let data = x.data();
    Ok(Tensor::from_fn(&[oh, ow], |idx| {
        let sy = idx[0] as f64 * ry;
        let sx = idx[1] as f64 * rx;
        let y0 = sy.floor();
        let x0 = sx.floor();
        let fy = E::from_f64(sy - y0);
        let fx = E::from_f64(sx - x0);
        let y0 = y0 as usize;
        let x0 = x0 as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let v00 = data[y0 * w + x0];
        let v01 = data[y0 * w + x1];
        let v10 = data[y1 * w + x0];
        let v11 = data[y1 * w + x1];
        let top = v00 + fx * (v01 - v00);
        let bot = v10 + fx * (v11 - v10);
        top + fy * (bot - top)
    }))
}

/// Stack [h,w] or [h,w,c] parts along the channel axis into [h,w,sum c].
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_channels",
        detail: "no inputs".into(),
    })?;
    let (h, w) = (first.shape()[0], first.shape().get(1).copied().unwrap_or(0));
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let c = match p.shape() {
            [ph, pw] if *ph == h && *pw == w => 1,
            [ph, pw, c] if *ph == h && *pw == w => *c,
            other => {
                return Err(Error::InvalidShape {
                    op: "concat_channels",
                    detail: format!("part {other:?} does not match {h}x{w}"),
                })
            }
        };
        channels.push(c);
    }
    let ctot: usize = channels.iter().sum();
    let mut out = Tensor::zeros(&[h, w, ctot]);
    let od = out.data_mut();
    let mut base = 0;
    for (p, &c) in parts.iter().zip(&channels) {
        let pd = p.data();
        for pix in 0..h * w {
            od[pix * ctot + base..pix * ctot + base + c].copy_from_slice(&pd[pix * c..(pix + 1) * c]);
        }
        base += c;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// x / 255 into [0,1]
    Unit,
    /// x / 127.5 - 1 into [-1,1]
    Signed,
}

/// Map raw 0..255 intensities into the training range. Both endpoints land
/// exactly: 255/255 == 1 and 255/127.5 == 2 are exact in f32.
pub fn normalize<E: Element>(x: &Tensor<E>, mode: NormMode) -> Tensor<E> {
    match mode {
        NormMode::Unit => {
            let d = E::from_f64(255.0);
            x.map(|v| v / d)
        }
        NormMode::Signed => {
            let d = E::from_f64(127.5);
            x.map(|v| v / d - E::one())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(&[h, w], |i| f(i[0], i[1]))
    }

    #[test]
    fn sobel_of_constant_is_zero_everywhere() {
        let x = img(6, 7, |_, _| 93.0);
        let (gx, gy) = sobel(&x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_of_column_ramp_is_flat_inside_and_halved_at_edges() {
        let x = img(5, 6, |_, j| j as f32);
        let (gx, gy) = sobel(&x).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let want = if j == 0 || j == 5 { 4.0 } else { 8.0 };
                assert_eq!(gx.at(&[i, j]), want, "at {i},{j}");
                assert_eq!(gy.at(&[i, j]), 0.0);
            }
        }
    }

    #[test]
    fn laplacian_of_linear_ramp_vanishes_inside() {
        let x = img(6, 6, |i, j| (3 * i + 2 * j) as f32);
        let l = laplacian(&x).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(l.at(&[i, j]), 0.0);
            }
        }
        // replicate padding bends the ramp at the border
        assert_eq!(l.at(&[0, 0]), 5.0);
    }

    #[test]
    fn laplacian_hand_value_on_a_spike() {
        let mut x = img(3, 3, |_, _| 0.0);
        x.set(&[1, 1], 1.0);
        let l = laplacian(&x).unwrap();
        assert_eq!(l.at(&[1, 1]), -4.0);
        assert_eq!(l.at(&[0, 1]), 1.0);
        assert_eq!(l.at(&[0, 0]), 0.0);
    }

    #[test]
    fn resize_to_same_size_is_identity_bitwise() {
        let x = img(7, 5, |i, j| (i * 31 + j * 17) as f32 * 0.371 - 9.0);
        let y = resize_bilinear(&x, 7, 5).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn resize_two_by_two_up_to_three_hits_corners_and_center() {
        let x = img(2, 2, |i, j| (10 * i + 2 * j) as f32);
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.at(&[0, 0]), 0.0);
        assert_eq!(y.at(&[0, 2]), 2.0);
        assert_eq!(y.at(&[2, 0]), 10.0);
        assert_eq!(y.at(&[2, 2]), 12.0);
        assert_eq!(y.at(&[1, 1]), 6.0);
    }

    #[test]
    fn resize_down_keeps_corners() {
        let x = img(9, 9, |i, j| (i * 9 + j) as f32);
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.at(&[0, 0]), 0.0);
        assert_eq!(y.at(&[2, 2]), 80.0);
        assert_eq!(y.at(&[1, 1]), 40.0);
    }

    #[test]
    fn concat_orders_channels_by_argument_position() {
        let a = img(2, 2, |i, j| (i * 2 + j) as f32);
        let b = img(2, 2, |i, j| 100.0 + (i * 2 + j) as f32);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.at(&[1, 0, 0]), 2.0);
        assert_eq!(c.at(&[1, 0, 1]), 102.0);
        let three = concat_channels(&[&a, &c]).unwrap();
        assert_eq!(three.shape(), &[2, 2, 3]);
        assert_eq!(three.at(&[0, 1, 0]), 1.0);
        assert_eq!(three.at(&[0, 1, 2]), 101.0);
    }

    #[test]
    fn concat_rejects_mismatched_sizes() {
        let a = img(2, 2, |_, _| 0.0);
        let b = img(2, 3, |_, _| 0.0);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn normalize_endpoints_are_exact() {
        let x = Tensor::new(vec![3], vec![0.0f32, 127.5, 255.0]).unwrap();
        let u = normalize(&x, NormMode::Unit);
        assert_eq!(u.data()[0], 0.0);
        assert_eq!(u.data()[2], 1.0);
        let s = normalize(&x, NormMode::Signed);
        assert_eq!(s.data()[0], -1.0);
        assert_eq!(s.data()[1], 0.0);
        assert_eq!(s.data()[2], 1.0);
    }

    #[test]
    fn integer_images_filter_exactly_in_f32() {
        // u8-valued input: every intermediate is an integer below 2^24, so
        // f32 and f64 pipelines agree bit for bit after rounding
        let x32 = img(16, 16, |i, j| ((i * 37 + j * 101 + 13) % 256) as f32);
        let x64 = Tensor::from_fn(&[16, 16], |i| x32.at(&[i[0], i[1]]) as f64);
        let (gx32, _) = sobel(&x32).unwrap();
        let (gx64, _) = sobel(&x64).unwrap();
        for (a, b) in gx32.data().iter().zip(gx64.data()) {
            assert_eq!(*a as f64, *b);
        }
    }
}
