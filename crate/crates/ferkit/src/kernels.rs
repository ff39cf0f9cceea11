//! Raw numeric kernels. Shapes are validated by the tape before these run;
//! everything here assumes consistent buffer lengths (debug-asserted).
//!
//! Determinism contract: every kernel produces bit-identical output for a
//! given input regardless of thread count. Parallel loops only ever split
//! work so that each output element is written by exactly one task with a
//! fixed serial accumulation order inside it; reductions that need partial
//! buffers reduce them in a fixed block order.

use rayon::prelude::*;

use crate::tape::Padding;
use crate::tensor::Element;

/// Below this many scalar ops the rayon dispatch overhead dominates.
const PAR_MIN_WORK: usize = 1 << 20;

#[inline]
fn parallel(work: usize) -> bool {
    work >= PAR_MIN_WORK && rayon::current_num_threads() > 1
}

#[inline]
pub(crate) fn axpy<E: Element>(y: &mut [E], a: E, x: &[E]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn add_into<E: Element>(y: &mut [E], x: &[E]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

/// Applies `f(row_index, row)` to every `row_len` chunk of `buf`.
pub(crate) fn run_rows<E, F>(buf: &mut [E], row_len: usize, work: usize, f: F)
where
    E: Element,
    F: Fn(usize, &mut [E]) + Sync,
{
    if parallel(work) {
        buf.par_chunks_mut(row_len).enumerate().for_each(|(r, row)| f(r, row));
    } else {
        for (r, row) in buf.chunks_mut(row_len).enumerate() {
            f(r, row);
        }
    }
}

// ── dense matmul ────────────────────────────────────────────────────────────

/// C = A*B with A [m,k], B [k,n], C [m,n]. Row-axpy order: the inner loop
/// streams rows of B, which vectorizes without reassociating any sums.
pub(crate) fn matmul_into<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [E], a_row: &[E]| {
        for (p, &av) in a_row.iter().enumerate() {
            axpy(c_row, av, &b[p * n..(p + 1) * n]);
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(n).zip_eq(a.par_chunks(k)).for_each(|(cr, ar)| row(cr, ar));
    } else {
        for (cr, ar) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(cr, ar);
        }
    }
}

pub(crate) fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    matmul_into(&mut c, a, b, m, k, n);
    c
}

pub(crate) fn transpose2d<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ── index odometer ──────────────────────────────────────────────────────────

/// Walks `shape` in row-major order calling `f(derived_offset)`, where the
/// derived offset advances by `strides[ax]` per step along axis `ax`.
/// Strides may be zero (broadcast) or negative-free arbitrary (transpose).
pub(crate) fn walk<F: FnMut(usize)>(shape: &[usize], strides: &[isize], mut f: F) {
    debug_assert_eq!(shape.len(), strides.len());
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off: isize = 0;
    for _ in 0..total {
        f(off as usize);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * shape[ax] as isize;
        }
    }
}

// ── convolution ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    /// Padded extent actually touched by the kernel sweep.
    pub hp: usize,
    pub wp: usize,
}

impl ConvGeom {
    /// `Same` keeps ceil(len/stride) and splits the pad low/high (extra pixel
    /// goes high); `Valid` requires the kernel to fit.
    pub fn resolve(
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let (oh, ow, pad_t, pad_l) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return None;
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Some(ConvGeom {
            n,
            h,
            w,
            c,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_t,
            pad_l,
            hp: (oh - 1) * stride + kh,
            wp: (ow - 1) * stride + kw,
        })
    }

    fn trivial_pad(&self) -> bool {
        self.pad_t == 0 && self.pad_l == 0 && self.hp == self.h && self.wp == self.w
    }
}

/// Copies x into a zero-padded (or truncated, when the sweep ends short of
/// the input edge) buffer of extent [n, hp, wp, c].
fn pad_input<E: Element>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let mut xp = vec![E::zero(); g.n * g.hp * g.wp * g.c];
    let run_cols = (g.pad_l + g.w).min(g.wp) - g.pad_l;
    for n in 0..g.n {
        for i in 0..g.hp {
            let Some(si) = i.checked_sub(g.pad_t) else { continue };
            if si >= g.h {
                continue;
            }
            let src = &x[((n * g.h + si) * g.w) * g.c..][..run_cols * g.c];
            let dst = &mut xp[((n * g.hp + i) * g.wp + g.pad_l) * g.c..][..run_cols * g.c];
            dst.copy_from_slice(src);
        }
    }
    xp
}

/// Inverse of `pad_input`: gathers the interior back, dropping pad cells.
fn unpad_grad<E: Element>(dxp: &[E], g: &ConvGeom) -> Vec<E> {
    let mut dx = vec![E::zero(); g.n * g.h * g.w * g.c];
    let run_cols = (g.pad_l + g.w).min(g.wp) - g.pad_l;
    for n in 0..g.n {
        for i in 0..g.hp {
            let Some(si) = i.checked_sub(g.pad_t) else { continue };
            if si >= g.h {
                continue;
            }
            let src = &dxp[((n * g.hp + i) * g.wp + g.pad_l) * g.c..][..run_cols * g.c];
            let dst = &mut dx[((n * g.h + si) * g.w) * g.c..][..run_cols * g.c];
            dst.copy_from_slice(src);
        }
    }
    dx
}

/// x [n,h,w,c] * w [kh,kw,c,cout] (+ bias [cout]) -> [n,oh,ow,cout].
pub(crate) fn conv2d_fwd<E: Element>(x: &[E], w: &[E], bias: Option<&[E]>, g: &ConvGeom) -> Vec<E> {
    let rows = g.n * g.oh * g.ow;
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.trivial_pad() {
        let mut out = vec![E::zero(); rows * g.cout];
        matmul_into(&mut out, x, w, rows, g.c, g.cout);
        if let Some(b) = bias {
            run_rows(&mut out, g.cout, rows * g.cout, |_, row| add_into(row, b));
        }
        return out;
    }
    let padded;
    let xp: &[E] = if g.trivial_pad() {
        x
    } else {
        padded = pad_input(x, g);
        &padded
    };
    let mut out = vec![E::zero(); rows * g.cout];
    let g = *g;
    let work = rows * g.kh * g.kw * g.c * g.cout;
    run_rows(&mut out, g.cout, work, |r, out_row| {
        let n = r / (g.oh * g.ow);
        let rem = r % (g.oh * g.ow);
        let (oh, ow) = (rem / g.ow, rem % g.ow);
        for ki in 0..g.kh {
            let ih = oh * g.stride + ki;
            for kj in 0..g.kw {
                let iw = ow * g.stride + kj;
                let src = &xp[((n * g.hp + ih) * g.wp + iw) * g.c..][..g.c];
                let wbase = (ki * g.kw + kj) * g.c * g.cout;
                for (cc, &sv) in src.iter().enumerate() {
                    axpy(out_row, sv, &w[wbase + cc * g.cout..][..g.cout]);
                }
            }
        }
        if let Some(b) = bias {
            add_into(out_row, b);
        }
    });
    out
}

/// Sums `dout` rows into a [cout] bias gradient.
pub(crate) fn sum_rows<E: Element>(dout: &[E], cols: usize) -> Vec<E> {
    let mut acc = vec![E::zero(); cols];
    for row in dout.chunks(cols) {
        add_into(&mut acc, row);
    }
    acc
}

/// Accumulates per-row outer products into fixed-order block partials so the
/// result is identical whether blocks run serially or in parallel.
fn blocked_accumulate<E: Element, F>(rows: usize, acc_len: usize, per_row_work: usize, body: F) -> Vec<E>
where
    F: Fn(usize, &mut [E]) + Sync,
{
    let block = rows.div_ceil(16).max(4096);
    let starts: Vec<usize> = (0..rows).step_by(block).collect();
    let compute = |&s: &usize| {
        let mut local = vec![E::zero(); acc_len];
        for r in s..(s + block).min(rows) {
            body(r, &mut local);
        }
        local
    };
    let parts: Vec<Vec<E>> = if parallel(rows * per_row_work) && starts.len() > 1 {
        starts.par_iter().map(compute).collect()
    } else {
        starts.iter().map(compute).collect()
    };
    let mut acc = vec![E::zero(); acc_len];
    for p in &parts {
        add_into(&mut acc, p);
    }
    acc
}

pub(crate) struct ConvGrads<E> {
    pub dx: Option<Vec<E>>,
    pub dw: Option<Vec<E>>,
    pub db: Option<Vec<E>>,
}

pub(crate) fn conv2d_bwd<E: Element>(
    x: &[E],
    w: &[E],
    dout: &[E],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<E> {
    let rows = g.n * g.oh * g.ow;
    let db = need_db.then(|| sum_rows(dout, g.cout));
    let padded;
    let xp: &[E] = if g.trivial_pad() {
        x
    } else {
        padded = pad_input(x, g);
        &padded
    };
    let g = *g;
    let dw = need_dw.then(|| {
        blocked_accumulate(rows, g.kh * g.kw * g.c * g.cout, g.kh * g.kw * g.c * g.cout, |r, local| {
            let n = r / (g.oh * g.ow);
            let rem = r % (g.oh * g.ow);
            let (oh, ow) = (rem / g.ow, rem % g.ow);
            let dout_row = &dout[r * g.cout..][..g.cout];
            for ki in 0..g.kh {
                let ih = oh * g.stride + ki;
                for kj in 0..g.kw {
                    let iw = ow * g.stride + kj;
                    let src = &xp[((n * g.hp + ih) * g.wp + iw) * g.c..][..g.c];
                    let wbase = (ki * g.kw + kj) * g.c * g.cout;
                    for (cc, &sv) in src.iter().enumerate() {
                        axpy(&mut local[wbase + cc * g.cout..][..g.cout], sv, dout_row);
                    }
                }
            }
        })
    });
    let dx = need_dx.then(|| {
        let mut dxp = vec![E::zero(); g.n * g.hp * g.wp * g.c];
        let sample = g.hp * g.wp * g.c;
        let apply = |n: usize, dxs: &mut [E]| {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wt = transpose2d(&w[(ki * g.kw + kj) * g.c * g.cout..][..g.c * g.cout], g.c, g.cout);
                    for oh in 0..g.oh {
                        let ih = oh * g.stride + ki;
                        for ow in 0..g.ow {
                            let iw = ow * g.stride + kj;
                            let r = (n * g.oh + oh) * g.ow + ow;
                            let dout_row = &dout[r * g.cout..][..g.cout];
                            let dst = &mut dxs[((ih * g.wp) + iw) * g.c..][..g.c];
                            for (o, &gv) in dout_row.iter().enumerate() {
                                axpy(dst, gv, &wt[o * g.c..][..g.c]);
                            }
                        }
                    }
                }
            }
        };
        let work = rows * g.kh * g.kw * g.c * g.cout;
        if parallel(work) && g.n > 1 {
            dxp.par_chunks_mut(sample).enumerate().for_each(|(n, dxs)| apply(n, dxs));
        } else {
            for (n, dxs) in dxp.chunks_mut(sample).enumerate() {
                apply(n, dxs);
            }
        }
        if g.trivial_pad() {
            dxp
        } else {
            unpad_grad(&dxp, &g)
        }
    });
    ConvGrads { dx, dw, db }
}

// ── depthwise convolution ───────────────────────────────────────────────────

/// x [n,h,w,c] * w [kh,kw,c] -> [n,oh,ow,c], one filter per channel.
pub(crate) fn depthwise_fwd<E: Element>(x: &[E], w: &[E], g: &ConvGeom) -> Vec<E> {
    debug_assert_eq!(g.c, g.cout);
    let rows = g.n * g.oh * g.ow;
    let padded;
    let xp: &[E] = if g.trivial_pad() {
        x
    } else {
        padded = pad_input(x, g);
        &padded
    };
    let mut out = vec![E::zero(); rows * g.c];
    let g = *g;
    run_rows(&mut out, g.c, rows * g.kh * g.kw * g.c, |r, out_row| {
        let n = r / (g.oh * g.ow);
        let rem = r % (g.oh * g.ow);
        let (oh, ow) = (rem / g.ow, rem % g.ow);
        for ki in 0..g.kh {
            let ih = oh * g.stride + ki;
            for kj in 0..g.kw {
                let iw = ow * g.stride + kj;
                let src = &xp[((n * g.hp + ih) * g.wp + iw) * g.c..][..g.c];
                let wrow = &w[(ki * g.kw + kj) * g.c..][..g.c];
                for ((o, &sv), &wv) in out_row.iter_mut().zip(src).zip(wrow) {
                    *o += sv * wv;
                }
            }
        }
    });
    out
}

pub(crate) fn depthwise_bwd<E: Element>(
    x: &[E],
    w: &[E],
    dout: &[E],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let rows = g.n * g.oh * g.ow;
    let padded;
    let xp: &[E] = if g.trivial_pad() {
        x
    } else {
        padded = pad_input(x, g);
        &padded
    };
    let g = *g;
    let dw = need_dw.then(|| {
        blocked_accumulate(rows, g.kh * g.kw * g.c, g.kh * g.kw * g.c, |r, local| {
            let n = r / (g.oh * g.ow);
            let rem = r % (g.oh * g.ow);
            let (oh, ow) = (rem / g.ow, rem % g.ow);
            let dout_row = &dout[r * g.c..][..g.c];
            for ki in 0..g.kh {
                let ih = oh * g.stride + ki;
                for kj in 0..g.kw {
                    let iw = ow * g.stride + kj;
                    let src = &xp[((n * g.hp + ih) * g.wp + iw) * g.c..][..g.c];
                    let dst = &mut local[(ki * g.kw + kj) * g.c..][..g.c];
                    for ((d, &sv), &gv) in dst.iter_mut().zip(src).zip(dout_row) {
                        *d += sv * gv;
                    }
                }
            }
        })
    });
    let dx = need_dx.then(|| {
        let mut dxp = vec![E::zero(); g.n * g.hp * g.wp * g.c];
        let sample = g.hp * g.wp * g.c;
        let apply = |n: usize, dxs: &mut [E]| {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wrow = &w[(ki * g.kw + kj) * g.c..][..g.c];
                    for oh in 0..g.oh {
                        let ih = oh * g.stride + ki;
                        for ow in 0..g.ow {
                            let iw = ow * g.stride + kj;
                            let r = (n * g.oh + oh) * g.ow + ow;
                            let dout_row = &dout[r * g.c..][..g.c];
                            let dst = &mut dxs[((ih * g.wp) + iw) * g.c..][..g.c];
                            for ((d, &gv), &wv) in dst.iter_mut().zip(dout_row).zip(wrow) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        };
        let work = rows * g.kh * g.kw * g.c;
        if parallel(work) && g.n > 1 {
            dxp.par_chunks_mut(sample).enumerate().for_each(|(n, dxs)| apply(n, dxs));
        } else {
            for (n, dxs) in dxp.chunks_mut(sample).enumerate() {
                apply(n, dxs);
            }
        }
        if g.trivial_pad() {
            dxp
        } else {
            unpad_grad(&dxp, &g)
        }
    });
    (dx, dw)
}

// ── max pooling ─────────────────────────────────────────────────────────────

/// Valid-window max pool. Returns (values, flat argmax into x). Ties pick the
/// first window cell in (ki,kj) order, which keeps backward deterministic.
pub(crate) fn maxpool_fwd<E: Element>(
    x: &[E],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    window: usize,
    stride: usize,
) -> (Vec<E>, Vec<u32>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let rows = n * oh * ow;
    let mut out = vec![E::zero(); rows * c];
    let mut arg = vec![0u32; rows * c];
    for r in 0..rows {
        let nn = r / (oh * ow);
        let rem = r % (oh * ow);
        let (ohh, oww) = (rem / ow, rem % ow);
        for cc in 0..c {
            let mut best = E::neg_infinity();
            let mut best_at = 0u32;
            for ki in 0..window {
                let ih = ohh * stride + ki;
                for kj in 0..window {
                    let iw = oww * stride + kj;
                    let flat = ((nn * h + ih) * w + iw) * c + cc;
                    let v = x[flat];
                    if v > best {
                        best = v;
                        best_at = flat as u32;
                    }
                }
            }
            out[r * c + cc] = best;
            arg[r * c + cc] = best_at;
        }
    }
    (out, arg, oh, ow)
}

pub(crate) fn scatter_add_by_index<E: Element>(dout: &[E], arg: &[u32], dx_len: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); dx_len];
    for (&g, &a) in dout.iter().zip(arg) {
        dx[a as usize] += g;
    }
    dx
}

// ── batch norm ──────────────────────────────────────────────────────────────

/// Per-channel mean and biased variance over all leading axes; channels last.
pub(crate) fn channel_moments<E: Element>(x: &[E], c: usize) -> (Vec<E>, Vec<E>) {
    let rows = x.len() / c;
    let inv = E::from_f64(1.0 / rows as f64);
    let mut mean = vec![E::zero(); c];
    for row in x.chunks(c) {
        add_into(&mut mean, row);
    }
    for m in &mut mean {
        *m *= inv;
    }
    let mut var = vec![E::zero(); c];
    for row in x.chunks(c) {
        for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = xv - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v *= inv;
    }
    (mean, var)
}

/// y = scale*(x-mean)/sqrt(var+eps) + shift, folded to y = a*x + b per channel.
pub(crate) fn bn_fwd<E: Element>(x: &[E], scale: &[E], shift: &[E], mean: &[E], var: &[E], eps: E) -> Vec<E> {
    let c = scale.len();
    let mut a = vec![E::zero(); c];
    let mut b = vec![E::zero(); c];
    for i in 0..c {
        a[i] = scale[i] / (var[i] + eps).sqrt();
        b[i] = shift[i] - mean[i] * a[i];
    }
    let mut y = vec![E::zero(); x.len()];
    run_rows(&mut y, c, x.len(), |r, yr| {
        let xr = &x[r * c..][..c];
        for ((yv, &xv), (&av, &bv)) in yr.iter_mut().zip(xr).zip(a.iter().zip(&b)) {
            *yv = av * xv + bv;
        }
    });
    y
}

/// Backward when mean/var were computed from this batch:
/// dx = (scale/std) * (dy - mean(dy) - xhat * mean(dy*xhat)).
pub(crate) fn bn_bwd_train<E: Element>(
    x: &[E],
    dout: &[E],
    scale: &[E],
    mean: &[E],
    var: &[E],
    eps: E,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let c = scale.len();
    let rows = x.len() / c;
    let inv_m = E::from_f64(1.0 / rows as f64);
    let mut istd = vec![E::zero(); c];
    for i in 0..c {
        istd[i] = E::one() / (var[i] + eps).sqrt();
    }
    let mut s1 = vec![E::zero(); c];
    let mut s2 = vec![E::zero(); c];
    for (xr, gr) in x.chunks(c).zip(dout.chunks(c)) {
        for i in 0..c {
            let xhat = (xr[i] - mean[i]) * istd[i];
            s1[i] += gr[i];
            s2[i] += gr[i] * xhat;
        }
    }
    let mut k1 = vec![E::zero(); c];
    let mut k2 = vec![E::zero(); c];
    let mut a = vec![E::zero(); c];
    for i in 0..c {
        k1[i] = s1[i] * inv_m;
        k2[i] = s2[i] * inv_m;
        a[i] = scale[i] * istd[i];
    }
    let mut dx = vec![E::zero(); x.len()];
    run_rows(&mut dx, c, x.len(), |r, dr| {
        let xr = &x[r * c..][..c];
        let gr = &dout[r * c..][..c];
        for i in 0..c {
            let xhat = (xr[i] - mean[i]) * istd[i];
            dr[i] = a[i] * (gr[i] - k1[i] - xhat * k2[i]);
        }
    });
    (dx, s2, s1)
}

/// Backward when mean/var are running constants: the map is a fixed affine.
pub(crate) fn bn_bwd_eval<E: Element>(
    x: &[E],
    dout: &[E],
    scale: &[E],
    mean: &[E],
    var: &[E],
    eps: E,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let c = scale.len();
    let mut istd = vec![E::zero(); c];
    for i in 0..c {
        istd[i] = E::one() / (var[i] + eps).sqrt();
    }
    let mut s1 = vec![E::zero(); c];
    let mut s2 = vec![E::zero(); c];
    for (xr, gr) in x.chunks(c).zip(dout.chunks(c)) {
        for i in 0..c {
            s1[i] += gr[i];
            s2[i] += gr[i] * (xr[i] - mean[i]) * istd[i];
        }
    }
    let mut dx = vec![E::zero(); x.len()];
    run_rows(&mut dx, c, x.len(), |r, dr| {
        let gr = &dout[r * c..][..c];
        for i in 0..c {
            dr[i] = gr[i] * scale[i] * istd[i];
        }
    });
    (dx, s2, s1)
}

// ── affine grid + bilinear sampling ─────────────────────────────────────────

/// Per-sample pixel-space affine coefficients for one output axis:
/// src = a_j*j + b_i*i + c0. Derived so that an identity theta over equal
/// sizes yields src == index exactly (a_j == 1.0, c0 == 0.0 bit-for-bit).
struct AxisCoeff {
    a_j: f64,
    b_i: f64,
    c0: f64,
    r_j: f64,
    r_i: f64,
    half: f64,
}

fn axis_coeff(t_x: f64, t_y: f64, t_c: f64, src_len: usize, ow: usize, oh: usize) -> AxisCoeff {
    let half = (src_len - 1) as f64 / 2.0;
    let r_j = if ow > 1 { (src_len - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let r_i = if oh > 1 { (src_len - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let ax = if ow > 1 { t_x } else { 0.0 };
    let by = if oh > 1 { t_y } else { 0.0 };
    AxisCoeff {
        a_j: t_x * r_j,
        b_i: t_y * r_i,
        c0: half * (((t_c + 1.0) - ax) - by),
        r_j,
        r_i,
        half,
    }
}

/// theta [n,2,3] (normalized [-1,1] coords, corner-aligned) -> grid
/// [n,oh,ow,2] holding pixel-space (src_x, src_y) per output cell.
pub(crate) fn affine_grid_fwd<E: Element>(
    theta: &[E],
    n: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
) -> Vec<E> {
    let mut grid = vec![E::zero(); n * oh * ow * 2];
    for s in 0..n {
        let t: Vec<f64> = theta[s * 6..(s + 1) * 6].iter().map(|v| v.to_f64_lossy()).collect();
        let cx = axis_coeff(t[0], t[1], t[2], sw, ow, oh);
        let cy = axis_coeff(t[3], t[4], t[5], sh, ow, oh);
        let (ax, bx, c0x) = (E::from_f64(cx.a_j), E::from_f64(cx.b_i), E::from_f64(cx.c0));
        let (ay, by, c0y) = (E::from_f64(cy.a_j), E::from_f64(cy.b_i), E::from_f64(cy.c0));
        for i in 0..oh {
            let ie = E::from_f64(i as f64);
            for j in 0..ow {
                let je = E::from_f64(j as f64);
                let g = ((s * oh + i) * ow + j) * 2;
                grid[g] = ax * je + bx * ie + c0x;
                grid[g + 1] = ay * je + by * ie + c0y;
            }
        }
    }
    grid
}

pub(crate) fn affine_grid_bwd<E: Element>(
    dgrid: &[E],
    n: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
) -> Vec<E> {
    let mut dtheta = vec![E::zero(); n * 6];
    let cx = axis_coeff(0.0, 0.0, 0.0, sw, ow, oh);
    let cy = axis_coeff(0.0, 0.0, 0.0, sh, ow, oh);
    for s in 0..n {
        let mut acc = [E::zero(); 6];
        for i in 0..oh {
            for j in 0..ow {
                let g = ((s * oh + i) * ow + j) * 2;
                let gx = dgrid[g];
                let gy = dgrid[g + 1];
                let dxa = if ow > 1 { cx.r_j * j as f64 - cx.half } else { 0.0 };
                let dxb = if oh > 1 { cx.r_i * i as f64 - cx.half } else { 0.0 };
                let dya = if ow > 1 { cy.r_j * j as f64 - cy.half } else { 0.0 };
                let dyb = if oh > 1 { cy.r_i * i as f64 - cy.half } else { 0.0 };
                acc[0] += gx * E::from_f64(dxa);
                acc[1] += gx * E::from_f64(dxb);
                acc[2] += gx * E::from_f64(cx.half);
                acc[3] += gy * E::from_f64(dya);
                acc[4] += gy * E::from_f64(dyb);
                acc[5] += gy * E::from_f64(cy.half);
            }
        }
        dtheta[s * 6..(s + 1) * 6].copy_from_slice(&acc);
    }
    dtheta
}

/// Bilinear sample with zero padding outside the image. The lerp form
/// v00 + f*(v01 - v00) returns v00 bit-exactly when f == 0, which is what
/// makes an identity grid a bit-exact copy.
pub(crate) fn grid_sample_fwd<E: Element>(
    img: &[E],
    grid: &[E],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let rows = n * oh * ow;
    let mut out = vec![E::zero(); rows * c];
    let fetch = |nn: usize, y: isize, x: isize, cc: usize| -> E {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            E::zero()
        } else {
            img[((nn * h + y as usize) * w + x as usize) * c + cc]
        }
    };
    run_rows(&mut out, c, rows * c * 4, |r, out_row| {
        let nn = r / (oh * ow);
        let sx = grid[r * 2];
        let sy = grid[r * 2 + 1];
        let fx = sx - sx.floor();
        let fy = sy - sy.floor();
        let x0 = sx.floor().to_f64_lossy() as isize;
        let y0 = sy.floor().to_f64_lossy() as isize;
        for (cc, o) in out_row.iter_mut().enumerate() {
            let v00 = fetch(nn, y0, x0, cc);
            let v01 = fetch(nn, y0, x0 + 1, cc);
            let v10 = fetch(nn, y0 + 1, x0, cc);
            let v11 = fetch(nn, y0 + 1, x0 + 1, cc);
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            *o = top + fy * (bot - top);
        }
    });
    out
}

pub(crate) fn grid_sample_bwd<E: Element>(
    img: &[E],
    grid: &[E],
    dout: &[E],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    need_dimg: bool,
    need_dgrid: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let rows = n * oh * ow;
    let mut dimg = need_dimg.then(|| vec![E::zero(); n * h * w * c]);
    let mut dgrid = need_dgrid.then(|| vec![E::zero(); rows * 2]);
    let in_bounds = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
    let fetch = |nn: usize, y: isize, x: isize, cc: usize| -> E {
        if in_bounds(y, x) {
            img[((nn * h + y as usize) * w + x as usize) * c + cc]
        } else {
            E::zero()
        }
    };
    for r in 0..rows {
        let nn = r / (oh * ow);
        let sx = grid[r * 2];
        let sy = grid[r * 2 + 1];
        let fx = sx - sx.floor();
        let fy = sy - sy.floor();
        let x0 = sx.floor().to_f64_lossy() as isize;
        let y0 = sy.floor().to_f64_lossy() as isize;
        let one = E::one();
        let mut dsx = E::zero();
        let mut dsy = E::zero();
        for cc in 0..c {
            let gv = dout[r * c + cc];
            let v00 = fetch(nn, y0, x0, cc);
            let v01 = fetch(nn, y0, x0 + 1, cc);
            let v10 = fetch(nn, y0 + 1, x0, cc);
            let v11 = fetch(nn, y0 + 1, x0 + 1, cc);
            if let Some(di) = dimg.as_deref_mut() {
                let mut put = |y: isize, x: isize, wgt: E| {
                    if in_bounds(y, x) {
                        di[((nn * h + y as usize) * w + x as usize) * c + cc] += gv * wgt;
                    }
                };
                put(y0, x0, (one - fx) * (one - fy));
                put(y0, x0 + 1, fx * (one - fy));
                put(y0 + 1, x0, (one - fx) * fy);
                put(y0 + 1, x0 + 1, fx * fy);
            }
            if dgrid.is_some() {
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                dsx += gv * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                dsy += gv * (bot - top);
            }
        }
        if let Some(dg) = dgrid.as_deref_mut() {
            dg[r * 2] = dsx;
            dg[r * 2 + 1] = dsy;
        }
    }
    (dimg, dgrid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 1.0).collect();
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        assert_eq!(matmul(&a, &eye, 3, 4, 4), a);
    }

    #[test]
    fn transpose2d_roundtrip() {
        let a: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let t = transpose2d(&a, 3, 5);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 5.0);
        assert_eq!(transpose2d(&t, 5, 3), a);
    }

    #[test]
    fn walk_with_zero_strides_broadcasts() {
        let mut seen = Vec::new();
        walk(&[2, 3], &[0, 1], |off| seen.push(off));
        assert_eq!(seen, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn conv_geom_same_matches_ceil_rule() {
        let g = ConvGeom::resolve(1, 64, 64, 3, 3, 3, 8, 2, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (32, 32));
        assert_eq!((g.pad_t, g.pad_l), (0, 0)); // total pad 1 goes high
        assert_eq!((g.hp, g.wp), (65, 65));
        let g1 = ConvGeom::resolve(1, 64, 64, 3, 3, 3, 8, 1, Padding::Same).unwrap();
        assert_eq!((g1.oh, g1.pad_t, g1.hp), (64, 1, 66));
    }

    #[test]
    fn conv2d_matches_hand_computed_3x3() {
        // 1x4x4x1 image 0..15, single 3x3 averaging-ish kernel of ones, valid.
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let w = vec![1.0f64; 9];
        let g = ConvGeom::resolve(1, 4, 4, 1, 3, 3, 1, 1, Padding::Valid).unwrap();
        let out = conv2d_fwd(&x, &w, None, &g);
        // window sums at (0,0),(0,1),(1,0),(1,1)
        assert_eq!(out, vec![45.0, 54.0, 81.0, 90.0]);
    }

    #[test]
    fn conv2d_one_by_one_is_a_per_pixel_matmul() {
        let x: Vec<f32> = (0..2 * 3 * 3 * 4).map(|i| (i as f32).sin()).collect();
        let w: Vec<f32> = (0..4 * 5).map(|i| (i as f32 * 0.3).cos()).collect();
        let g = ConvGeom::resolve(2, 3, 3, 4, 1, 1, 5, 1, Padding::Same).unwrap();
        let fast = conv2d_fwd(&x, &w, None, &g);
        let rows = 2 * 3 * 3;
        let mut slow = vec![0.0f32; rows * 5];
        for r in 0..rows {
            for cc in 0..4 {
                for o in 0..5 {
                    slow[r * 5 + o] += x[r * 4 + cc] * w[cc * 5 + o];
                }
            }
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn depthwise_applies_per_channel_filters() {
        // 1x3x3x2, valid 3x3: channel 0 kernel all ones, channel 1 all twos.
        let mut x = vec![0.0f64; 18];
        for i in 0..9 {
            x[i * 2] = i as f64;
            x[i * 2 + 1] = 1.0;
        }
        let mut w = vec![0.0f64; 18];
        for t in 0..9 {
            w[t * 2] = 1.0;
            w[t * 2 + 1] = 2.0;
        }
        let g = ConvGeom::resolve(1, 3, 3, 2, 3, 3, 2, 1, Padding::Valid).unwrap();
        let out = depthwise_fwd(&x, &w, &g);
        assert_eq!(out, vec![36.0, 18.0]);
    }

    #[test]
    fn maxpool_tracks_argmax_and_ties_go_first() {
        let x = vec![1.0f32, 5.0, 2.0, 5.0]; // 1x2x2x1, both 5s tie
        let (out, arg, oh, ow) = maxpool_fwd(&x, 1, 2, 2, 1, 2, 2);
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![1]);
        let dx = scatter_add_by_index(&[3.0f32], &arg, 4);
        assert_eq!(dx, vec![0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_moments_match_hand_values() {
        // two rows of two channels: ch0 = {1,3}, ch1 = {2,6}
        let x = vec![1.0f64, 2.0, 3.0, 6.0];
        let (m, v) = channel_moments(&x, 2);
        assert_eq!(m, vec![2.0, 4.0]);
        assert_eq!(v, vec![1.0, 4.0]);
    }

    #[test]
    fn bn_fwd_normalizes_to_zero_mean_unit_var() {
        let x = vec![1.0f64, 3.0, 5.0, 7.0]; // one channel, rows {1,3,5,7}
        let (m, v) = channel_moments(&x, 1);
        let y = bn_fwd(&x, &[1.0], &[0.0], &m, &v, 0.0);
        let (ym, yv) = channel_moments(&y, 1);
        assert!(ym[0].abs() < 1e-12);
        assert!((yv[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_theta_grid_is_exact_indices() {
        let theta: Vec<f32> = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let grid = affine_grid_fwd(&theta, 1, 5, 7, 5, 7);
        for i in 0..5 {
            for j in 0..7 {
                let g = (i * 7 + j) * 2;
                assert_eq!(grid[g].to_bits(), (j as f32).to_bits());
                assert_eq!(grid[g + 1].to_bits(), (i as f32).to_bits());
            }
        }
    }

    #[test]
    fn grid_sample_identity_copies_bits() {
        let img: Vec<f32> = (0..2 * 4 * 6 * 3).map(|i| (i as f32 * 0.71).sin()).collect();
        let theta: Vec<f32> = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(2);
        let grid = affine_grid_fwd(&theta, 2, 4, 6, 4, 6);
        let out = grid_sample_fwd(&img, &grid, 2, 4, 6, 3, 4, 6);
        assert_eq!(out, img);
    }

    #[test]
    fn grid_sample_midpoint_averages_neighbors() {
        // 1x1x2x1 image [10, 20], sample at x=0.5 -> 15
        let img = vec![10.0f64, 20.0];
        let grid = vec![0.5, 0.0];
        let out = grid_sample_fwd(&img, &grid, 1, 1, 2, 1, 1, 1);
        assert_eq!(out, vec![15.0]);
    }

    #[test]
    fn grid_sample_out_of_range_is_zero_padded() {
        let img = vec![8.0f64];
        // fully outside
        let out = grid_sample_fwd(&img, &[5.0, 5.0], 1, 1, 1, 1, 1, 1);
        assert_eq!(out, vec![0.0]);
        // halfway off the left edge: 0.5*0 + 0.5*8
        let out = grid_sample_fwd(&img, &[-0.5, 0.0], 1, 1, 1, 1, 1, 1);
        assert_eq!(out, vec![4.0]);
    }
}
