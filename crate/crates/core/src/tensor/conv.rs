//! 2D cross-correlation with zero padding.
//!
//! Every output element is accumulated in the fixed order
//! `(c_in, ky, kx)` starting from zero, and the bias is added last. The
//! stride-1 kernels vectorise across output positions rather than across the
//! reduction, so results are bit-identical to a textbook nested loop.
//!
//! For stride 1 the padded input plane is addressed through a "wide" output
//! layout whose rows have the padded width `wp`: output `(oy, ox)` lives at
//! `oy * wp + ox`, and input tap `(ky, kx)` for it at `oy * wp + ox + ky * wp + kx`.
//! One tap therefore touches a single contiguous run of both buffers; the
//! `wp - wo` trailing columns of each wide row are scratch and get dropped.

#[cfg(target_arch = "x86_64")]
use std::any::TypeId;

use rayon::prelude::*;

use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Frames per parallel work item. Fixed so that reductions over the batch
/// sum partials in the same order whatever the thread count.
const FRAME_CHUNK: usize = 4;
/// Output channels per register block.
const OUT_BLOCK: usize = 4;
/// Output positions per register block.
const POS_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dParams { stride, padding }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], p: Conv2dParams) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [n,c,h,w] and weight [o,c,kh,kw], got {x:?} and {w:?}"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} has {} channels but weight {w:?} expects {}", x[1], w[1]),
            ));
        }
        if p.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (Some(ho), Some(wo)) = (
            output_extent(x[2], w[2], p.stride, p.padding),
            output_extent(x[3], w[3], p.stride, p.padding),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {w:?} does not fit input {x:?} with padding {}", p.padding),
            ));
        };
        Ok(Geom {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride: p.stride,
            pad: p.padding,
            hp: x[2] + 2 * p.padding,
            wp: x[3] + 2 * p.padding,
            ho,
            wo,
        })
    }

    fn in_frame(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_frame(&self) -> usize {
        self.c_out * self.ho * self.wo
    }

    fn plane_p(&self) -> usize {
        self.hp * self.wp
    }

    /// Length of the contiguous wide run covering all valid outputs.
    fn wide_len(&self) -> usize {
        (self.ho - 1) * self.wp + self.wo
    }

    fn weight_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx
    }
}

fn pad_frame<T: Scalar>(g: &Geom, x: &[T], xpad: &mut [T]) {
    xpad.fill(T::zero());
    for ci in 0..g.c_in {
        for y in 0..g.h {
            let src = &x[(ci * g.h + y) * g.w..][..g.w];
            let dst = &mut xpad[ci * g.plane_p() + (y + g.pad) * g.wp + g.pad..][..g.w];
            dst.copy_from_slice(src);
        }
    }
}

/// `out[b][p] = sum_c sum_t wk[b][c][t] * src[c * src_stride + offs[t] + p]` for
/// `p in 0..len`, accumulated from zero over `c`, then `t`, in that order.
///
/// Dispatches to an AVX2 build of the same code when the CPU has it. Rust never
/// contracts `a + w * x` into a fused multiply-add, so both builds round
/// identically.
#[allow(clippy::too_many_arguments)]
fn tap_accumulate<T: Scalar>(out: &mut [T], outs: usize, len: usize, src: &[T], src_stride: usize, chans: usize, offs: &[usize], wk: &[T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        return unsafe { tap_accumulate_avx2(out, outs, len, src, src_stride, chans, offs, wk) };
    }
    tap_accumulate_impl(out, outs, len, src, src_stride, chans, offs, wk)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn tap_accumulate_avx2<T: Scalar>(out: &mut [T], outs: usize, len: usize, src: &[T], src_stride: usize, chans: usize, offs: &[usize], wk: &[T]) {
    tap_accumulate_impl(out, outs, len, src, src_stride, chans, offs, wk)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tap_accumulate_impl<T: Scalar>(out: &mut [T], outs: usize, len: usize, src: &[T], src_stride: usize, chans: usize, offs: &[usize], wk: &[T]) {
    let taps = offs.len();
    let g = TapGeom {
        len,
        src_stride,
        chans,
        offs,
    };
    // Weights of each output block interleaved as [c][t][b].
    let mut packed = vec![T::zero(); OUT_BLOCK * chans * taps];
    let mut b0 = 0;
    while b0 < outs {
        let nb = OUT_BLOCK.min(outs - b0);
        for b in 0..nb {
            for ct in 0..chans * taps {
                packed[ct * nb + b] = wk[(b0 + b) * chans * taps + ct];
            }
        }
        let wp = &packed[..nb * chans * taps];
        if nb == OUT_BLOCK {
            tap_rows::<T, OUT_BLOCK>(out, b0, src, wp, &g);
        } else {
            for b in 0..nb {
                // Single-output rows read a stride-`nb` view; repack densely.
                let single: Vec<T> = (0..chans * taps).map(|ct| wp[ct * nb + b]).collect();
                tap_rows::<T, 1>(out, b0 + b, src, &single, &g);
            }
        }
        b0 += nb;
    }
}

struct TapGeom<'a> {
    len: usize,
    src_stride: usize,
    chans: usize,
    offs: &'a [usize],
}

#[inline(always)]
fn tap_rows<T: Scalar, const NB: usize>(out: &mut [T], b0: usize, src: &[T], wp: &[T], g: &TapGeom) {
    let mut p = 0;
    while p + POS_BLOCK <= g.len {
        tap_block::<T, NB, POS_BLOCK>(out, b0, p, src, wp, g);
        p += POS_BLOCK;
    }
    while p < g.len {
        tap_block::<T, NB, 1>(out, b0, p, src, wp, g);
        p += 1;
    }
}

/// `NB` outputs by `NW` positions held in registers across the whole
/// reduction. `wp` holds the block's weights as `[c][t][b]`.
#[inline(always)]
fn tap_block<T: Scalar, const NB: usize, const NW: usize>(out: &mut [T], b0: usize, p: usize, src: &[T], wp: &[T], g: &TapGeom) {
    let mut acc = [[T::zero(); NW]; NB];
    let mut wv = wp.chunks_exact(NB);
    for c in 0..g.chans {
        let s = &src[c * g.src_stride + p..];
        for &off in g.offs {
            let xs: &[T; NW] = s[off..off + NW].try_into().expect("tile length");
            let w: &[T; NB] = wv.next().expect("packed weights").try_into().expect("block width");
            for (a, &w) in acc.iter_mut().zip(w) {
                for (a, &x) in a.iter_mut().zip(xs) {
                    *a += w * x;
                }
            }
        }
    }
    for (b, a) in acc.iter().enumerate() {
        out[(b0 + b) * g.len + p..][..NW].copy_from_slice(a);
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot_n::<T, 1>([a], b)[0]
}

/// Dot products of `N` rows with one shared vector, eight lanes each.
#[inline(always)]
fn dot_n<T: Scalar, const N: usize>(rows: [&[T]; N], x: &[T]) -> [T; N] {
    let d = dot_grid::<T, N, 1>(rows, [x]);
    d.map(|r| r[0])
}

/// Dot products of every row with every vector in `xs`, eight lanes each.
/// Each result is summed in the same order as a lone [`dot`].
#[inline(always)]
fn dot_grid<T: Scalar, const N: usize, const M: usize>(rows: [&[T]; N], xs: [&[T]; M]) -> [[T; M]; N] {
    let len = xs[0].len();
    assert!(rows.iter().chain(&xs).all(|r| r.len() >= len));
    #[cfg(target_arch = "x86_64")]
    if TypeId::of::<T>() == TypeId::of::<f32>() && std::is_x86_feature_detected!("avx2") {
        let cast = |r: &[T]| {
            // SAFETY: T is f32, checked above.
            unsafe { std::slice::from_raw_parts(r.as_ptr().cast::<f32>(), len) }
        };
        // SAFETY: AVX2 was detected and every slice holds at least `len` values.
        let out = unsafe { simd::dot_grid_f32(rows.map(cast), xs.map(cast), len) };
        // SAFETY: T is f32.
        return out.map(|r| r.map(|v| unsafe { std::mem::transmute_copy::<f32, T>(&v) }));
    }
    let body = len - len % 8;
    let mut acc = [[[T::zero(); 8]; M]; N];
    for k in (0..body).step_by(8) {
        let xv: [&[T; 8]; M] = xs.map(|x| x[k..k + 8].try_into().expect("lane width"));
        for (a, r) in acc.iter_mut().zip(&rows) {
            let rs: &[T; 8] = r[k..k + 8].try_into().expect("lane width");
            for (am, xm) in a.iter_mut().zip(&xv) {
                for i in 0..8 {
                    am[i] += rs[i] * xm[i];
                }
            }
        }
    }
    let mut out = [[T::zero(); M]; N];
    for ((o, a), r) in out.iter_mut().zip(&acc).zip(&rows) {
        for ((om, am), x) in o.iter_mut().zip(a).zip(&xs) {
            *om = am.iter().copied().sum::<T>();
            for q in body..len {
                *om += r[q] * x[q];
            }
        }
    }
    out
}

/// `gw[b][c][t] += sum_p g[b * g_stride + p] * src[c * src_stride + offs[t] + p]`
/// for `p in 0..len`.
#[allow(clippy::too_many_arguments)]
fn tap_correlate<T: Scalar>(gw: &mut [T], g: &[T], g_stride: usize, outs: usize, len: usize, src: &[T], src_stride: usize, chans: usize, offs: &[usize]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        return unsafe { tap_correlate_avx2(gw, g, g_stride, outs, len, src, src_stride, chans, offs) };
    }
    tap_correlate_impl(gw, g, g_stride, outs, len, src, src_stride, chans, offs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn tap_correlate_avx2<T: Scalar>(gw: &mut [T], g: &[T], g_stride: usize, outs: usize, len: usize, src: &[T], src_stride: usize, chans: usize, offs: &[usize]) {
    tap_correlate_impl(gw, g, g_stride, outs, len, src, src_stride, chans, offs)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tap_correlate_impl<T: Scalar>(gw: &mut [T], g: &[T], g_stride: usize, outs: usize, len: usize, src: &[T], src_stride: usize, chans: usize, offs: &[usize]) {
    let taps = offs.len();
    let row = |b: usize| &g[b * g_stride..][..len];
    for c in 0..chans {
        let s = &src[c * src_stride..];
        let mut t = 0;
        while t + 3 <= taps {
            let xs = [0, 1, 2].map(|i| &s[offs[t + i]..][..len]);
            let mut b = 0;
            while b + 4 <= outs {
                let d = dot_grid([row(b), row(b + 1), row(b + 2), row(b + 3)], xs);
                for (i, r) in d.into_iter().enumerate() {
                    for (j, v) in r.into_iter().enumerate() {
                        gw[((b + i) * chans + c) * taps + t + j] += v;
                    }
                }
                b += 4;
            }
            while b < outs {
                let d = dot_grid([row(b)], xs);
                for (j, v) in d[0].into_iter().enumerate() {
                    gw[(b * chans + c) * taps + t + j] += v;
                }
                b += 1;
            }
            t += 3;
        }
        for (t, &off) in offs.iter().enumerate().skip(t) {
            let xs = &s[off..][..len];
            let mut b = 0;
            while b + 4 <= outs {
                let d = dot_n([row(b), row(b + 1), row(b + 2), row(b + 3)], xs);
                for (i, v) in d.into_iter().enumerate() {
                    gw[((b + i) * chans + c) * taps + t] += v;
                }
                b += 4;
            }
            while b < outs {
                gw[(b * chans + c) * taps + t] += dot(row(b), xs);
                b += 1;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// Same lane layout and summation order as the portable `dot_grid`.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn dot_grid_f32<const N: usize, const M: usize>(
        rows: [&[f32]; N],
        xs: [&[f32]; M],
        len: usize,
    ) -> [[f32; M]; N] {
        let body = len - len % 8;
        let mut acc = [[_mm256_setzero_ps(); M]; N];
        let mut k = 0;
        while k < body {
            let mut xv = [_mm256_setzero_ps(); M];
            for j in 0..M {
                xv[j] = _mm256_loadu_ps(xs[j].as_ptr().add(k));
            }
            for i in 0..N {
                let r = _mm256_loadu_ps(rows[i].as_ptr().add(k));
                for j in 0..M {
                    acc[i][j] = _mm256_add_ps(acc[i][j], _mm256_mul_ps(r, xv[j]));
                }
            }
            k += 8;
        }
        let mut out = [[0.0; M]; N];
        for i in 0..N {
            for j in 0..M {
                let mut lanes = [0f32; 8];
                _mm256_storeu_ps(lanes.as_mut_ptr(), acc[i][j]);
                let mut v = lanes.iter().copied().sum::<f32>();
                for q in body..len {
                    v += rows[i][q] * xs[j][q];
                }
                out[i][j] = v;
            }
        }
        out
    }
}

fn forward_frame<T: Scalar>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T], xpad: &mut [T], wide: &mut [T]) {
    pad_frame(g, x, xpad);
    let plane_o = g.ho * g.wo;
    if g.stride != 1 {
        for co in 0..g.c_out {
            let o = &mut out[co * plane_o..][..plane_o];
            o.fill(T::zero());
            for ci in 0..g.c_in {
                let xp = &xpad[ci * g.plane_p()..][..g.plane_p()];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[g.weight_index(co, ci, ky, kx)];
                        for oy in 0..g.ho {
                            let row = &xp[(oy * g.stride + ky) * g.wp + kx..];
                            for ox in 0..g.wo {
                                o[oy * g.wo + ox] += wv * row[ox * g.stride];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
        return;
    }

    let l = g.wide_len();
    let offs: Vec<usize> = (0..g.kh)
        .flat_map(|ky| (0..g.kw).map(move |kx| ky * g.wp + kx))
        .collect();
    tap_accumulate(wide, g.c_out, l, xpad, g.plane_p(), g.c_in, &offs, w);
    for co in 0..g.c_out {
        let a = &wide[co * l..][..l];
        let o = &mut out[co * plane_o..][..plane_o];
        for oy in 0..g.ho {
            let src = &a[oy * g.wp..][..g.wo];
            let dst = &mut o[oy * g.wo..][..g.wo];
            match bias {
                Some(bv) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bv[co]),
                None => dst.copy_from_slice(src),
            }
        }
    }
}

fn forward_batch<T: Scalar>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_frame()];
    out.par_chunks_mut(g.out_frame() * FRAME_CHUNK)
        .zip(x.par_chunks(g.in_frame() * FRAME_CHUNK))
        .for_each(|(oc, xc)| {
            let mut xpad = vec![T::zero(); g.c_in * g.plane_p()];
            let mut wide = vec![T::zero(); g.c_out * g.wide_len()];
            for (o, xf) in oc.chunks_mut(g.out_frame()).zip(xc.chunks(g.in_frame())) {
                forward_frame(g, xf, w, bias, o, &mut xpad, &mut wide);
            }
        });
    out
}

struct FrameGrads<T> {
    gx: Vec<T>,
    gw: Vec<T>,
    gb: Vec<T>,
}

/// Gradients for a chunk of frames. `gx` is only filled when `need_x`;
/// `w_t` is the weight with input and output channels swapped.
fn backward_chunk<T: Scalar>(g: &Geom, x: &[T], w: &[T], w_t: &[T], gout: &[T], need_x: bool, need_w: bool) -> FrameGrads<T> {
    let frames = gout.len() / g.out_frame();
    let plane_o = g.ho * g.wo;
    let mut res = FrameGrads {
        gx: if need_x { vec![T::zero(); frames * g.in_frame()] } else { Vec::new() },
        gw: vec![T::zero(); if need_w { w.len() } else { 0 }],
        gb: vec![T::zero(); g.c_out],
    };
    let mut xpad = vec![T::zero(); g.c_in * g.plane_p()];
    let mut gxpad = vec![T::zero(); g.c_in * g.plane_p()];
    let l = g.wide_len();
    let taps = g.kh * g.kw;
    // Output gradient in wide layout (scratch columns zero) behind `front`
    // zeros, so the input gradient becomes a forward-style tap sum.
    let front = (g.kh - 1) * g.wp + (g.kw - 1);
    let ext = front + g.plane_p();
    let mut gext = vec![T::zero(); g.c_out * ext];
    let offs: Vec<usize> = (0..taps).map(|t| (t / g.kw) * g.wp + t % g.kw).collect();
    let back_offs: Vec<usize> = offs.iter().map(|&o| front - o).collect();

    for f in 0..frames {
        let go = &gout[f * g.out_frame()..][..g.out_frame()];
        for co in 0..g.c_out {
            res.gb[co] += go[co * plane_o..][..plane_o].iter().copied().sum::<T>();
        }
        if need_w {
            pad_frame(g, &x[f * g.in_frame()..][..g.in_frame()], &mut xpad);
        }

        if g.stride == 1 {
            for co in 0..g.c_out {
                let e = &mut gext[co * ext + front..][..g.ho * g.wp];
                for oy in 0..g.ho {
                    e[oy * g.wp..][..g.wo].copy_from_slice(&go[co * plane_o + oy * g.wo..][..g.wo]);
                }
            }
            if need_w {
                tap_correlate(&mut res.gw, &gext[front..], ext, g.c_out, l, &xpad, g.plane_p(), g.c_in, &offs);
            }
            if need_x {
                tap_accumulate(&mut gxpad, g.c_in, g.plane_p(), &gext, ext, g.c_out, &back_offs, w_t);
            }
        } else {
            if need_x {
                gxpad.fill(T::zero());
            }
            for co in 0..g.c_out {
                let gs = &go[co * plane_o..][..plane_o];
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wi = g.weight_index(co, ci, ky, kx);
                            let mut acc = T::zero();
                            for oy in 0..g.ho {
                                for ox in 0..g.wo {
                                    let gv = gs[oy * g.wo + ox];
                                    let xi = ci * g.plane_p() + (oy * g.stride + ky) * g.wp + ox * g.stride + kx;
                                    if need_w {
                                        acc += gv * xpad[xi];
                                    }
                                    if need_x {
                                        gxpad[xi] += w[wi] * gv;
                                    }
                                }
                            }
                            if need_w {
                                res.gw[wi] += acc;
                            }
                        }
                    }
                }
            }
        }

        if need_x {
            let gx = &mut res.gx[f * g.in_frame()..][..g.in_frame()];
            for ci in 0..g.c_in {
                for y in 0..g.h {
                    gx[(ci * g.h + y) * g.w..][..g.w]
                        .copy_from_slice(&gxpad[ci * g.plane_p() + (y + g.pad) * g.wp + g.pad..][..g.w]);
                }
            }
        }
    }
    res
}

/// `conv2d(input[n,c_in,h,w], weight[c_out,c_in,kh,kw], bias[c_out])`.
pub fn conv2d<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, params: Conv2dParams) -> Result<Var<T>> {
    let g = Geom::new(x.shape(), w.shape(), params)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), g.c_out),
            ));
        }
    }
    let out = forward_batch(&g, x.data(), w.data(), bias.map(|b| b.data()));
    let value = Tensor::new(vec![g.n, g.c_out, g.ho, g.wo], out)?;
    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Var::from_op(value, inputs, move |ctx| {
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let (need_x, need_w) = (ctx.needs[0], ctx.needs[1]);
        let taps = g.kh * g.kw;
        let mut w_t = vec![T::zero(); w.len()];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                w_t[(ci * g.c_out + co) * taps..][..taps].copy_from_slice(&w[(co * g.c_in + ci) * taps..][..taps]);
            }
        }
        let parts: Vec<FrameGrads<T>> = ctx
            .grad
            .par_chunks(g.out_frame() * FRAME_CHUNK)
            .zip(x.par_chunks(g.in_frame() * FRAME_CHUNK))
            .map(|(go, xc)| backward_chunk(&g, xc, w, &w_t, go, need_x, need_w))
            .collect();
        let mut gx = Vec::with_capacity(if need_x { x.len() } else { 0 });
        let mut gw = vec![T::zero(); if need_w { w.len() } else { 0 }];
        let mut gb = vec![T::zero(); g.c_out];
        for p in parts {
            gx.extend_from_slice(&p.gx);
            gw.iter_mut().zip(&p.gw).for_each(|(a, &b)| *a += b);
            gb.iter_mut().zip(&p.gb).for_each(|(a, &b)| *a += b);
        }
        let mut grads = vec![need_x.then_some(gx), need_w.then_some(gw)];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then_some(gb));
        }
        grads
    }))
}
