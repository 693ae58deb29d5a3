//! Sequence-level embedding head: temporal max pooling, horizontal strip
//! pooling (max + mean per strip) and one fully connected map per strip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Horizontal strips per feature map.
    pub strips: usize,
    pub embed_dim: usize,
    /// Adds per-strip identity classifiers for the cross-entropy term.
    pub include_classifier: bool,
    /// Training identities; only used with the classifier.
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            strips: 16,
            embed_dim: 256,
            include_classifier: true,
            num_classes: 0,
        }
    }
}

/// Max over the frames of each sequence: `[B*N, C, H, W] -> [B, C, H, W]`.
/// The gradient goes to the first frame attaining the maximum.
pub fn temporal_max_pool<T: Scalar>(x: &Var<T>, seq_len: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || seq_len == 0 || s[0] % seq_len != 0 {
        return Err(Error::shape(
            "temporal_max_pool",
            format!("{s:?} is not a stack of sequences of {seq_len} frames"),
        ));
    }
    let frame = s[1] * s[2] * s[3];
    let batch = s[0] / seq_len;
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * frame);
    let mut argmax = Vec::with_capacity(batch * frame);
    for b in 0..batch {
        let base = b * seq_len * frame;
        for i in 0..frame {
            let mut best = base + i;
            for t in 1..seq_len {
                let j = base + t * frame + i;
                if xd[j] > xd[best] {
                    best = j;
                }
            }
            out.push(xd[best]);
            argmax.push(best);
        }
    }
    let value = Tensor::new(vec![batch, s[1], s[2], s[3]], out)?;
    let n_in = xd.len();
    Ok(Var::from_op(value, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); n_in];
        for (&src, &go) in argmax.iter().zip(ctx.grad) {
            g[src] += go;
        }
        vec![Some(g)]
    }))
}

/// Splits `[B, C, H, W]` into `strips` horizontal bands and pools each band
/// to `max + mean` per channel, giving `[B, strips, C]`.
pub fn horizontal_pyramid_pool<T: Scalar>(x: &Var<T>, strips: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("horizontal_pyramid_pool", format!("expected [b,c,h,w], got {s:?}")));
    }
    let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
    if strips == 0 || h % strips != 0 {
        return Err(Error::shape(
            "horizontal_pyramid_pool",
            format!("height {h} is not divisible into {strips} strips"),
        ));
    }
    let rows = h / strips;
    let cells = rows * w;
    let inv = T::one() / T::from_usize(cells);
    let xd = x.data();
    let mut out = vec![T::zero(); batch * strips * c];
    let mut argmax = vec![0usize; batch * strips * c];
    for b in 0..batch {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for st in 0..strips {
                let band = &xd[plane + st * cells..][..cells];
                let mut best = 0;
                let mut sum = T::zero();
                for (i, &v) in band.iter().enumerate() {
                    if v > band[best] {
                        best = i;
                    }
                    sum += v;
                }
                let o = (b * strips + st) * c + ch;
                out[o] = band[best] + sum * inv;
                argmax[o] = plane + st * cells + best;
            }
        }
    }
    let value = Tensor::new(vec![batch, strips, c], out)?;
    let n_in = xd.len();
    Ok(Var::from_op(value, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); n_in];
        for b in 0..batch {
            for st in 0..strips {
                for ch in 0..c {
                    let o = (b * strips + st) * c + ch;
                    let go = ctx.grad[o];
                    let start = ((b * c + ch) * h * w) + st * cells;
                    let share = go * inv;
                    g[start..start + cells].iter_mut().for_each(|v| *v += share);
                    g[argmax[o]] += go;
                }
            }
        }
        vec![Some(g)]
    }))
}

/// Separate per-strip fully connected maps: `x[B, S, C]` with `w[S, D, C]`
/// gives `y[b, s, :] = w[s] x[b, s, :]`.
pub fn separate_fc<T: Scalar>(x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || xs[2] != ws[2] {
        return Err(Error::shape(
            "separate_fc",
            format!("input {xs:?} incompatible with per-strip weights {ws:?}"),
        ));
    }
    let (batch, strips, c, d) = (xs[0], xs[1], xs[2], ws[1]);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); batch * strips * d];
    for b in 0..batch {
        for s in 0..strips {
            let xr = &xd[(b * strips + s) * c..][..c];
            for o in 0..d {
                let wr = &wd[(s * d + o) * c..][..c];
                let mut acc = T::zero();
                for i in 0..c {
                    acc += wr[i] * xr[i];
                }
                out[(b * strips + s) * d + o] = acc;
            }
        }
    }
    let value = Tensor::new(vec![batch, strips, d], out)?;
    Ok(Var::from_op(value, vec![x.clone(), w.clone()], move |ctx| {
        let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let mut gx = vec![T::zero(); xd.len()];
        let mut gw = vec![T::zero(); wd.len()];
        for b in 0..batch {
            for s in 0..strips {
                let xo = (b * strips + s) * c;
                for o in 0..d {
                    let go = g[(b * strips + s) * d + o];
                    let wo = (s * d + o) * c;
                    for i in 0..c {
                        gx[xo + i] += go * wd[wo + i];
                        gw[wo + i] += go * xd[xo + i];
                    }
                }
            }
        }
        vec![Some(gx), Some(gw)]
    }))
}

/// Averages `[B, S, K]` over the strip axis to `[B, K]`.
pub fn mean_over_strips<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("mean_over_strips", format!("expected [b,s,k], got {s:?}")));
    }
    let (batch, strips, k) = (s[0], s[1], s[2]);
    let inv = T::one() / T::from_usize(strips);
    let xd = x.data();
    let mut out = vec![T::zero(); batch * k];
    for b in 0..batch {
        for st in 0..strips {
            for j in 0..k {
                out[b * k + j] += xd[(b * strips + st) * k + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    let value = Tensor::new(vec![batch, k], out)?;
    Ok(Var::from_op(value, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); batch * strips * k];
        for b in 0..batch {
            for st in 0..strips {
                for j in 0..k {
                    g[(b * strips + st) * k + j] = ctx.grad[b * k + j] * inv;
                }
            }
        }
        vec![Some(g)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::constant(Tensor::from_f64(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn temporal_pool_single_frame_is_identity() {
        let x = constant(&[1, 2, 1, 2], &[1., -2., 3., 4.]);
        let y = temporal_max_pool(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 2]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn temporal_pool_takes_elementwise_max() {
        let x = constant(&[2, 1, 1, 3], &[1., 5., -1., 4., 2., -3.]);
        let y = temporal_max_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[4., 5., -1.]);
    }

    #[test]
    fn constant_map_pools_to_twice_value() {
        let x = constant(&[1, 3, 8, 4], &[0.75; 96]);
        let y = horizontal_pyramid_pool(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_strip_is_global_max_plus_mean() {
        let x = constant(&[1, 1, 2, 2], &[1., 2., 3., 6.]);
        let y = horizontal_pyramid_pool(&x, 1).unwrap();
        assert_eq!(y.data(), &[6.0 + 3.0]);
    }

    #[test]
    fn indivisible_height_is_rejected() {
        let x = constant(&[1, 1, 6, 2], &[0.; 12]);
        assert!(horizontal_pyramid_pool(&x, 4).is_err());
    }

    #[test]
    fn identity_projection_returns_pooled_strips() {
        let x = constant(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let mut eye = vec![0.0; 2 * 3 * 3];
        for s in 0..2 {
            for i in 0..3 {
                eye[(s * 3 + i) * 3 + i] = 1.0;
            }
        }
        let w = constant(&[2, 3, 3], &eye);
        assert_eq!(separate_fc(&x, &w).unwrap().data(), x.data());
    }

    #[test]
    fn zeroed_strip_weights_zero_only_that_row() {
        let x = constant(&[1, 3, 2], &[1., 2., 3., 4., 5., 6.]);
        let mut wv = vec![1.0; 3 * 2 * 2];
        wv[4..8].fill(0.0); // strip 1
        let w = constant(&[3, 2, 2], &wv);
        let y = separate_fc(&x, &w).unwrap();
        assert_eq!(y.data(), &[3., 3., 0., 0., 11., 11.]);
    }
}
