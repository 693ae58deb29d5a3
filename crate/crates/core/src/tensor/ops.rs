use super::conv::output_extent;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Elementwise `max(x, slope * x)`.
pub fn leaky_relu<T: Scalar>(x: &Var<T>, slope: f64) -> Var<T> {
    let s = T::from_f64(slope);
    let value = x.value().map(|v| if v > T::zero() { v } else { s * v });
    Var::from_op(value, vec![x.clone()], move |ctx| {
        let x = ctx.inputs[0].data();
        let g = ctx
            .grad
            .iter()
            .zip(x)
            .map(|(&g, &v)| if v > T::zero() { g } else { s * g })
            .collect();
        vec![Some(g)]
    })
}

/// Windowed maximum over `[n, c, h, w]`. Gradients route to the first
/// (row-major) maximal element of each window.
pub fn max_pool2d<T: Scalar>(x: &Var<T>, k: usize, stride: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("max_pool2d", format!("expected [n,c,h,w], got {s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (Some(ho), Some(wo)) = (output_extent(h, k, stride, 0), output_extent(w, k, stride, 0)) else {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {k} with stride {stride} does not fit {s:?}"),
        ));
    };
    let xd = x.data();
    let n_out = planes * ho * wo;
    let mut out = vec![T::zero(); n_out];
    let mut argmax = vec![0usize; n_out];
    for (p, (orow, arow)) in out.chunks_exact_mut(ho * wo).zip(argmax.chunks_exact_mut(ho * wo)).enumerate() {
        let base = p * h * w;
        let plane = &xd[base..][..h * w];
        for oy in 0..ho {
            let (o, a) = (&mut orow[oy * wo..][..wo], &mut arow[oy * wo..][..wo]);
            let top = oy * stride * w;
            for ox in 0..wo {
                let start = top + ox * stride;
                let (mut best, mut bv) = (start, plane[start]);
                for ky in 0..k {
                    let r = &plane[start + ky * w..][..k];
                    for (kx, &v) in r.iter().enumerate() {
                        if v > bv {
                            bv = v;
                            best = start + ky * w + kx;
                        }
                    }
                }
                o[ox] = bv;
                a[ox] = base + best;
            }
        }
    }
    let value = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
    let n_in = x.value().numel();
    Ok(Var::from_op(value, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); n_in];
        for (&src, &go) in argmax.iter().zip(ctx.grad) {
            g[src] += go;
        }
        vec![Some(g)]
    }))
}

/// Affine map `x[n, d_in] -> x W^T + b`, with `W: [d_out, d_in]`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape(
            "linear",
            format!("input {xs:?} incompatible with weight {ws:?}"),
        ));
    }
    let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match output dim {d_out}", b.shape()),
            ));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * d_out];
    for r in 0..n {
        let xr = &xd[r * d_in..][..d_in];
        for o in 0..d_out {
            let wr = &wd[o * d_in..][..d_in];
            let mut acc = T::zero();
            for i in 0..d_in {
                acc += xr[i] * wr[i];
            }
            if let Some(b) = bias {
                acc += b.data()[o];
            }
            out[r * d_out + o] = acc;
        }
    }
    let value = Tensor::new(vec![n, d_out], out)?;
    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Var::from_op(value, inputs, move |ctx| {
        let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let mut gx = vec![T::zero(); n * d_in];
        let mut gw = vec![T::zero(); d_out * d_in];
        let mut gb = vec![T::zero(); d_out];
        for r in 0..n {
            for o in 0..d_out {
                let go = g[r * d_out + o];
                gb[o] += go;
                for i in 0..d_in {
                    gx[r * d_in + i] += go * wd[o * d_in + i];
                    gw[o * d_in + i] += go * xd[r * d_in + i];
                }
            }
        }
        let mut grads = vec![Some(gx), Some(gw)];
        if ctx.inputs.len() == 3 {
            grads.push(Some(gb));
        }
        grads
    }))
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let value = Tensor::new(a.shape().to_vec(), data)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], |ctx| {
        vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
    }))
}

pub fn scale<T: Scalar>(a: &Var<T>, factor: f64) -> Var<T> {
    let c = T::from_f64(factor);
    let value = a.value().map(|v| v * c);
    Var::from_op(value, vec![a.clone()], move |ctx| {
        vec![Some(ctx.grad.iter().map(|&g| g * c).collect())]
    })
}

pub fn sum_all<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = Tensor::scalar(a.data().iter().copied().sum());
    let n = a.value().numel();
    Var::from_op(value, vec![a.clone()], move |ctx| vec![Some(vec![ctx.grad[0]; n])])
}

pub fn mean_all<T: Scalar>(a: &Var<T>) -> Var<T> {
    let n = a.value().numel();
    scale(&sum_all(a), 1.0 / n as f64)
}

pub fn reshape<T: Scalar>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let value = a.value().clone().reshaped(shape.to_vec())?;
    Ok(Var::from_op(value, vec![a.clone()], |ctx| vec![Some(ctx.grad.to_vec())]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn leaf(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::leaf(Tensor::from_f64(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn leaky_relu_definition() {
        let x = leaf(&[3], &[1.0, -1.0, 0.0]);
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[1.0, -0.01, 0.0]);
        let g = backward(&sum_all(&y)).unwrap();
        assert_eq!(g.get(&x).unwrap()[1], 0.01);
    }

    #[test]
    fn max_pool_two_by_two() {
        let x = leaf(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_element() {
        let x = leaf(&[1, 1, 2, 2], &[7.0; 4]);
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let g = backward(&sum_all(&y)).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_halves_frame() {
        let x = Var::constant(Tensor::<f32>::zeros([2, 3, 64, 44]));
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().shape(), &[2, 3, 32, 22]);
    }

    #[test]
    fn linear_hand_matmul() {
        let x = leaf(&[1, 2], &[1., 2.]);
        let w = leaf(&[2, 2], &[1., 1., 1., -1.]);
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let x = leaf(&[2, 3], &[1., -2., 3., 4., 5., -6.]);
        let w = leaf(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = leaf(&[3], &[0.; 3]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), x.data());
    }

    #[test]
    fn linear_dimension_mismatch() {
        let x = leaf(&[1, 3], &[0.; 3]);
        let w = leaf(&[2, 2], &[0.; 4]);
        assert!(linear(&x, &w, None).is_err());
    }
}
