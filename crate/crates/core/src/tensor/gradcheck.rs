use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element `i`.
pub fn finite_diff_grad<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let mut probe = x.clone();
    let e = T::from_f64(eps);
    let two_e = T::from_f64(2.0 * eps);
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + e;
        let up = f(&probe);
        probe.data_mut()[i] = orig - e;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_e);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired elements.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
