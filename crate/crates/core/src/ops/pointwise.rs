use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Derivative is taken as 1 at exactly zero.
pub fn leaky_relu_grad<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v >= T::zero() { g } else { slope * g })
        .expect("same shape")
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Branch on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Uses the forward output `y = sigmoid(x)`.
pub fn sigmoid_grad<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |s, g| g * s * (T::one() - s)).expect("same shape")
}

pub fn add<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(y, |a, b| a + b)
}

pub fn sub<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(y, |a, b| a - b)
}

pub fn mul<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(y, |a, b| a * b)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    contract!(!xs.is_empty(), "concat of zero tensors");
    let s0 = xs[0].shape();
    let mut c = 0;
    for t in xs {
        let s = t.shape();
        contract!(
            s.n == s0.n && s.h == s0.h && s.w == s0.w,
            "concat mismatch: {} vs {} (batch and spatial dims must agree)",
            s,
            s0
        );
        c += s.c;
    }
    let plane = s0.plane();
    let mut data = Vec::with_capacity(s0.n * c * plane);
    for n in 0..s0.n {
        for t in xs {
            let per = t.shape().c * plane;
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(Shape::new(s0.n, c, s0.h, s0.w), data)
}

/// Splits a channel-concatenated tensor back into parts of the given widths.
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    contract!(
        widths.iter().sum::<usize>() == s.c,
        "split widths {:?} do not sum to {} channels",
        widths,
        s.c
    );
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(s.n * w * plane)).collect();
    for n in 0..s.n {
        let mut c0 = 0;
        for (part, &w) in parts.iter_mut().zip(widths) {
            let start = (n * s.c + c0) * plane;
            part.extend_from_slice(&x.data()[start..start + w * plane]);
            c0 += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::from_vec(Shape::new(s.n, w, s.h, s.w), d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_limits() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(40.0f64) - 1.0).abs() < 1e-12);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!(sigmoid_scalar(800.0f32).is_finite());
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = Tensor::<f32>::from_fn(Shape::new(2, 2, 4, 4), |[n, c, y, x]| (n + c + y * x) as f32);
        let b = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 4), |[n, c, y, x]| (n * c + y + x) as f32);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 5, 4, 4));
        let parts = split_channels(&cat, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 2));
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
