//! Per-channel batch normalization.

use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics kept for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        RunningStats {
            mean: Tensor::zeros(s),
            var: Tensor::full(s, T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Everything the train-mode backward pass needs.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Real> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_affine<T: Real>(x: Shape, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    contract!(
        gamma.numel() == x.c && beta.numel() == x.c,
        "batch norm parameters have {} / {} entries for {} channels",
        gamma.numel(),
        beta.numel(),
        x.c
    );
    contract!(
        x.n * x.h * x.w > 0,
        "batch norm over an empty batch {x}"
    );
    Ok(())
}

/// Normalizes with batch statistics and returns the updated running stats.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    eps: T,
    momentum: T,
) -> Result<(Tensor<T>, BatchNormCache<T>, RunningStats<T>)> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    let m = s.n * s.plane();
    let mf = T::of(m as f64);
    let mut y = Tensor::zeros(s);
    let mut x_hat = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.c];
    let mut next = running.clone();
    for c in 0..s.c {
        let mut sum = T::zero();
        for n in 0..s.n {
            sum += x.plane(n, c).iter().copied().sum::<T>();
        }
        let mean = sum / mf;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / mf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        let plane = s.plane();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                let h = (x.data()[i] - mean) * istd;
                x_hat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
        let unbiased = if m > 1 { sq / T::of((m - 1) as f64) } else { var };
        let one = T::one();
        next.mean.data_mut()[c] = (one - momentum) * running.mean.data()[c] + momentum * mean;
        next.var.data_mut()[c] = (one - momentum) * running.var.data()[c] + momentum * unbiased;
    }
    Ok((y, BatchNormCache { x_hat, inv_std }, next))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batch_norm_train`].
pub fn batch_norm_train_grad<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let mf = T::of((s.n * plane) as f64);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for c in 0..s.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * cache.x_hat.data()[i];
            }
        }
        dgamma.data_mut()[c] = sum_dy_xhat;
        dbeta.data_mut()[c] = sum_dy;
        let k = gamma.data()[c] * cache.inv_std[c] / mf;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                dx.data_mut()[i] =
                    k * (mf * dy.data()[i] - sum_dy - cache.x_hat.data()[i] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-channel `scale·x + shift`; eval-mode batch norm reduces to this.
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        chunk.iter_mut().for_each(|v| *v = scale[c] * *v + shift[c]);
    }
    y
}

/// `(scale, shift)` of eval-mode batch norm.
pub fn eval_affine<T: Real>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let c = gamma.numel();
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for i in 0..c {
        let istd = T::one() / (running.var.data()[i] + eps).sqrt();
        scale.push(gamma.data()[i] * istd);
        shift.push(beta.data()[i] - gamma.data()[i] * istd * running.mean.data()[i]);
    }
    (scale, shift)
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_affine(x.shape(), gamma, beta)?;
    let (scale, shift) = eval_affine(gamma, beta, running, eps);
    Ok(channel_affine(x, &scale, &shift))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        Tensor::from_fn(Shape::new(3, 2, 4, 5), |[n, c, y, x]| {
            ((n * 7 + c * 13 + y * 3 + x * 11) % 17) as f64 * 0.3 - 2.0 + c as f64
        })
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = sample();
        let g = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let (y, _, _) = batch_norm_train(&x, &g, &b, &RunningStats::new(2), 1e-5, 0.1).unwrap();
        let s = y.shape();
        for c in 0..2 {
            let vals: Vec<f64> = (0..s.n).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn eval_mode_with_unit_stats_is_affine() {
        let x = sample();
        let g = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![2.0, -0.5]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.25, 1.0]).unwrap();
        let y = batch_norm_eval(&x, &g, &b, &RunningStats::new(2), 0.0).unwrap();
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            let c = (i / 20) % 2;
            assert!((yv - (g.data()[c] * xv + b.data()[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 3, 3), 4.2);
        let g = Tensor::full(Shape::new(1, 1, 1, 1), 3.0);
        let b = Tensor::full(Shape::new(1, 1, 1, 1), 0.7);
        let (y, _, _) = batch_norm_train(&x, &g, &b, &RunningStats::new(1), 1e-5, 0.1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(0, 2, 4, 4));
        let g = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert!(batch_norm_train(&x, &g, &b, &RunningStats::new(2), 1e-5, 0.1).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let x = sample();
        let g = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let (_, _, next) = batch_norm_train(&x, &g, &b, &RunningStats::new(2), 1e-5, 0.1).unwrap();
        let batch_mean: f64 = (0..3).flat_map(|n| x.plane(n, 1).to_vec()).sum::<f64>() / 60.0;
        assert!((next.mean.data()[1] - 0.1 * batch_mean).abs() < 1e-12);
    }
}
