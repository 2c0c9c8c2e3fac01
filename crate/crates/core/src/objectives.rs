//! Training objective: multi-scale L1 content loss plus an L1 penalty on the
//! difference of 2-D Fourier spectra, both normalized per scale by element
//! count.

use crate::autodiff::{self, Var};
use crate::error::{contract, Result};
use crate::ops::fft2;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// How the spectral L1 norm treats each complex bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpectralNorm {
    /// `|Δre| + |Δim|`.
    #[default]
    ReIm,
    /// `sqrt(Δre² + Δim²)`.
    Magnitude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_cont: f64,
    pub l_msfr: f64,
    pub l_total: f64,
    pub lambda: f64,
    /// `(content, spectral)` contribution of each scale, finest first.
    pub per_scale: Vec<(f64, f64)>,
}

fn check_pairs<T: Real>(preds: &[Var<'_, T>], targets: &[Tensor<T>]) -> Result<()> {
    contract!(
        preds.len() == targets.len() && !preds.is_empty(),
        "{} predictions for {} targets",
        preds.len(),
        targets.len()
    );
    for (k, (p, t)) in preds.iter().zip(targets).enumerate() {
        contract!(
            p.shape() == t.shape(),
            "scale {} prediction {} does not match target {}",
            k + 1,
            p.shape(),
            t.shape()
        );
    }
    Ok(())
}

fn scale_content<'t, T: Real>(pred: &Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let tk = T::of(target.numel() as f64);
    let diff = autodiff::sub(pred, &pred.tape().constant(target.clone()))?;
    Ok(autodiff::scale(&autodiff::sum(&autodiff::abs(&diff)), T::one() / tk))
}

/// `|d|` of a complex difference given its parts, with zero subgradient at 0.
fn complex_abs<'t, T: Real>(re: &Var<'t, T>, im: &Var<'t, T>) -> Result<Var<'t, T>> {
    let mag = re.value().zip_map(im.value(), |a, b| a.hypot(b))?;
    let (rv, iv, mv) = (re.value().clone(), im.value().clone(), mag.clone());
    Ok(re.tape().record(&[re, im], mag, move || {
        Box::new(move |g, need| {
            let part = |p: &Tensor<T>| {
                let ratio = p.zip_map(&mv, |a, m| if m > T::zero() { a / m } else { T::zero() }).expect("same shape");
                ratio.zip_map(g, |r, gv| r * gv).expect("same shape")
            };
            vec![need[0].then(|| part(&rv)), need[1].then(|| part(&iv))]
        })
    }))
}

fn scale_spectral<'t, T: Real>(pred: &Var<'t, T>, target: &Tensor<T>, norm: SpectralNorm) -> Result<Var<'t, T>> {
    let tk = T::of(target.numel() as f64);
    // The transform is linear, so F(I) - F(S) = F(I - S).
    let diff = autodiff::sub(pred, &pred.tape().constant(target.clone()))?;
    let re = autodiff::fft2_re(&diff);
    let im = autodiff::fft2_im(&diff);
    let total = match norm {
        SpectralNorm::ReIm => autodiff::add(
            &autodiff::sum(&autodiff::abs(&re)),
            &autodiff::sum(&autodiff::abs(&im)),
        )?,
        SpectralNorm::Magnitude => autodiff::sum(&complex_abs(&re, &im)?),
    };
    Ok(autodiff::scale(&total, T::one() / tk))
}

fn sum_vars<'t, T: Real>(vs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut acc = vs[0].clone();
    for v in &vs[1..] {
        acc = autodiff::add(&acc, v)?;
    }
    Ok(acc)
}

/// `Σ_k ‖I_k - S_k‖₁ / t_k`.
pub fn content_loss<'t, T: Real>(preds: &[Var<'t, T>], targets: &[Tensor<T>]) -> Result<Var<'t, T>> {
    check_pairs(preds, targets)?;
    let terms = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| scale_content(p, t))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(&terms)
}

/// `Σ_k ‖F(I_k) - F(S_k)‖₁ / t_k`.
pub fn msfr_loss<'t, T: Real>(preds: &[Var<'t, T>], targets: &[Tensor<T>], norm: SpectralNorm) -> Result<Var<'t, T>> {
    check_pairs(preds, targets)?;
    let terms = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| scale_spectral(p, t, norm))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(&terms)
}

/// The total loss var together with its scalar breakdown.
pub fn total_loss<'t, T: Real>(
    preds: &[Var<'t, T>],
    targets: &[Tensor<T>],
    lambda: f64,
    norm: SpectralNorm,
) -> Result<(Var<'t, T>, LossReport)> {
    contract!(lambda >= 0.0 && lambda.is_finite(), "lambda must be non-negative, got {lambda}");
    check_pairs(preds, targets)?;
    let mut cont = Vec::new();
    let mut spec = Vec::new();
    for (p, t) in preds.iter().zip(targets) {
        cont.push(scale_content(p, t)?);
        spec.push(scale_spectral(p, t, norm)?);
    }
    let l_cont = sum_vars(&cont)?;
    let l_msfr = sum_vars(&spec)?;
    let total = autodiff::add(&l_cont, &autodiff::scale(&l_msfr, T::of(lambda)))?;
    let report = LossReport {
        l_cont: l_cont.item().f64(),
        l_msfr: l_msfr.item().f64(),
        l_total: total.item().f64(),
        lambda,
        per_scale: cont.iter().zip(&spec).map(|(c, s)| (c.item().f64(), s.item().f64())).collect(),
    };
    Ok((total, report))
}

/// Spectral L1 of one scale computed directly on tensors (no tape).
pub fn spectral_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, norm: SpectralNorm) -> Result<f64> {
    let diff = pred.zip_map(target, |a, b| a - b)?;
    let (re, im) = fft2(&diff);
    let sum: f64 = re
        .data()
        .iter()
        .zip(im.data())
        .map(|(&r, &i)| match norm {
            SpectralNorm::ReIm => r.abs().f64() + i.abs().f64(),
            SpectralNorm::Magnitude => r.f64().hypot(i.f64()),
        })
        .sum();
    Ok(sum / target.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Shape;

    fn pyramid(v: f64) -> Vec<Tensor<f64>> {
        [8, 4, 2]
            .iter()
            .map(|&s| Tensor::from_fn(Shape::new(1, 3, s, s), |[_, c, y, x]| v + (c + y * s + x) as f64 * 0.01))
            .collect()
    }

    #[test]
    fn equal_inputs_give_zero() {
        let tape = Tape::<f64>::new();
        let t = pyramid(0.3);
        let preds: Vec<_> = t.iter().map(|x| tape.param(x.clone())).collect();
        let (_, r) = total_loss(&preds, &t, DEFAULT_LAMBDA, SpectralNorm::ReIm).unwrap();
        assert_eq!(r.l_total, 0.0);
        assert_eq!(r.l_cont, 0.0);
        assert_eq!(r.l_msfr, 0.0);
    }

    #[test]
    fn single_scale_content_value() {
        let tape = Tape::<f64>::new();
        let target = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let pred = tape.param(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 2.0, 0.0]).unwrap());
        let l = content_loss(&[pred], &[target]).unwrap();
        assert_eq!(l.item(), 1.0);
    }

    #[test]
    fn lambda_zero_is_content_only() {
        let tape = Tape::<f64>::new();
        let t = pyramid(0.3);
        let preds: Vec<_> = pyramid(0.5).into_iter().map(|x| tape.param(x)).collect();
        let (_, r) = total_loss(&preds, &t, 0.0, SpectralNorm::ReIm).unwrap();
        assert_eq!(r.l_total, r.l_cont);
        assert!(r.l_msfr > 0.0);
    }

    #[test]
    fn total_is_content_plus_weighted_spectral() {
        let tape = Tape::<f64>::new();
        let t = pyramid(0.3);
        let preds: Vec<_> = pyramid(0.45).into_iter().map(|x| tape.param(x)).collect();
        let (v, r) = total_loss(&preds, &t, 0.1, SpectralNorm::ReIm).unwrap();
        assert_eq!(r.l_total, r.l_cont + 0.1 * r.l_msfr);
        assert_eq!(v.item(), r.l_total);
        assert_eq!(r.per_scale.len(), 3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tape = Tape::<f32>::new();
        let p = tape.param(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        assert!(content_loss(&[p], &[Tensor::zeros(Shape::new(1, 3, 4, 2))]).is_err());
    }

    #[test]
    fn magnitude_norm_is_bounded_by_reim() {
        let t = pyramid(0.1);
        let p = pyramid(0.4);
        let a = spectral_l1(&p[0], &t[0], SpectralNorm::Magnitude).unwrap();
        let b = spectral_l1(&p[0], &t[0], SpectralNorm::ReIm).unwrap();
        assert!(a <= b + 1e-12);
    }
}
