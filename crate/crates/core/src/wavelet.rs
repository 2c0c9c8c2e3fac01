//! Single-level orthonormal 2-D Haar transform.
//!
//! Filters are `low = [1, 1]/√2` and `high = [1, -1]/√2`. For a 2×2 block
//! `[[a, b], [c, d]]`:
//!
//! | band | value            | meaning                                   |
//! |------|------------------|-------------------------------------------|
//! | LL   | (a + b + c + d)/2 | low-pass in both directions              |
//! | HL   | (a − b + c − d)/2 | high along width, low along height        |
//! | LH   | (a + b − c − d)/2 | low along width, high along height        |
//! | HH   | (a − b − c + d)/2 | diagonal detail                           |
//!
//! The analysis matrix is symmetric and orthogonal, so the inverse applies
//! the same sign patterns.

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Ll, Band::Lh, Band::Hl, Band::Hh];

    /// Signs applied to `[a, b, c, d]` (top-left, top-right, bottom-left, bottom-right).
    const fn signs(self) -> [i8; 4] {
        match self {
            Band::Ll => [1, 1, 1, 1],
            Band::Hl => [1, -1, 1, -1],
            Band::Lh => [1, 1, -1, -1],
            Band::Hh => [1, -1, -1, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Ll => "ll",
            Band::Lh => "lh",
            Band::Hl => "hl",
            Band::Hh => "hh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subbands<T> {
    pub ll: T,
    pub lh: T,
    pub hl: T,
    pub hh: T,
}

impl<T> Subbands<T> {
    pub fn get(&self, band: Band) -> &T {
        match band {
            Band::Ll => &self.ll,
            Band::Lh => &self.lh,
            Band::Hl => &self.hl,
            Band::Hh => &self.hh,
        }
    }

    pub fn try_map<U, E>(self, mut f: impl FnMut(Band, T) -> Result<U, E>) -> Result<Subbands<U>, E> {
        Ok(Subbands {
            ll: f(Band::Ll, self.ll)?,
            lh: f(Band::Lh, self.lh)?,
            hl: f(Band::Hl, self.hl)?,
            hh: f(Band::Hh, self.hh)?,
        })
    }
}

fn check_even(s: Shape) -> Result<()> {
    contract!(
        s.h % 2 == 0 && s.w % 2 == 0,
        "Haar transform needs even height and width, got {s}"
    );
    Ok(())
}

/// One analysis band of the input.
pub fn dwt_band<T: Real>(x: &Tensor<T>, band: Band) -> Result<Tensor<T>> {
    let s = x.shape();
    check_even(s)?;
    let [sa, sb, sc, sd] = band.signs().map(|v| T::of(v as f64 * 0.5));
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.numel());
    for nc in 0..s.n * s.c {
        let p = &x.data()[nc * s.plane()..][..s.plane()];
        for y in 0..os.h {
            let r0 = &p[2 * y * s.w..][..s.w];
            let r1 = &p[(2 * y + 1) * s.w..][..s.w];
            for xx in 0..os.w {
                out.push(sa * r0[2 * xx] + sb * r0[2 * xx + 1] + sc * r1[2 * xx] + sd * r1[2 * xx + 1]);
            }
        }
    }
    Tensor::from_vec(os, out)
}

/// Adjoint (and inverse) of [`dwt_band`]: spreads one band back to full
/// resolution.
fn synth_band_into<T: Real>(out: &mut Tensor<T>, band_t: &Tensor<T>, band: Band) {
    let s = out.shape();
    let bs = band_t.shape();
    let [sa, sb, sc, sd] = band.signs().map(|v| T::of(v as f64 * 0.5));
    for nc in 0..s.n * s.c {
        let b = &band_t.data()[nc * bs.plane()..][..bs.plane()];
        let p = &mut out.data_mut()[nc * s.plane()..][..s.plane()];
        for y in 0..bs.h {
            for xx in 0..bs.w {
                let v = b[y * bs.w + xx];
                p[2 * y * s.w + 2 * xx] += sa * v;
                p[2 * y * s.w + 2 * xx + 1] += sb * v;
                p[(2 * y + 1) * s.w + 2 * xx] += sc * v;
                p[(2 * y + 1) * s.w + 2 * xx + 1] += sd * v;
            }
        }
    }
}

pub fn haar_dwt2<T: Real>(x: &Tensor<T>) -> Result<Subbands<Tensor<T>>> {
    Ok(Subbands {
        ll: dwt_band(x, Band::Ll)?,
        lh: dwt_band(x, Band::Lh)?,
        hl: dwt_band(x, Band::Hl)?,
        hh: dwt_band(x, Band::Hh)?,
    })
}

pub fn haar_idwt2<T: Real>(s: &Subbands<Tensor<T>>) -> Result<Tensor<T>> {
    let bs = s.ll.shape();
    for band in [&s.lh, &s.hl, &s.hh] {
        contract!(
            band.shape() == bs,
            "sub-band shape mismatch: {} vs LL {}",
            band.shape(),
            bs
        );
    }
    let mut out = Tensor::zeros(Shape::new(bs.n, bs.c, bs.h * 2, bs.w * 2));
    for band in Band::ALL {
        synth_band_into(&mut out, s.get(band), band);
    }
    Ok(out)
}

/// Differentiable analysis: one recorded op per band.
pub fn dwt_var<'t, T: Real>(x: &Var<'t, T>) -> Result<Subbands<Var<'t, T>>> {
    let tape: &'t Tape<T> = x.tape();
    let one = |band: Band| -> Result<Var<'t, T>> {
        let v = dwt_band(x.value(), band)?;
        let full = x.shape();
        Ok(tape.record(&[x], v, move || {
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(full);
                synth_band_into(&mut dx, g, band);
                vec![Some(dx)]
            })
        }))
    };
    Ok(Subbands {
        ll: one(Band::Ll)?,
        lh: one(Band::Lh)?,
        hl: one(Band::Hl)?,
        hh: one(Band::Hh)?,
    })
}

/// Differentiable synthesis.
pub fn idwt_var<'t, T: Real>(s: &Subbands<Var<'t, T>>) -> Result<Var<'t, T>> {
    let values = Subbands {
        ll: s.ll.value().clone(),
        lh: s.lh.value().clone(),
        hl: s.hl.value().clone(),
        hh: s.hh.value().clone(),
    };
    let y = haar_idwt2(&values)?;
    let inputs = [&s.ll, &s.lh, &s.hl, &s.hh];
    Ok(s.ll.tape().record(&inputs, y, || {
        Box::new(|g, need| {
            Band::ALL
                .iter()
                .zip(need)
                .map(|(&band, &n)| if n { Some(dwt_band(g, band).expect("even")) } else { None })
                .collect()
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_block() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = haar_dwt2(&x).unwrap();
        assert_eq!(s.ll.data(), &[5.0]);
        assert_eq!(s.hl.data(), &[-1.0]);
        assert_eq!(s.lh.data(), &[-2.0]);
        assert_eq!(s.hh.data(), &[0.0]);
    }

    #[test]
    fn constant_image() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 4, 6), 1.5);
        let s = haar_dwt2(&x).unwrap();
        assert!(s.ll.data().iter().all(|&v| v == 3.0));
        for b in [&s.lh, &s.hl, &s.hh] {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        let back = haar_idwt2(&s).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn zero_bands_give_zero_image() {
        let z = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let s = Subbands { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z };
        assert!(haar_idwt2(&s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(haar_dwt2(&Tensor::<f32>::zeros(Shape::new(1, 1, 4, 5))).is_err());
    }

    #[test]
    fn mismatched_bands_rejected() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 3));
        let s = Subbands { ll: a.clone(), lh: a.clone(), hl: b, hh: a };
        assert!(haar_idwt2(&s).is_err());
    }

    #[test]
    fn horizontal_edge_lands_in_hl() {
        // Columns alternate: variation along the width only.
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |[_, _, _, x]| (x % 2) as f64);
        let s = haar_dwt2(&x).unwrap();
        assert!(s.hl.data().iter().all(|&v| v == -1.0));
        assert!(s.lh.data().iter().all(|&v| v == 0.0));
    }
}
