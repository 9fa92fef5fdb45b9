//! Single-level orthonormal 2-D Haar analysis and synthesis over feature maps.
//!
//! For every 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2   (vertical detail)
//! HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2   (horizontal / diagonal)
//! ```
//!
//! The transform matrix is symmetric and orthogonal, so synthesis uses the
//! same sign patterns and the same factor of one half.

use crate::error::{ensure, Result};
use crate::tensor::{Band, Float, Tensor};

/// The four half-resolution sub-bands of one analysis level.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T> {
    pub ll: Tensor<T>,
    pub hl: Tensor<T>,
    pub lh: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Float> WaveletBands<T> {
    pub fn band(&self, band: Band) -> &Tensor<T> {
        match band {
            Band::LL => &self.ll,
            Band::HL => &self.hl,
            Band::LH => &self.lh,
            Band::HH => &self.hh,
        }
    }

    pub fn energy(&self) -> f64 {
        self.ll.sum_squares() + self.hl.sum_squares() + self.lh.sum_squares() + self.hh.sum_squares()
    }
}

/// Sign applied to `a, b, c, d` of a block for each band.
pub(crate) fn signs(band: Band) -> [f64; 4] {
    match band {
        Band::LL => [1.0, 1.0, 1.0, 1.0],
        Band::LH => [1.0, 1.0, -1.0, -1.0],
        Band::HL => [1.0, -1.0, 1.0, -1.0],
        Band::HH => [1.0, -1.0, -1.0, 1.0],
    }
}

pub(crate) fn check_even(shape: &[usize]) -> Result<()> {
    ensure!(
        shape.len() == 4,
        "wavelet analysis needs a rank-4 feature map, got {shape:?}"
    );
    ensure!(
        shape[2].is_multiple_of(2) && shape[3].is_multiple_of(2),
        "wavelet analysis needs even spatial extents, got {}x{}",
        shape[2],
        shape[3]
    );
    Ok(())
}

/// One band of the analysis transform on a flat `planes × h × w` buffer.
pub(crate) fn analysis_band<T: Float>(x: &[T], planes: usize, h: usize, w: usize, band: Band) -> Vec<T> {
    let s = signs(band).map(T::from_f64);
    let half = T::from_f64(0.5);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let top = &src[2 * i * w..(2 * i + 1) * w];
            let bot = &src[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                let (a, b) = (top[2 * j], top[2 * j + 1]);
                let (c, d) = (bot[2 * j], bot[2 * j + 1]);
                out.push((s[0] * a + s[1] * b + s[2] * c + s[3] * d) * half);
            }
        }
    }
    out
}

/// Adjoint of [`analysis_band`]: scatter-add band coefficients onto the source grid.
pub(crate) fn synthesis_band_add<T: Float>(coef: &[T], planes: usize, h: usize, w: usize, band: Band, dst: &mut [T]) {
    let s = signs(band).map(T::from_f64);
    let half = T::from_f64(0.5);
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let plane = &mut dst[p * h * w..(p + 1) * h * w];
        let src = &coef[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let v = src[i * ow + j] * half;
                plane[2 * i * w + 2 * j] += s[0] * v;
                plane[2 * i * w + 2 * j + 1] += s[1] * v;
                plane[(2 * i + 1) * w + 2 * j] += s[2] * v;
                plane[(2 * i + 1) * w + 2 * j + 1] += s[3] * v;
            }
        }
    }
}

/// Single-level Haar analysis. Odd spatial extents are rejected, never padded.
pub fn dwt2<T: Float>(x: &Tensor<T>) -> Result<WaveletBands<T>> {
    check_even(x.shape())?;
    let (b, c, h, w) = x.dims4()?;
    let half = [b, c, h / 2, w / 2];
    let make = |band| Tensor::from_parts(half.to_vec(), analysis_band(x.data(), b * c, h, w, band));
    Ok(WaveletBands {
        ll: make(Band::LL),
        hl: make(Band::HL),
        lh: make(Band::LH),
        hh: make(Band::HH),
    })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2<T: Float>(bands: &WaveletBands<T>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape();
    for (name, t) in [("HL", &bands.hl), ("LH", &bands.lh), ("HH", &bands.hh)] {
        ensure!(
            t.shape() == shape,
            "band {name} has shape {:?}, LL has {:?}",
            t.shape(),
            shape
        );
    }
    let (b, c, h, w) = bands.ll.dims4()?;
    let (fh, fw) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * fh * fw];
    for band in Band::ALL {
        synthesis_band_add(bands.band(band).data(), b * c, fh, fw, band, &mut out);
    }
    Ok(Tensor::from_parts(vec![b, c, fh, fw], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(v: [f64; 4]) -> Tensor<f64> {
        Tensor::new(&[1, 1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_block_is_pure_low_frequency() {
        let b = dwt2(&block([1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(b.ll.data(), &[2.0]);
        assert_eq!(b.hl.data(), &[0.0]);
        assert_eq!(b.lh.data(), &[0.0]);
        assert_eq!(b.hh.data(), &[0.0]);
    }

    #[test]
    fn horizontal_alternation_lands_in_hl() {
        let b = dwt2(&block([1.0, -1.0, 1.0, -1.0])).unwrap();
        assert_eq!(b.hl.data(), &[2.0]);
        assert_eq!(b.ll.data(), &[0.0]);
        assert_eq!(b.lh.data(), &[0.0]);
        assert_eq!(b.hh.data(), &[0.0]);
    }

    #[test]
    fn vertical_alternation_lands_in_lh() {
        let b = dwt2(&block([1.0, 1.0, -1.0, -1.0])).unwrap();
        assert_eq!(b.lh.data(), &[2.0]);
        assert_eq!(b.hl.data(), &[0.0]);
    }

    #[test]
    fn synthesis_of_lone_ll() {
        let z = Tensor::zeros(&[1, 1, 1, 1]);
        let bands = WaveletBands {
            ll: Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap(),
            hl: z.clone(),
            lh: z.clone(),
            hh: z,
        };
        assert_eq!(idwt2(&bands).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_bands_give_zero_map() {
        let z = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let bands = WaveletBands {
            ll: z.clone(),
            hl: z.clone(),
            lh: z.clone(),
            hh: z,
        };
        assert!(idwt2(&bands).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(dwt2(&x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mismatched_bands_are_rejected() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let bands = WaveletBands {
            ll: z.clone(),
            hl: z.clone(),
            lh: Tensor::zeros(&[1, 1, 2, 4]),
            hh: z,
        };
        assert!(idwt2(&bands).is_err());
    }

    #[test]
    fn round_trip_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[1, 3, 8, 8], 1.0, &mut rng);
        let back = idwt2(&dwt2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);

        let mk = |rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(&[2, 2, 3, 5], 1.0, rng);
        let bands = WaveletBands {
            ll: mk(&mut rng),
            hl: mk(&mut rng),
            lh: mk(&mut rng),
            hh: mk(&mut rng),
        };
        let again = dwt2(&idwt2(&bands).unwrap()).unwrap();
        for band in Band::ALL {
            assert!(again.band(band).max_abs_diff(bands.band(band)) < 1e-12);
        }
    }

    #[test]
    fn constant_maps_have_no_detail() {
        let x = Tensor::<f32>::full(&[2, 3, 6, 10], 0.37);
        let b = dwt2(&x).unwrap();
        for band in [Band::HL, Band::LH, Band::HH] {
            assert!(b.band(band).data().iter().all(|&v| v == 0.0));
        }
    }
}
