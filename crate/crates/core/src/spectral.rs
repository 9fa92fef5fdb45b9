//! Direct discrete Fourier transform over the leading axis of a real matrix.
//!
//! Forward is unnormalised, `X[k] = Σ_n x[n]·e^(−2πi·kn/N)`; the inverse
//! carries the `1/N`. Evaluation is the O(N²) sum, which is plenty for the
//! short sequences it is used on.

use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Complex `N×C` spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor<f64>,
    pub im: Tensor<f64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[1]
    }
}

fn twiddles(n: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|m| {
            let a = sign * 2.0 * PI * m as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip()
}

fn as_matrix(t: &Tensor<f64>) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((*n, 1)),
        [n, c] => Ok((*n, *c)),
        other => Err(crate::Error::contract(format!(
            "expected an N×C matrix, got shape {other:?}"
        ))),
    }
}

/// Transform every column of an `N×C` matrix (a rank-1 input is one column).
pub fn dft(input: &Tensor<f64>) -> Result<ComplexSpectrum> {
    let (n, c) = as_matrix(input)?;
    ensure!(n >= 1, "dft of an empty sequence");
    let (cos, sin) = twiddles(n, -1.0);
    let x = input.data();
    let mut re = vec![0.0; n * c];
    let mut im = vec![0.0; n * c];
    for k in 0..n {
        for t in 0..n {
            let m = (k * t) % n;
            let (wr, wi) = (cos[m], sin[m]);
            for ch in 0..c {
                let v = x[t * c + ch];
                re[k * c + ch] += v * wr;
                im[k * c + ch] += v * wi;
            }
        }
    }
    Ok(ComplexSpectrum {
        re: Tensor::from_parts(vec![n, c], re),
        im: Tensor::from_parts(vec![n, c], im),
    })
}

/// Inverse transform of a spectrum that came from real data.
///
/// Imaginary residue below `1e-9` (relative to the signal scale) is
/// discarded; anything larger means the spectrum was not conjugate-symmetric.
pub fn idft(spec: &ComplexSpectrum) -> Result<Tensor<f64>> {
    ensure!(
        spec.re.shape() == spec.im.shape(),
        "real part {:?} and imaginary part {:?} differ in shape",
        spec.re.shape(),
        spec.im.shape()
    );
    let (n, c) = as_matrix(&spec.re)?;
    let scale = spec
        .re
        .data()
        .iter()
        .chain(spec.im.data())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let (re, im) = (spec.re.data(), spec.im.data());
    for k in 1..n {
        for ch in 0..c {
            let (a, b) = (k * c + ch, (n - k) * c + ch);
            ensure!(
                (re[a] - re[b]).abs() <= tol && (im[a] + im[b]).abs() <= tol,
                "spectrum is not conjugate-symmetric at bin {k}, channel {ch}"
            );
        }
    }
    let (cos, sin) = twiddles(n, 1.0);
    let inv = 1.0 / n as f64;
    let mut out = vec![0.0; n * c];
    for t in 0..n {
        for ch in 0..c {
            let (mut acc_re, mut acc_im) = (0.0, 0.0);
            for k in 0..n {
                let m = (k * t) % n;
                let (xr, xi) = (re[k * c + ch], im[k * c + ch]);
                acc_re += xr * cos[m] - xi * sin[m];
                acc_im += xr * sin[m] + xi * cos[m];
            }
            ensure!(
                (acc_im * inv).abs() <= tol,
                "inverse transform left imaginary residue {:.3e} at sample {t}, channel {ch}",
                acc_im * inv
            );
            out[t * c + ch] = acc_re * inv;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let s = dft(&col(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.re.data(), &[1.0; 4]);
        assert!(s.im.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_is_dc_only() {
        let s = dft(&col(&[1.0; 4])).unwrap();
        let expect = [4.0, 0.0, 0.0, 0.0];
        for (a, b) in s.re.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.im.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn inverse_of_known_spectra() {
        let zero = Tensor::zeros(&[4, 1]);
        let dc = ComplexSpectrum {
            re: col(&[4.0, 0.0, 0.0, 0.0]),
            im: zero.clone(),
        };
        assert_eq!(idft(&dc).unwrap().data(), &[1.0; 4]);
        let flat = ComplexSpectrum {
            re: col(&[1.0; 4]),
            im: zero,
        };
        let x = idft(&flat).unwrap();
        for (a, b) in x.data().iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let s = ComplexSpectrum {
            re: col(&[0.0, 1.0, 0.0, 0.0]),
            im: Tensor::zeros(&[4, 1]),
        };
        assert!(matches!(idft(&s), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn parseval_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = dft(&col(&x)).unwrap();
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = s.re.data().iter().zip(s.im.data()).map(|(a, b)| a * a + b * b).sum();
        assert!((time - freq / 8.0).abs() < 1e-10);
        let back = idft(&s).unwrap();
        assert!(back.max_abs_diff(&col(&x)) < 1e-10);
    }

    #[test]
    fn columns_are_independent() {
        let m = Tensor::new(&[2, 2], vec![1.0, 5.0, 3.0, 7.0]).unwrap();
        let s = dft(&m).unwrap();
        assert_eq!(s.re.data(), &[4.0, 12.0, -2.0, -2.0]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(Tensor::<f64>::new(&[0, 1], vec![]).is_err());
        let bad = Tensor::<f64>::zeros(&[1, 2, 3]);
        assert!(dft(&bad).is_err());
    }
}
