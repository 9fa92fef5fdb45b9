//! Dense row-major tensors, a tape-based reverse-mode engine, and the
//! optimizer/checkpoint plumbing that trains the change detector.
//!
//! Two precisions are supported through [`Float`]: `f32` for training and
//! inference, `f64` for finite-difference gradient checks.

mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;

use crate::error::{ensure, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, grad_check_sampled, grad_check_screened, ScreenedCheck};
pub use graph::{Band, Grads, Graph, Var};
pub use optim::{adamw_step, collect_grads, AdamW, ParamId, ParamStore, Parameter};

/// Scalar element type of a [`Tensor`].
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = beta * c + a · b` with `a: m×k`, `b: k×n`, `c: m×n` (row-major,
    /// contiguous). Strides describe `a` and `b` so transposed views need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative gemm strides");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm operand out of bounds");
}

impl Float for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_extent(a.len(), m, k, a_strides);
        check_gemm_extent(b.len(), k, n, b_strides);
        assert!(c.len() >= m * n, "gemm output too small");
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    /// Plain ordered dot products. The 64-bit path exists for verification,
    /// so it keeps the summation order of a textbook loop nest (index `k`
    /// ascending) and reproduces naive oracles bit for bit.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_extent(a.len(), m, k, a_strides);
        check_gemm_extent(b.len(), k, n, b_strides);
        assert!(c.len() >= m * n, "gemm output too small");
        let (ar, ac) = (a_strides.0 as usize, a_strides.1 as usize);
        let (br, bc) = (b_strides.0 as usize, b_strides.1 as usize);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * ar + p * ac] * b[p * br + j * bc];
                }
                let slot = &mut c[i * n + j];
                *slot = if beta == 0.0 { acc } else { beta * *slot + acc };
            }
        }
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor, row-major with the leftmost axis slowest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let len: usize = shape.iter().product();
        ensure!(
            len == data.len(),
            "shape {shape:?} needs {len} values, got {}",
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data, new extents.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Rank-4 extents `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            self.shape.len() == 4,
            "expected a rank-4 feature map, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Validation check: every value is finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(crate::error::Error::Contract(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| x.to_f64() * x.to_f64()).sum()
    }

    /// Channels `[start, end)` of a rank-4 map.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        ensure!(
            start < end && end <= c,
            "channel range {start}..{end} invalid for {c} channels"
        );
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Self::from_parts(vec![b, end - start, h, w], data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn slice_channels_takes_each_batch_item() {
        let t = Tensor::<f64>::new(&[2, 3, 1, 1], (0..6).map(f64::from).collect()).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn finite_check_names_position() {
        let t = Tensor::<f32>::new(&[3], vec![0.0, f32::NAN, 1.0]).unwrap();
        let err = t.check_finite("probe").unwrap_err().to_string();
        assert!(err.contains("flat index 1"), "{err}");
    }

    #[test]
    fn gemm_paths_agree() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let mut c64 = vec![0.0; 15];
        f64::gemm(3, 4, 5, &a, (4, 1), &b, (5, 1), 0.0, &mut c64);
        let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
        let mut c32 = vec![0.0f32; 15];
        f32::gemm(3, 4, 5, &a32, (4, 1), &b32, (5, 1), 0.0, &mut c32);
        for (x, y) in c64.iter().zip(&c32) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
        // transposed view of `a`
        let mut ct = vec![0.0; 20];
        f64::gemm(4, 3, 5, &a, (1, 4), &b[..15], (5, 1), 0.0, &mut ct);
        let expect: f64 = (0..3).map(|p| a[p * 4] * b[p * 5]).sum();
        assert_eq!(ct[0], expect);
    }
}
