//! Dense tensors and the raw matrix kernels shared by forward and backward
//! passes.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rayon::prelude::*;

use crate::seeds;

/// Element type: f32 for training speed, f64 for finite-difference checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand f64 -> T conversion for constants.
pub(crate) fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("scalar conversion")
}

/// Row-parallel kernels only pay off past this many multiply-adds.
const PAR_THRESHOLD: usize = 1 << 15;

/// A contiguous row-major tensor. Rank 0 (scalar), 1, and 2 are used.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| sc::<T>(seeds::gaussian(rng) * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let n = self.cols();
        self.data[i * n + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise conversion between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| sc::<U>(x.to_f64().unwrap())).collect(),
        }
    }
}

pub(crate) fn assert_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape {:?} does not match shape {:?}",
        a.shape(),
        b.shape()
    );
}

/// `a [m,k] @ b [k,n] -> [m,n]`.
pub fn mm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul: [{m},{k}] @ [{kb},{n}]");
    let mut out = Tensor::zeros(&[m, n]);
    let body = |(i, orow): (usize, &mut [T])| {
        let arow = a.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// `a [m,k] @ b^T` where `b` is `[n,k]` -> `[m,n]`.
pub fn mm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_nt: [{m},{k}] @ [{n},{kb}]^T");
    let mut out = Tensor::zeros(&[m, n]);
    let body = |(i, orow): (usize, &mut [T])| {
        let arow = a.row(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// `a^T [k,m] @ b [k,n] -> [m,n]`. Serial; only used in backward passes of
/// modest sizes.
pub fn mm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_tn: [{k},{m}]^T @ [{kb},{n}]");
    let mut out = Tensor::zeros(&[m, n]);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree_on_a_hand_case() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(mm(&a, &b).data(), &[19.0, 22.0, 43.0, 50.0]);

        // a @ b == mm_nt(a, b^T) == mm_tn(a^T, b)
        let bt = Tensor::from_vec(&[2, 2], vec![5.0, 7.0, 6.0, 8.0]);
        assert_eq!(mm_nt(&a, &bt).data(), &[19.0, 22.0, 43.0, 50.0]);
        let at = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(mm_tn(&at, &b).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn parallel_and_serial_matmul_are_bitwise_identical() {
        let mut rng = seeds::stream(3, 0);
        let a = Tensor::<f32>::randn(&[64, 96], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[96, 80], 1.0, &mut rng);
        // well above the threshold: runs parallel
        let big = mm(&a, &b);
        // force serial by computing row by row
        for i in 0..64 {
            let arow = Tensor::from_vec(&[1, 96], a.row(i).to_vec());
            let serial = mm(&arow, &b);
            assert_eq!(serial.data(), big.row(i), "row {i}");
        }
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        mm(&a, &b);
    }
}
