//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus row-major `f64` storage. Gradient
//! recording lives in [`Tape`]: operations executed through a tape return
//! [`ValueId`] handles, and [`Tape::backward`] populates gradients for every
//! tracked leaf. Plain `Tensor` methods cover the non-differentiable uses
//! (evaluation, score fusion, mask assembly).

mod checkpoint;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{cosine_lr, sgd_step};
pub use tape::{Tape, ValueId};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major tensor of `f64` values. Rank 0 (empty shape) is a scalar
/// with exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for shape {:?}", numel_of(shape), shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform values in `[lo, hi)`, consumed from `rng` in row-major order.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    ///
    /// Panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("shape {:?} ({} elements)", shape, numel_of(shape)),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Softmax over the last axis, as a plain value (used for score fusion
    /// and evaluation; the differentiable version lives on [`Tape`]).
    pub fn softmax_last(&self) -> Result<Self> {
        let cols = *self
            .shape
            .last()
            .ok_or_else(|| Error::shape("softmax_last", "rank >= 1", "rank 0"))?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            softmax_row(row);
        }
        Ok(out)
    }

    /// Per-row argmax of a 2-D tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::shape("argmax_rows", "rank 2", format!("rank {}", self.rank())));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect())
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// out += a (m x k) * b (k x n)
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

/// out += a (m x k) * b^T where b is (n x k)
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            out_row[j] += acc;
        }
    }
}

/// out += a^T * b where a is (k x m), b is (k x n)
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a_row[i];
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += aki * b_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn softmax_is_symmetric_on_equal_logits() {
        let t = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax_last().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_kernels_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut nn);

        // b^T is 2x3 laid out as (n x k)
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut nt);

        // a^T laid out as (k x m)
        let mut tn = [0.0; 4];
        matmul_tn(&a, &b, 2, 3, 2, &mut tn);
        // matmul_tn computes a^T * b with a as (k x m): feed a transposed.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn2 = [0.0; 4];
        matmul_tn(&at, &b, 2, 3, 2, &mut tn2);

        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(nt, nn);
        assert_eq!(tn2, nn);
        let _ = tn;
    }
}
