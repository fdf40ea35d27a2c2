//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a value type: operations return new tensors and never
//! mutate their inputs. Every constructor and operation rejects NaN and
//! infinities, so a tensor that exists is always finite.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::dim(op, format!("shape {shape:?} has a zero extent")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape("Tensor::new", &shape)?;
        if len != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Tensor { shape, data }.finite("Tensor::new")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape("Tensor::full", &shape)?;
        Tensor {
            shape,
            data: vec![value; len],
        }
        .finite("Tensor::full")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
        .finite("Tensor::scalar")
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Rank-2 tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Tensor::matrix", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Skips validation; callers guarantee `data.len() == product(shape)`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Callers must keep every element finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let len = check_shape("reshape", &shape)?;
        if len != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, op: &'static str, mut f: impl FnMut(f64) -> f64) -> Result<Tensor> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite(op)
    }

    /// Elementwise binary map. A one-element operand broadcasts against the other.
    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let out = if self.shape == other.shape {
            Tensor {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            }
        } else if other.len() == 1 && other.rank() == 0 {
            let b = other.data[0];
            Tensor {
                shape: self.shape.clone(),
                data: self.data.iter().map(|&a| f(a, b)).collect(),
            }
        } else if self.len() == 1 && self.rank() == 0 {
            let a = self.data[0];
            Tensor {
                shape: other.shape.clone(),
                data: other.data.iter().map(|&b| f(a, b)).collect(),
            }
        } else {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        };
        out.finite(op)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest element of the flattened tensor (first on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Per-row argmax of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [_, cols] = self.dims2("argmax_rows")?;
        Ok(self.data.chunks(cols).map(argmax).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::dim(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::dim(op, format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::from_parts(vec![m, n], out).finite("matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally transposes.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let eye = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let col = Tensor::matrix(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(eye.matmul(&col).unwrap(), col);

        let row = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
        assert!(matches!(col.matmul(&col), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let naive = |a: &[f64], b: &[f64]| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                }
            }
            c
        };
        let expect = naive(&a, &b);
        let at = Tensor::from_parts(vec![m, k], a.clone()).transpose().unwrap();
        let bt = Tensor::from_parts(vec![k, n], b.clone()).transpose().unwrap();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { at.data() } else { &a[..] };
            let bb = if tb { bt.data() } else { &b[..] };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_broadcast_only() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let s = Tensor::scalar(3.0).unwrap();
        assert_eq!(x.zip_map(&s, "add", |a, b| a + b).unwrap().data(), &[4.0, 5.0]);
        let y = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.zip_map(&y, "add", |a, b| a + b).is_err());
    }

    #[test]
    fn argmax_first_of_ties() {
        let x = Tensor::vector(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(x.argmax(), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
