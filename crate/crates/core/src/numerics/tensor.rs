use std::fmt;

use crate::error::{Error, Result};

/// Reserved logit value for a masked routing candidate. Softmax treats it
/// as `-inf` and assigns the candidate probability exactly zero.
pub const MASKED_LOGIT: f64 = f64::NEG_INFINITY;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
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

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of slices along the last dimension.
    pub fn outer(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Explicit NaN/Inf check. The masked-logit sentinel counts as non-finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: value {} at flat index {i}", self.data[i]))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Plain matrix product `[m,n] x [n,p]`, no tape involved.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("matmul lhs")?;
        let (n2, p) = other.dims2("matmul rhs")?;
        if n != n2 {
            return Err(Error::shape(format!("matmul inner dimensions differ: {:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul(&self.data, &other.data, &mut out, m, n, p);
        Tensor::new(vec![m, p], out)
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("{what}: expected a matrix, got shape {:?}", self.shape))),
        }
    }
}

/// Inner loops shared by the tape ops and the plain tensor helpers.
pub(crate) mod kernels {
    /// out[m,p] += a[m,n] * b[n,p]
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let av = a[i * n + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[k * p..(k + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// out[m,p] += a[m,n] * b[p,n]^T
    pub fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for j in 0..p {
                let brow = &b[j * n..(j + 1) * n];
                out[i * p + j] += dot(arow, brow);
            }
        }
    }

    /// out[n,p] += a[m,n]^T * b[m,p]
    pub fn matmul_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
        for i in 0..m {
            let brow = &b[i * p..(i + 1) * p];
            for k in 0..n {
                let av = a[i * n + k];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[k * p..(k + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        // Four fixed accumulators, combined in a fixed order.
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut tail = 0.0;
        for i in chunks * 4..a.len() {
            tail += a[i] * b[i];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn finite_check_reports_index() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        let msg = t.check_finite("probe").unwrap_err().to_string();
        assert!(msg.contains("flat index 1"));
    }
}
