//! Dense row-major tensors and the forward kernels the tape records.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] keeps every
//! element rounded to the nearest `f32`, so it serializes losslessly as `f32`
//! and behaves numerically like single precision at operation boundaries.
//!
//! Every reduction runs in ascending index order, which makes results
//! bit-reproducible across runs and thread counts.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Wire code used by the tensor container.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    #[inline]
    fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }
}

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `target` shape; broadcast
/// dimensions get stride 0.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: impl Into<Vec<usize>>, mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimension(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ElementCountMismatch { from: data.len(), to: n });
        }
        check_finite(&data, "tensor construction")?;
        if dtype == DType::F32 {
            for x in &mut data {
                *x = dtype.round(*x);
            }
            check_finite(&data, "f32 rounding")?;
        }
        Ok(Tensor { shape, data, dtype })
    }

    /// Internal constructor for kernel outputs; still rejects non-finite values.
    fn from_kernel(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType, op: &str) -> Result<Self> {
        if dtype == DType::F32 {
            for x in &mut data {
                *x = dtype.round(*x);
            }
        }
        check_finite(&data, op)?;
        Ok(Tensor { shape, data, dtype })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    /// I.i.d. normal(0, scale²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, scale: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(shape, data)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new(shape, data)
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

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!("item() on shape {:?}", self.shape)))
        }
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let st = strides(&self.shape);
        self.data[index.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Tensor> {
        Self::from_kernel(self.shape.clone(), self.data.clone(), dtype, "dtype cast")
    }

    /// Copy with one flat element replaced; used by finite differencing.
    pub fn with_element(&self, index: usize, value: f64) -> Result<Tensor> {
        let mut data = self.data.clone();
        data[index] = value;
        Tensor::with_dtype(self.shape.clone(), data, self.dtype)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, op: &str) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Self::from_kernel(self.shape.clone(), data, self.dtype, op)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(|x| x * s, "scale")
    }

    /// Pointwise binary operation with trailing-dimension broadcasting.
    pub fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let dtype = self.dtype.promote(other.dtype);
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| kind.apply(a, b))
                .collect();
            return Self::from_kernel(self.shape.clone(), data, dtype, "elementwise");
        }
        let shape = broadcast_shapes(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..n {
            data.push(kind.apply(self.data[oa], other.data[ob]));
            // odometer increment, keeping both offsets in sync
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < shape[d] {
                    break;
                }
                oa -= sa[d] * shape[d];
                ob -= sb[d] * shape[d];
                idx[d] = 0;
            }
        }
        Self::from_kernel(shape, data, dtype, "elementwise")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Pointwise maximum of two same-shaped tensors.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "maximum of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a.max(b)).collect();
        Self::from_kernel(self.shape.clone(), data, self.dtype.promote(other.dtype), "maximum")
    }

    /// Sums a broadcast result back down to `target`, the inverse of broadcasting.
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let bshape = broadcast_shapes(target, &self.shape)?;
        if bshape != self.shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot reduce {:?} to {:?}",
                self.shape, target
            )));
        }
        let st = broadcast_strides(target, &self.shape);
        let n: usize = target.iter().product();
        let mut out = vec![0.0; n];
        let mut idx = vec![0usize; self.shape.len()];
        let mut o = 0usize;
        for &v in &self.data {
            out[o] += v;
            for d in (0..self.shape.len()).rev() {
                idx[d] += 1;
                o += st[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                o -= st[d] * self.shape[d];
                idx[d] = 0;
            }
        }
        Self::from_kernel(target.to_vec(), out, self.dtype, "sum_to_shape")
    }

    /// Batched matrix product over the last two axes, with the leading
    /// (batch) axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank >= 2, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (p, q) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (q2, r) = (other.shape[rb - 2], other.shape[rb - 1]);
        if q != q2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let abatch = &self.shape[..ra - 2];
        let bbatch = &other.shape[..rb - 2];
        let batch = broadcast_shapes(abatch, bbatch)?;
        let nb: usize = batch.iter().product();
        let sa = broadcast_strides(abatch, &batch);
        let sb = broadcast_strides(bbatch, &batch);
        let bst = strides(&batch);
        let mut out = vec![0.0; nb * p * r];
        for bi in 0..nb {
            let (mut oa, mut ob) = (0usize, 0usize);
            let mut rem = bi;
            for d in 0..batch.len() {
                let i = rem / bst[d];
                rem %= bst[d];
                oa += i * sa[d];
                ob += i * sb[d];
            }
            let a = &self.data[oa * p * q..(oa + 1) * p * q];
            let b = &other.data[ob * q * r..(ob + 1) * q * r];
            let c = &mut out[bi * p * r..(bi + 1) * p * r];
            for i in 0..p {
                let crow = &mut c[i * r..(i + 1) * r];
                for k in 0..q {
                    let aik = a[i * q + k];
                    let brow = &b[k * r..(k + 1) * r];
                    for (cj, &bkj) in crow.iter_mut().zip(brow) {
                        *cj += aik * bkj;
                    }
                }
            }
        }
        let mut shape = batch;
        shape.push(p);
        shape.push(r);
        Self::from_kernel(shape, out, self.dtype.promote(other.dtype), "matmul")
    }

    pub fn reshape(&self, new_shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let new_shape = new_shape.into();
        let n: usize = new_shape.iter().product();
        if n != self.data.len() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::ElementCountMismatch { from: self.data.len(), to: n });
        }
        Ok(Tensor { shape: new_shape, data: self.data.clone(), dtype: self.dtype })
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidPermutation(perm.to_vec()));
        }
        let in_st = strides(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        for _ in 0..n {
            data.push(self.data[o]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                o += st[d];
                if idx[d] < shape[d] {
                    break;
                }
                o -= st[d] * shape[d];
                idx[d] = 0;
            }
        }
        Ok(Tensor { shape, data, dtype: self.dtype })
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::AxisOutOfRange { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.transpose(&perm)
    }

    /// Splits the shape around `axis` into (outer, len, inner) extents.
    fn lanes(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange { axis, rank: self.rank() });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (outer, len, inner) = self.lanes(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Self::from_kernel(shape, out, self.dtype, "sum")
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.lanes(axis)?;
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(self.data[at(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (self.data[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        Self::from_kernel(self.shape.clone(), out, self.dtype, "softmax")
    }

    /// Per-lane dot product of two same-shaped tensors along `axis`, kept as
    /// a size-1 axis.
    pub(crate) fn lane_dot(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        self.mul(other)?.sum_axis(axis, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                out[i * r + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::eye(2).unwrap().matmul(&x).unwrap(), x);
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = Tensor::zeros(vec![2, 1]).unwrap();
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (p, q, r) in [(3, 4, 2), (16, 16, 16), (1, 7, 5)] {
            let a = Tensor::randn(vec![p, q], 1.0, &mut rng).unwrap();
            let b = Tensor::randn(vec![q, r], 1.0, &mut rng).unwrap();
            let got = a.matmul(&b).unwrap();
            for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 3]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(vec![3, 2, 4], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(vec![4, 5], 1.0, &mut rng).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let slice = Tensor::new(vec![2, 4], a.data()[bi * 8..(bi + 1) * 8].to_vec()).unwrap();
            let want = naive_matmul(&slice, &b);
            assert_eq!(&c.data()[bi * 10..(bi + 1) * 10], want.as_slice());
        }
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::zeros(vec![3]).unwrap().softmax(0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(vec![5], 3.0, &mut rng).unwrap();
        assert!((x.softmax(0).unwrap().sum_all() - 1.0).abs() < 1e-12);
        assert!(matches!(x.softmax(1), Err(Error::AxisOutOfRange { .. })));
    }

    #[test]
    fn broadcast_mul_hand_expanded() {
        let a = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 10.0]).unwrap();
        let c = a.mul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[2.0, 3.0, 20.0, 30.0]);
        let bad = Tensor::zeros(vec![3]).unwrap();
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng).unwrap();
        assert_eq!(x.add(&Tensor::zeros(vec![3, 4]).unwrap()).unwrap(), x);
        assert_eq!(x.mul(&Tensor::ones(vec![4]).unwrap()).unwrap(), x);
    }

    #[test]
    fn sum_axis_cases() {
        assert_eq!(Tensor::ones(vec![4]).unwrap().sum_axis(0, false).unwrap().item().unwrap(), 4.0);
        assert_eq!(Tensor::zeros(vec![2, 2]).unwrap().sum_all(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(vec![3, 3], 1.0, &mut rng).unwrap();
        let s = x.sum_axis(1, false).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += x.at(&[i, j]);
            }
            assert!((s.data()[i] - acc).abs() <= 1e-12);
        }
        assert_eq!(x.sum_axis(0, true).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn reshape_and_transpose() {
        let x = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(x.reshape(vec![3, 2]).unwrap().reshape(vec![2, 3]).unwrap(), x);
        assert_eq!(x.transpose(&[0, 1]).unwrap(), x);
        assert_eq!(x.t().unwrap().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(matches!(x.reshape(vec![4]), Err(Error::ElementCountMismatch { .. })));
        assert!(matches!(x.transpose(&[0, 0]), Err(Error::InvalidPermutation(_))));
    }

    #[test]
    fn hidden_block_flatten_round_trip() {
        let shape = [2, 2, 2, 2, 3];
        let x = Tensor::new(shape.to_vec(), (0..48).map(|i| i as f64 * 0.5).collect()).unwrap();
        let flat = x.reshape(vec![16, 3]).unwrap();
        for b in 0..2 {
            for f in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        let row = ((b * 2 + f) * 2 + h) * 2 + w;
                        for c in 0..3 {
                            assert_eq!(flat.at(&[row, c]), x.at(&[b, f, h, w, c]));
                        }
                    }
                }
            }
        }
        assert_eq!(flat.reshape(shape.to_vec()).unwrap(), x);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
        let big = Tensor::new(vec![1], vec![1e300]).unwrap();
        assert!(matches!(big.mul(&big), Err(Error::NonFinite(_))));
        assert!(Tensor::new(vec![1], vec![1e300]).unwrap().to_dtype(DType::F32).is_err());
    }

    #[test]
    fn f32_tag_rounds() {
        let t = Tensor::with_dtype(vec![1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let s = t.add(&Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert_eq!(s.dtype(), DType::F64);
    }
}
