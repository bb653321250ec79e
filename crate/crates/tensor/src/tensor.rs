//! Dense N-dimensional tensors over a shared, immutable buffer.
//!
//! A tensor is a strided view `(shape, strides, offset)` into an `Arc<Vec<T>>`.
//! Permutations and narrowing are O(rank) views; operations that need
//! row-major data call [`Tensor::contiguous`] first.

use std::fmt;
use std::sync::Arc;

use crate::element::{gemm, Element, MatRef};
use crate::error::{invalid, Result};

#[derive(Clone)]
pub struct Tensor<T> {
    buf: Arc<Vec<T>>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divides by the element count).
    Var,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return invalid(format!("permutation {axes:?} has {} axes, tensor rank is {rank}", axes.len()));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return invalid(format!("{axes:?} is not a permutation of 0..{rank}"));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` element counts.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strided_copy<T: Copy>(src: &[T], offset: usize, shape: &[usize], strides: &[usize], out: &mut Vec<T>) {
    let rank = shape.len();
    if rank == 0 {
        out.push(src[offset]);
        return;
    }
    if shape.iter().any(|&s| s == 0) {
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = offset;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| src[base + i * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        if n != 0 && shape.iter().any(|&s| s == 0) {
            return invalid(format!("zero extent in non-empty shape {shape:?}"));
        }
        Ok(Tensor { buf: Arc::new(data), strides: row_major_strides(shape), shape: shape.to_vec(), offset: 0 })
    }

    /// Explicitly empty tensor; the only way to get a zero extent.
    pub fn empty(shape: &[usize]) -> Self {
        assert!(shape.iter().product::<usize>() == 0, "empty() needs a zero extent");
        Tensor { buf: Arc::new(Vec::new()), strides: row_major_strides(shape), shape: shape.to_vec(), offset: 0 }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { buf: Arc::new(vec![value; n]), strides: row_major_strides(shape), shape: shape.to_vec(), offset: 0 }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    /// Builds a row-major tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        let data: Vec<T> = (0..n).map(f).collect();
        Tensor { buf: Arc::new(data), strides: row_major_strides(shape), shape: shape.to_vec(), offset: 0 }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == row_major_strides(&self.shape)
    }

    /// Row-major slice of the elements, if the view is contiguous.
    pub fn as_slice(&self) -> Option<&[T]> {
        if self.is_contiguous() {
            Some(&self.buf[self.offset..self.offset + self.numel()])
        } else {
            None
        }
    }

    /// Row-major elements; materializes non-contiguous views.
    pub fn to_vec(&self) -> Vec<T> {
        match self.as_slice() {
            Some(s) => s.to_vec(),
            None => {
                let mut out = Vec::with_capacity(self.numel());
                strided_copy(&self.buf, self.offset, &self.shape, &self.strides, &mut out);
                out
            }
        }
    }

    pub fn into_vec(self) -> Vec<T> {
        if self.offset == 0 && self.is_contiguous() && self.buf.len() == self.numel() {
            match Arc::try_unwrap(self.buf) {
                Ok(v) => v,
                Err(buf) => buf.as_ref().clone(),
            }
        } else {
            self.to_vec()
        }
    }

    pub fn contiguous(&self) -> Tensor<T> {
        if self.is_contiguous() {
            self.clone()
        } else {
            Tensor::from_vec(&self.shape, self.to_vec()).expect("shape preserved")
        }
    }

    /// Row-major elements, borrowed when the view is contiguous.
    pub fn data(&self) -> std::borrow::Cow<'_, [T]> {
        match self.as_slice() {
            Some(s) => std::borrow::Cow::Borrowed(s),
            None => std::borrow::Cow::Owned(self.to_vec()),
        }
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut pos = self.offset;
        for ((&i, &s), &n) in index.iter().zip(&self.strides).zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            pos += i * s;
        }
        self.buf[pos]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.buf[self.offset]
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        check_permutation(axes, self.rank())?;
        Ok(Tensor {
            buf: self.buf.clone(),
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            strides: axes.iter().map(|&a| self.strides[a]).collect(),
            offset: self.offset,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return invalid(format!("cannot reshape {:?} ({} elements) into {shape:?} ({n} elements)", self.shape, self.numel()));
        }
        if n != 0 && shape.iter().any(|&s| s == 0) {
            return invalid(format!("zero extent in reshape target {shape:?}"));
        }
        let base = self.contiguous();
        Ok(Tensor { buf: base.buf, strides: row_major_strides(shape), shape: shape.to_vec(), offset: base.offset })
    }

    /// View of `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return invalid(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        if len == 0 || start + len > self.shape[axis] {
            return invalid(format!("narrow [{start}, {}) outside extent {} of axis {axis}", start + len, self.shape[axis]));
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { buf: self.buf.clone(), shape, strides: self.strides.clone(), offset: self.offset + start * self.strides[axis] })
    }

    /// Repeats `self` along stride-0 axes. `axes` are the positions in
    /// `shape` that `self` lacks; the remaining extents must match `self`.
    pub(crate) fn expand_axes(&self, shape: &[usize], axes: &[usize]) -> Tensor<T> {
        let src = self.contiguous();
        let src_strides = src.strides.clone();
        let mut strides = Vec::with_capacity(shape.len());
        let mut k = 0;
        for d in 0..shape.len() {
            if axes.contains(&d) {
                strides.push(0);
            } else {
                debug_assert_eq!(src.shape[k], shape[d]);
                strides.push(src_strides[k]);
                k += 1;
            }
        }
        let view = Tensor { buf: src.buf, shape: shape.to_vec(), strides, offset: src.offset };
        Tensor::from_vec(shape, view.to_vec()).expect("expanded shape")
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = match parts.first() {
            Some(t) => *t,
            None => return invalid("concat of zero tensors"),
        };
        if axis >= first.rank() {
            return invalid(format!("axis {axis} out of range for rank {}", first.rank()));
        }
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return invalid(format!("concat shape mismatch {:?} vs {:?} on axis {axis}", p.shape, first.shape));
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, d) in parts.iter().zip(&datas) {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_vec(&shape, out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(&self.shape, data).expect("shape preserved")
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return invalid(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub(crate) fn mat_ref(&self) -> MatRef<'_, T> {
        debug_assert_eq!(self.rank(), 2);
        MatRef {
            data: &self.buf[self.offset..],
            rows: self.shape[0],
            cols: self.shape[1],
            row_stride: self.strides[0],
            col_stride: self.strides[1],
        }
    }

    /// Rank-2 matrix product. Strided (e.g. transposed) operands are used
    /// in place.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            return invalid(format!("matmul needs rank-2 operands, got {:?} and {:?}", self.shape, other.shape));
        }
        if self.shape[1] != other.shape[0] {
            return invalid(format!("matmul inner extents differ: {:?} · {:?}", self.shape, other.shape));
        }
        let (m, n) = (self.shape[0], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.mat_ref(), other.mat_ref(), T::zero(), &mut out);
        Tensor::from_vec(&[m, n], out)
    }

    fn check_axes(&self, axes: &[usize]) -> Result<()> {
        for (i, &a) in axes.iter().enumerate() {
            if a >= self.rank() {
                return invalid(format!("reduce axis {a} out of range for rank {}", self.rank()));
            }
            if axes[..i].contains(&a) {
                return invalid(format!("duplicate reduce axis {a}"));
            }
        }
        Ok(())
    }

    /// Reduces over `axes`; the result drops those axes.
    pub fn reduce(&self, axes: &[usize], kind: ReduceKind) -> Result<Tensor<T>> {
        self.check_axes(axes)?;
        let kept: Vec<usize> = (0..self.rank()).filter(|d| !axes.contains(d)).collect();
        let order: Vec<usize> = kept.iter().chain(axes.iter()).copied().collect();
        let moved = self.permute(&order)?.contiguous();
        let out_shape: Vec<usize> = kept.iter().map(|&d| self.shape[d]).collect();
        let count: usize = axes.iter().map(|&d| self.shape[d]).product();
        let data = moved.as_slice().expect("contiguous");
        let outer: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(outer);
        for chunk in data.chunks(count.max(1)).take(outer) {
            let sum: f64 = chunk.iter().map(|v| v.f64()).sum();
            let v = match kind {
                ReduceKind::Sum => sum,
                ReduceKind::Mean => sum / count as f64,
                ReduceKind::Var => {
                    let mean = sum / count as f64;
                    chunk.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / count as f64
                }
            };
            out.push(T::of(v));
        }
        Tensor::from_vec(&out_shape, out)
    }

    pub fn sum_all(&self) -> T {
        T::of(self.data().iter().map(|v| v.f64()).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data().iter().zip(other.data().iter()).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Converts the element type.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_vec(&self.shape, self.data().iter().map(|v| U::of(v.f64())).collect()).expect("shape preserved")
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    /// Shape and elementwise equality, independent of layout.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let shown = data.len().min(8);
        write!(f, "Tensor<{}>{:?} {:?}", T::DTYPE, self.shape, &data[..shown])?;
        if data.len() > shown {
            write!(f, "…")?;
        }
        Ok(())
    }
}
