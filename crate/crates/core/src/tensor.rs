//! Dense row-major tensors and the eager kernels every other module builds on.
//!
//! Sequences are stored channel-major: a `C×T` tensor keeps each channel's
//! time series contiguous, so the per-tap convolution and matmul inner loops
//! run over time with unit stride.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { shape: vec![rows, cols], data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// Builds a `rows×cols` matrix from `f64` values, converting to `T`.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::matrix(rows, cols, data.iter().map(|&v| T::of(v)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row count of a matrix (channels of a sequence).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix (time steps of a sequence).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Column `c` of a matrix, copied out.
    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff needs equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn cols_range(&self, start: usize, len: usize) -> Result<Self> {
        ops::slice(self, 1, start, len)
    }

    /// Rows `start..start+len` of a matrix.
    pub fn rows_range(&self, start: usize, len: usize) -> Result<Self> {
        ops::slice(self, 0, start, len)
    }
}

/// Eager kernels. The autodiff tape records these same functions, so a value
/// computed with or without gradient tracking is bit-identical.
pub mod ops {
    use super::Tensor;
    use crate::error::{Error, Result};
    use crate::scalar::Scalar;

    fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok(())
    }

    fn zip_with<T: Scalar>(
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        same_shape(op, a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: a.shape.clone(), data })
    }

    pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("add", a, b, |x, y| x + y)
    }

    pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("sub", a, b, |x, y| x - y)
    }

    pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("mul", a, b, |x, y| x * y)
    }

    pub fn sq_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("sq_diff", a, b, |x, y| (x - y) * (x - y))
    }

    pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
        x.map(|v| v * c)
    }

    pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
        x.map(|v| v + c)
    }

    pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
        T::one() / (T::one() + (-v).exp())
    }

    pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        x.map(sigmoid_scalar)
    }

    pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.exp())
    }

    pub fn abs<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.abs())
    }

    pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
        x.map(|v| v.max(lo).min(hi))
    }

    /// `a (m×k) · b (k×n)`. Each output accumulates over `k` in ascending order.
    pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = a.expect_matrix("matmul")?;
        let (k2, n) = b.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = x.expect_matrix("transpose")?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data })
    }

    /// Number of zero frames a causal convolution needs on the left.
    pub fn causal_padding(kernel_size: usize, dilation: usize) -> usize {
        dilation * (kernel_size - 1)
    }

    fn check_conv<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        dilation: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        let (cin, t) = x.expect_matrix("conv1d")?;
        if w.rank() != 3 {
            return Err(Error::shape("conv1d", format!("kernel must be rank 3, got {:?}", w.shape)));
        }
        let (cout, wcin, ksize) = (w.shape[0], w.shape[1], w.shape[2]);
        if wcin != cin {
            return Err(Error::shape("conv1d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if b.numel() != cout {
            return Err(Error::shape("conv1d", format!("bias has {} entries for {cout} outputs", b.numel())));
        }
        if dilation == 0 || ksize == 0 {
            return Err(Error::InvalidArgument("conv1d needs dilation ≥ 1 and kernel size ≥ 1".into()));
        }
        Ok((cin, t, cout, ksize))
    }

    /// Convolution over an input that already carries its `δ(κ−1)` frames of
    /// left context. Emits `len − δ(κ−1)` frames:
    /// `y[o, n] = b[o] + Σ_i Σ_j w[o, i, j] · x[i, n + P − jδ]`.
    pub fn conv1d_valid<T: Scalar>(
        xp: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        dilation: usize,
    ) -> Result<Tensor<T>> {
        let (cin, len, cout, ksize) = check_conv(xp, w, b, dilation)?;
        let pad = causal_padding(ksize, dilation);
        if len < pad {
            return Err(Error::shape("conv1d", format!("{len} frames cannot cover {pad} frames of context")));
        }
        let t = len - pad;
        let mut out = vec![T::zero(); cout * t];
        for o in 0..cout {
            let orow = &mut out[o * t..(o + 1) * t];
            orow.fill(b.data[o]);
            for i in 0..cin {
                let xrow = &xp.data[i * len..(i + 1) * len];
                for j in 0..ksize {
                    let wv = w.data[(o * cin + i) * ksize + j];
                    let offset = pad - j * dilation;
                    let src = &xrow[offset..offset + t];
                    for (y, &xv) in orow.iter_mut().zip(src) {
                        *y += wv * xv;
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![cout, t], data: out })
    }

    /// Prepends `pad` zero frames to a `C×T` sequence.
    pub fn left_pad<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
        let (c, t) = x.expect_matrix("left_pad")?;
        let len = t + pad;
        let mut data = vec![T::zero(); c * len];
        for r in 0..c {
            data[r * len + pad..(r + 1) * len].copy_from_slice(&x.data[r * t..(r + 1) * t]);
        }
        Ok(Tensor { shape: vec![c, len], data })
    }

    /// Causal dilated convolution with zero left padding; output length equals input length.
    pub fn conv1d_causal<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        dilation: usize,
    ) -> Result<Tensor<T>> {
        check_conv(x, w, b, dilation)?;
        let xp = left_pad(x, causal_padding(w.shape[2], dilation))?;
        conv1d_valid(&xp, w, b, dilation)
    }

    /// Softmax along `axis` of a matrix. Entries where `mask` is false are
    /// excluded entirely (weight exactly zero, never added into the normaliser).
    pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize, mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let (r, c) = x.expect_matrix("softmax")?;
        if axis > 1 {
            return Err(Error::shape("softmax", format!("axis {axis} on a matrix")));
        }
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax", format!("mask has {} entries for {r}x{c}", m.len())));
            }
        }
        let allowed = |idx: usize| mask.map_or(true, |m| m[idx]);
        let (outer, inner, stride_outer, stride_inner) = if axis == 0 { (c, r, 1, c) } else { (r, c, c, 1) };
        let mut out = vec![T::zero(); r * c];
        for o in 0..outer {
            let base = o * stride_outer;
            let mut max = T::neg_infinity();
            for i in 0..inner {
                let idx = base + i * stride_inner;
                if allowed(idx) {
                    max = max.max(x.data[idx]);
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::InvalidArgument(format!("softmax slice {o} is fully masked")));
            }
            let mut total = T::zero();
            for i in 0..inner {
                let idx = base + i * stride_inner;
                if allowed(idx) {
                    let e = (x.data[idx] - max).exp();
                    out[idx] = e;
                    total += e;
                }
            }
            for i in 0..inner {
                let idx = base + i * stride_inner;
                if allowed(idx) {
                    out[idx] = out[idx] / total;
                }
            }
        }
        Ok(Tensor { shape: vec![r, c], data: out })
    }

    pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(x.sum())
    }

    /// Sum of a matrix along `axis`, keeping the reduced axis with size 1.
    pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (r, c) = x.expect_matrix("sum_axis")?;
        match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &v) in out.iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                Ok(Tensor { shape: vec![1, c], data: out })
            }
            1 => {
                let data = (0..r).map(|i| x.row(i).iter().copied().sum()).collect();
                Ok(Tensor { shape: vec![r, 1], data })
            }
            _ => Err(Error::shape("sum_axis", format!("axis {axis} on a matrix"))),
        }
    }

    /// Stacks matrices with a common column count along the channel axis.
    pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let cols = first.expect_matrix("concat")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.expect_matrix("concat")?;
            if c != cols {
                return Err(Error::shape("concat", format!("column counts {cols} and {c} differ")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    /// Contiguous range `start..start+len` along `axis` of a tensor of any rank ≥ 1.
    pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= x.rank() || start + len > x.shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape),
            ));
        }
        let outer: usize = x.shape[..axis].iter().product();
        let inner: usize = x.shape[axis + 1..].iter().product();
        let dim = x.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x.data[base..base + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Adds `src` into the `start..start+len` range along `axis` of `dst` (slice adjoint).
    pub(crate) fn scatter_add<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, axis: usize, start: usize) {
        let outer: usize = dst.shape[..axis].iter().product();
        let inner: usize = dst.shape[axis + 1..].iter().product();
        let dim = dst.shape[axis];
        let len = src.shape[axis];
        for o in 0..outer {
            let dbase = (o * dim + start) * inner;
            let sbase = o * len * inner;
            for k in 0..len * inner {
                dst.data[dbase + k] += src.data[sbase + k];
            }
        }
    }

    /// Repeats a single column `times` times: `C×1 → C×times`.
    pub fn repeat_cols<T: Scalar>(x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
        let (r, c) = x.expect_matrix("repeat_cols")?;
        if c != 1 {
            return Err(Error::shape("repeat_cols", format!("expected one column, got {c}")));
        }
        let mut data = Vec::with_capacity(r * times);
        for i in 0..r {
            data.extend(std::iter::repeat(x.data[i]).take(times));
        }
        Ok(Tensor { shape: vec![r, times], data })
    }

    /// Running sum along the columns of each row.
    pub fn cumsum_cols<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = x.expect_matrix("cumsum")?;
        let mut data = x.data.clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            for j in 1..c {
                let prev = row[j - 1];
                row[j] += prev;
            }
        }
        Ok(Tensor { shape: vec![r, c], data })
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, v).unwrap()
    }

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::scalar(1.0).numel(), 1);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    }

    #[test]
    fn identity_matmul_returns_vector() {
        let v = m(3, 1, &[0.3, -1.5, 2.25]);
        assert_eq!(matmul(&Tensor::identity(3), &v).unwrap(), v);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = softmax(&Tensor::<f64>::zeros(&[3, 1]), 0, None).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_softmax_column_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mask = [true, false, true, false];
        assert!(softmax(&x, 0, Some(&mask)).is_err());
    }

    #[test]
    fn matmul_rejects_inner_dimension_mismatch() {
        assert!(matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn conv_impulse_response_uses_zero_left_padding() {
        // one input channel, one output channel, taps [1, 1], dilation 1
        let x = m(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let w = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv1d_causal(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dilated_conv_matches_naive_loop() {
        let (cin, cout, k, dil, t) = (3, 2, 3, 2, 9);
        let x = Tensor::from_fn(cin, t, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let w = Tensor::new(vec![cout, cin, k], (0..cout * cin * k).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let b = Tensor::new(vec![cout], vec![0.1, -0.2]).unwrap();
        let y = conv1d_causal(&x, &w, &b, dil).unwrap();
        for o in 0..cout {
            for n in 0..t {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for j in 0..k {
                        if n >= j * dil {
                            acc += w.data()[(o * cin + i) * k + j] * x.at(i, n - j * dil);
                        }
                    }
                }
                assert!((acc - y.at(o, n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slice_and_scatter_are_adjoint_on_rank3() {
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let s = slice(&x, 1, 1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let mut back = Tensor::zeros(&[2, 3, 2]);
        scatter_add(&mut back, &s, 1, 1);
        assert_eq!(back.data()[..2], [0.0, 0.0]);
        assert_eq!(back.data()[2..6], [2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn cumsum_runs_along_time() {
        let x = m(1, 3, &[0.5, 1.0, 2.0]);
        assert_eq!(cumsum_cols(&x).unwrap().data(), &[0.5, 1.5, 3.5]);
    }
}
