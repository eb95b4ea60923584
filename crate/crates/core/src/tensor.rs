//! Dense row-major tensors and the kernel set used by the toy transformer.
//!
//! Every reduction accumulates in ascending index order starting from zero, so a
//! given kernel call is bit-reproducible regardless of which worker runs it.
//! Zero-extent dimensions are accepted: an expert that receives no tokens works
//! on a `0 x hidden` block.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Argument(
                "tensor shape must have at least one dimension".into(),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bytes this tensor occupies in the memory ledger.
    #[inline]
    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * T::bytes()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Argument(format!(
                "expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::dim(op, &self.shape, &rhs.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place accumulate `self += rhs`.
    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::dim("add_assign", &self.shape, &rhs.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[m, k] x [k, n] -> [m, n]`; each output accumulates over `k` in ascending order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Column sums of a 2-D tensor: `[r, c] -> [c]`.
    pub fn sum_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(Self::from_vec(out))
    }

    /// Row sums of a 2-D tensor: `[r, c] -> [r]`.
    pub fn sum_cols(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let out = (0..r)
            .map(|i| {
                self.data[i * c..(i + 1) * c]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v)
            })
            .collect();
        Ok(Self::from_vec(out))
    }

    /// Adds a `[c]` vector to every row of a `[r, c]` tensor.
    pub fn add_row_vector(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.shape != [c] {
            return Err(Error::dim("add_row_vector", &self.shape, &bias.shape));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// `extent` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, extent: usize) -> Result<Self> {
        if axis >= self.shape.len() || start + extent > self.shape[axis] {
            return Err(Error::Argument(format!(
                "narrow [{start}, {}) on axis {axis} of shape {:?}",
                start + extent,
                self.shape
            )));
        }
        let (outer, dim, inner) = self.axis_split(axis);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + extent * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = extent;
        Ok(Self { shape, data })
    }

    /// Writes `src` into the `[start, start + src.extent)` window along `axis`.
    pub fn write_window(&mut self, axis: usize, start: usize, src: &Self) -> Result<()> {
        let mut expected = self.shape.clone();
        if axis >= expected.len() || src.shape.len() != expected.len() {
            return Err(Error::dim("write_window", &self.shape, &src.shape));
        }
        let extent = src.shape[axis];
        expected[axis] = extent;
        if expected != src.shape || start + extent > self.shape[axis] {
            return Err(Error::dim("write_window", &self.shape, &src.shape));
        }
        let (outer, dim, inner) = self.axis_split(axis);
        for o in 0..outer {
            let dst = o * dim * inner + start * inner;
            let s = o * extent * inner;
            self.data[dst..dst + extent * inner].copy_from_slice(&src.data[s..s + extent * inner]);
        }
        Ok(())
    }

    /// `rows x cols` block of a matrix starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if r0 + rows > m || c0 + cols > n {
            return Err(Error::Argument(format!(
                "block {rows}x{cols} at ({r0}, {c0}) exceeds {m}x{n}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&self.data[r * n + c0..r * n + c0 + cols]);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Overwrites the block at `(r0, c0)` with `src`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Self) -> Result<()> {
        let (m, n) = self.dims2()?;
        let (rows, cols) = src.dims2()?;
        if r0 + rows > m || c0 + cols > n {
            return Err(Error::dim("set_block", &self.shape, &src.shape));
        }
        for r in 0..rows {
            let dst = (r0 + r) * n + c0;
            self.data[dst..dst + cols].copy_from_slice(&src.data[r * cols..(r + 1) * cols]);
        }
        Ok(())
    }

    /// Splits along `axis` into `parts` equal pieces.
    pub fn split(&self, axis: usize, parts: usize) -> Result<Vec<Self>> {
        if axis >= self.shape.len() || parts == 0 || !self.shape[axis].is_multiple_of(parts) {
            return Err(Error::Argument(format!(
                "cannot split axis {axis} of shape {:?} into {parts} equal parts",
                self.shape
            )));
        }
        let step = self.shape[axis] / parts;
        (0..parts)
            .map(|p| self.narrow(axis, p * step, step))
            .collect()
    }

    /// Rows selected by `index`, in the given order.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index {
                    what: "rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![index.len(), c],
            data,
        })
    }

    /// `self[index[k], :] += src[k, :]` for every `k`, in ascending `k`.
    pub fn scatter_add_rows(&mut self, index: &[usize], src: &Self) -> Result<()> {
        let (r, c) = self.dims2()?;
        let (sr, sc) = src.dims2()?;
        if sc != c || sr != index.len() {
            return Err(Error::dim("scatter_add_rows", &self.shape, &src.shape));
        }
        for (k, &i) in index.iter().enumerate() {
            if i >= r {
                return Err(Error::Index {
                    what: "rows",
                    index: i,
                    bound: r,
                });
            }
            for (d, &s) in self.data[i * c..(i + 1) * c]
                .iter_mut()
                .zip(&src.data[k * c..(k + 1) * c])
            {
                *d += s;
            }
        }
        Ok(())
    }

    /// Row-wise softmax with the row maximum subtracted before exponentiation.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Gradient through a row softmax: `ds = p * (dp - sum(p * dp))` per row.
    pub fn softmax_rows_backward(probs: &Self, upstream: &Self) -> Result<Self> {
        if probs.shape != upstream.shape {
            return Err(Error::dim(
                "softmax_rows_backward",
                &probs.shape,
                &upstream.shape,
            ));
        }
        let (r, c) = probs.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let p = &probs.data[i * c..(i + 1) * c];
            let g = &upstream.data[i * c..(i + 1) * c];
            let dot = p.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for j in 0..c {
                out[i * c + j] = p[j] * (g[j] - dot);
            }
        }
        Ok(Self {
            shape: probs.shape.clone(),
            data: out,
        })
    }

    /// Exact GeLU `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// `upstream * d gelu(x) / dx` evaluated at `self`.
    pub fn gelu_backward(&self, upstream: &Self) -> Result<Self> {
        self.zip_with(upstream, "gelu_backward", |x, g| g * gelu_derivative(x))
    }

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Places `parts` in order along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of an empty list".into()))?;
    if axis >= first.shape.len() {
        return Err(Error::Argument(format!(
            "axis {axis} out of range for shape {:?}",
            first.shape
        )));
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in parts {
        let ok = p.shape.len() == first.shape.len()
            && p.shape
                .iter()
                .enumerate()
                .all(|(d, &v)| d == axis || v == first.shape[d]);
        if !ok {
            return Err(Error::dim("concat", &first.shape, &p.shape));
        }
        shape[axis] += p.shape[axis];
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Rows of `table` ([vocab, dim]) selected by `ids`.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, _) = table.dims2()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Index {
            what: "vocabulary",
            index: bad,
            bound: vocab,
        });
    }
    table.gather_rows(ids)
}

/// Scatter-add of the lookup gradient into `grad_table`.
pub fn embedding_backward<T: Scalar>(
    grad_table: &mut Tensor<T>,
    ids: &[usize],
    upstream: &Tensor<T>,
) -> Result<()> {
    grad_table.scatter_add_rows(ids, upstream)
}

/// `sum((pred - target)^2) / denom`. `denom` is the element count of the global batch
/// so that per-worker losses and gradients add up to the single-worker values.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, denom: usize) -> Result<T> {
    let diff = pred.sub(target)?;
    let sq = diff.data.iter().fold(T::zero(), |acc, &d| acc + d * d);
    Ok(sq / T::lit(denom as f64))
}

pub fn mse_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    denom: usize,
) -> Result<Tensor<T>> {
    let k = T::lit(2.0 / denom as f64);
    Ok(pred.sub(target)?.scale(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    type T64 = Tensor<f64>;

    fn t(shape: &[usize], v: &[f64]) -> T64 {
        T64::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let i2 = T64::eye(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(a.matmul(&p).unwrap(), t(&[2, 2], &[2.0, 1.0, 4.0, 3.0]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a: T64 = rng.tensor(&[7, 5], -1.0, 1.0);
        let b: T64 = rng.tensor(&[5, 3], -1.0, 1.0);
        let got = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j], acc);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = T64::zeros(&[2, 3]);
        let b = T64::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(err, Error::dim("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = SeededRng::new(3);
        let a: T64 = rng.tensor(&[4, 6], -1.0, 1.0);
        assert_eq!(T64::eye(4).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&T64::eye(6)).unwrap(), a);
    }

    #[test]
    fn concat_cases() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        assert_eq!(concat(std::slice::from_ref(&a), 1).unwrap(), a);
        let b = t(&[2, 3], &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c, t(&[2, 4], &[1.0, 3.0, 4.0, 5.0, 2.0, 6.0, 7.0, 8.0]));
        let ragged = concat(&[T64::zeros(&[2, 1]), T64::zeros(&[3, 1])], 1);
        assert!(matches!(ragged, Err(Error::Dimension { .. })));
    }

    #[test]
    fn split_concat_round_trip() {
        let mut rng = SeededRng::new(11);
        let a: T64 = rng.tensor(&[4, 8], -1.0, 1.0);
        let parts = a.split(1, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert_eq!(concat(&parts, 1).unwrap(), a);
        assert!(a.split(1, 3).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = t(&[1, 4], &[2.0, 2.0, 2.0, 2.0]).softmax_rows().unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = t(&[1, 2], &[0.0, 3f64.ln()]).softmax_rows().unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
        let mut rng = SeededRng::new(5);
        let r: T64 = rng.tensor(&[5, 7], -3.0, 3.0);
        for row in r.softmax_rows().unwrap().data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = t(&[1, 3], &[1000.0, 1000.0, -1000.0])
            .softmax_rows()
            .unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_values() {
        let g = t(&[2], &[0.0, 10.0]).gelu();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 10.0).abs() < 1e-9);
    }

    fn central_rel_err(f: impl Fn(f64) -> f64, x: f64, analytic: f64) -> f64 {
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12)
    }

    #[test]
    fn gelu_backward_matches_finite_difference() {
        let mut rng = SeededRng::new(9);
        let x: T64 = rng.tensor(&[4, 4], -1.0, 1.0);
        let ones = T64::new(vec![4, 4], vec![1.0; 16]).unwrap();
        let d = x.gelu_backward(&ones).unwrap();
        for (&xv, &dv) in x.data().iter().zip(d.data()) {
            let err = central_rel_err(gelu_scalar, xv, dv);
            assert!(err < 1e-6, "x={xv} err={err}");
        }
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let mut rng = SeededRng::new(13);
        let s: T64 = rng.tensor(&[3, 5], -1.0, 1.0);
        let w: T64 = rng.tensor(&[3, 5], -1.0, 1.0);
        let p = s.softmax_rows().unwrap();
        let ds = T64::softmax_rows_backward(&p, &w).unwrap();
        let loss = |x: &T64| x.softmax_rows().unwrap().mul(&w).unwrap().sum();
        for idx in 0..15 {
            let f = |v: f64| {
                let mut y = s.clone();
                y.data_mut()[idx] = v;
                loss(&y)
            };
            let err = central_rel_err(f, s.data()[idx], ds.data()[idx]);
            assert!(err < 1e-6, "idx={idx} err={err}");
        }
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let table = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out, t(&[3, 2], &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]));
        let err = embedding_lookup(&table, &[3]).unwrap_err();
        assert_eq!(
            err,
            Error::Index {
                what: "vocabulary",
                index: 3,
                bound: 3
            }
        );
        let mut g = T64::zeros(&[3, 2]);
        embedding_backward(
            &mut g,
            &[2, 0, 2],
            &t(&[3, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]),
        )
        .unwrap();
        assert_eq!(g, t(&[3, 2], &[2.0, 2.0, 0.0, 0.0, 4.0, 4.0]));
    }

    #[test]
    fn mse_gradient_matches_finite_difference() {
        let mut rng = SeededRng::new(17);
        let p: T64 = rng.tensor(&[2, 3], -1.0, 1.0);
        let target: T64 = rng.tensor(&[2, 3], -1.0, 1.0);
        let g = mse_grad(&p, &target, 12).unwrap();
        for idx in 0..6 {
            let f = |v: f64| {
                let mut y = p.clone();
                y.data_mut()[idx] = v;
                mse_loss(&y, &target, 12).unwrap()
            };
            assert!(central_rel_err(f, p.data()[idx], g.data()[idx]) < 1e-6);
        }
    }

    #[test]
    fn reductions_and_windows() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.sum_rows().unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.sum_cols().unwrap().data(), &[6.0, 15.0]);
        assert_eq!(a.transpose().unwrap().shape(), &[3, 2]);
        let mut z = T64::zeros(&[2, 3]);
        z.write_window(1, 1, &a.narrow(1, 1, 2).unwrap()).unwrap();
        assert_eq!(z, t(&[2, 3], &[0.0, 2.0, 3.0, 0.0, 5.0, 6.0]));
    }

    #[test]
    fn f32_kernels_run() {
        let a = Tensor::<f32>::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap();
        let p = a.softmax_rows().unwrap();
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
        assert_eq!(p.bytes(), 8);
    }

    proptest! {
        #[test]
        fn concat_split_inverse(rows in 1usize..5, parts in 1usize..5, width in 1usize..4, axis in 0usize..2, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let shape = if axis == 0 { [rows * parts, width] } else { [rows, width * parts] };
            let a: T64 = rng.tensor(&shape, -1.0, 1.0);
            let pieces = a.split(axis, parts).unwrap();
            prop_assert_eq!(concat(&pieces, axis).unwrap(), a);
        }

        #[test]
        fn finite_inputs_stay_finite(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a: T64 = rng.tensor(&[3, 4], -5.0, 5.0);
            let b: T64 = rng.tensor(&[4, 2], -5.0, 5.0);
            prop_assert!(a.matmul(&b).unwrap().all_finite());
            prop_assert!(a.softmax_rows().unwrap().all_finite());
            prop_assert!(a.gelu().all_finite());
        }
    }
}
