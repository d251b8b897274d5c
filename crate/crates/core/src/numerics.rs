//! Dense tensor primitives, their vector-Jacobian products, and a
//! central-difference gradient checker.
//!
//! Differentiation is done with hand-derived adjoints: every forward
//! primitive that sits on a learnable path has a matching `*_vjp` that maps
//! an output cotangent to input cotangents. Callers compose them in reverse
//! order of the forward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                format!("{expected} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    /// Number of rows; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Length of one row (product of all trailing dimensions).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        Ok(())
    }

    /// Converts to another scalar type (rounding when narrowing).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `y += a * x`
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NumericFailure("non-finite norm".into()));
    }
    if n <= T::lit(NORM_EPS) {
        return Err(Error::DegenerateInput(format!("vector norm {n} below {NORM_EPS}")));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Adjoint of [`l2_normalize`]: `(g − y·(y·g)) / ‖v‖` with `y = v/‖v‖`.
pub fn l2_normalize_vjp<T: Scalar>(v: &[T], grad_out: &[T]) -> Vec<T> {
    let n = norm(v);
    let y: Vec<T> = v.iter().map(|&x| x / n).collect();
    let yg = dot(&y, grad_out);
    grad_out.iter().zip(&y).map(|(&g, &yi)| (g - yi * yg) / n).collect()
}

/// Row-wise normalization of a matrix.
pub fn l2_normalize_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(m.len());
    for row in m.row_iter() {
        out.extend(l2_normalize(row)?);
    }
    Tensor::new(m.shape().to_vec(), out)
}

pub fn l2_normalize_rows_vjp<T: Scalar>(m: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(m.len());
    for (row, g) in m.row_iter().zip(grad_out.row_iter()) {
        out.extend(l2_normalize_vjp(row, g));
    }
    Tensor { shape: m.shape.clone(), data: out }
}

/// Row-wise softmax of `m / temperature`, max-subtracted per row.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if !m.is_finite() {
        return Err(Error::NumericFailure("softmax input is not finite".into()));
    }
    let mut out = m.clone();
    for row in out.data.chunks_mut(m.cols()) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = ((*x - max) / temperature).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Ok(out)
}

/// Adjoint of [`softmax_rows`] given its output `p`:
/// `dz_ij = p_ij (g_ij − Σ_k p_ik g_ik) / τ`.
pub fn softmax_rows_vjp<T: Scalar>(p: &Tensor<T>, grad_out: &Tensor<T>, temperature: T) -> Tensor<T> {
    let mut out = Vec::with_capacity(p.len());
    for (prow, grow) in p.row_iter().zip(grad_out.row_iter()) {
        let inner = dot(prow, grow);
        out.extend(prow.iter().zip(grow).map(|(&pi, &gi)| pi * (gi - inner) / temperature));
    }
    Tensor { shape: p.shape.clone(), data: out }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!("inner dimension {k}"), format!("{k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a.row(i).iter().enumerate() {
            axpy(aip, b.row(p), orow);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a (m×k) · bᵀ` with `b` stored as `n×k`.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!("row length {}", a.cols()), format!("{}", b.cols())));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for ar in a.row_iter() {
        out.extend(b.row_iter().map(|br| dot(ar, br)));
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` with `a` stored as `k×m` and `b` as `k×n`.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rows() != b.rows() {
        return Err(Error::shape(format!("{} rows", a.rows()), format!("{} rows", b.rows())));
    }
    let (m, n) = (a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    for (ar, br) in a.row_iter().zip(b.row_iter()) {
        for (i, &aki) in ar.iter().enumerate() {
            axpy(aki, br, &mut out[i * n..(i + 1) * n]);
        }
    }
    Tensor::matrix(m, n, out)
}

/// Adjoint of [`matmul`]: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_vjp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_bt(grad_out, b)?, matmul_at(a, grad_out)?))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.check_same_shape(b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|x| x * factor)
}

pub fn exp<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(T::exp)
}

/// Adjoint of [`exp`] given its output.
pub fn exp_vjp<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: out.shape.clone(),
        data: out.data.iter().zip(&grad_out.data).map(|(&y, &g)| y * g).collect(),
    }
}

/// Mean over rows: `N×D → D`.
pub fn mean_rows<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for row in m.row_iter() {
        axpy(T::one(), row, &mut out);
    }
    let n = T::lit(m.rows() as f64);
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Adjoint of [`mean_rows`]: every row receives `g / N`.
pub fn mean_rows_vjp<T: Scalar>(rows: usize, grad_out: &[T]) -> Tensor<T> {
    let n = T::lit(rows as f64);
    let row: Vec<T> = grad_out.iter().map(|&g| g / n).collect();
    let data = std::iter::repeat_n(row, rows).flatten().collect();
    Tensor { shape: vec![rows, grad_out.len()], data }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T], step: T) -> Result<Vec<T>> {
    if !(step > T::zero()) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    let two = T::lit(2.0);
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let plus = f(&probe);
        probe[k] = x[k] - step;
        let minus = f(&probe);
        probe[k] = x[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericFailure(format!("objective not finite around coordinate {k}")));
        }
        grad.push((plus - minus) / (two * step));
    }
    Ok(grad)
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub passed: bool,
    /// Largest `|a − n| / max(|a|, |n|)` over all coordinates (0 where both vanish).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest violation ratio `|a − n| / (atol + rtol·max(|a|,|n|))`.
    pub worst_index: Option<usize>,
}

/// Passes iff `|a_k − n_k| ≤ atol + rtol·max(|a_k|, |n_k|)` for every `k`.
pub fn check_gradients<T: Scalar>(analytic: &[T], numeric: &[T], rtol: f64, atol: f64) -> Result<GradientReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::invalid(format!(
            "gradient lengths differ: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut report = GradientReport { passed: true, max_rel_error: 0.0, max_abs_error: 0.0, worst_index: None };
    let mut worst_ratio = f64::NEG_INFINITY;
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let bound = atol + rtol * scale;
        if !(diff <= bound) {
            report.passed = false;
        }
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.max_rel_error = report.max_rel_error.max(rel);
        report.max_abs_error = report.max_abs_error.max(diff);
        let ratio = if bound > 0.0 { diff / bound } else if diff > 0.0 { f64::INFINITY } else { 0.0 };
        if ratio > worst_ratio || ratio.is_nan() {
            worst_ratio = ratio;
            report.worst_index = Some(k);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let p = softmax_rows(&mat(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_equal_pair_at_low_temperature() {
        for c in [-1e3, -1.0, 0.0, 0.7, 1e3] {
            let p = softmax_rows(&mat(&[&[c, c]]), 0.02).unwrap();
            assert_eq!(p.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        let p = softmax_rows(&mat(&[&[2f64.ln(), 0.0]]), 1.0).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let m = mat(&[&[1.0, 2.0]]);
        assert!(matches!(softmax_rows(&m, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_rows(&m, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_survives_overflow_scale() {
        let p = softmax_rows(&mat(&[&[0.9, 0.1, 1000.0]]), 0.02).unwrap();
        assert!(p.is_finite());
        assert_eq!(p.get(0, 2), 1.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.5, -2.0, 0.25]).unwrap(), l2_normalize(&[3.0, -4.0, 0.5]).unwrap());
        assert!(matches!(l2_normalize(&[0.0, 1e-14]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x: &[f64]| x[0] * x[0], &[1.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        let g = finite_diff_grad(|_: &[f64]| 4.0, &[1.0, -3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_grad(|x: &[f64]| x[0].exp(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let r = finite_diff_grad(|x: &[f64]| (x[0]).ln(), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NumericFailure(_))));
    }

    #[test]
    fn check_gradient_examples() {
        let r = check_gradients(&[1.0, -2.0], &[1.0, -2.0], 1e-4, 1e-7).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);

        let r = check_gradients(&[1.0], &[1.5], 0.1, 0.0).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(0));

        let r = check_gradients(&[0.0], &[1e-9], 0.0, 1e-8).unwrap();
        assert!(r.passed);

        assert!(matches!(check_gradients(&[0.0], &[0.0, 1.0], 0.1, 0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = mat(&[&[1.0, 0.5, -1.0], &[2.0, 0.0, 1.0]]);
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[3, 3]);
        assert_eq!(ab.row(0), &[5.0, 0.5, 1.0]);
        let bt = mat(&[&[1.0, 2.0], &[0.5, 0.0], &[-1.0, 1.0]]);
        assert_eq!(matmul_bt(&a, &bt).unwrap(), ab);
        let at = mat(&[&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]]);
        assert_eq!(matmul_at(&at, &b).unwrap(), ab);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
        assert!(add(&Tensor::<f64>::zeros(vec![2]), &Tensor::zeros(vec![3])).is_err());
    }
}
