// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f32` tensors and the handful of kernels the encoder and probes need.
//!
//! Every kernel is a pure function. Reductions accumulate in `f64` with a
//! fixed summation order per shape, so the same inputs always give
//! bitwise-identical outputs regardless of how many rayon workers run.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major `f32` tensor with a validated shape and finite contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-empty, positive, matches
    /// `data.len()`, and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be a non-empty list of positive sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: format!("tensor element {i}"),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    /// Rank-1 tensor over a slice.
    pub fn from_slice(values: &[f32]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of vectors along the last axis.
    pub fn n_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    /// The `i`-th vector along the last axis.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, f32> {
        self.data.chunks(self.last_dim())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Slice along the first axis, dropping that axis.
    pub fn index_first(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(Error::Dimension(format!(
                "index {i} out of range for shape {:?}",
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[i * stride..(i + 1) * stride].to_vec(),
        )
    }

    /// Builds a tensor from values computed in higher precision, failing on
    /// any non-finite result. `location` names the kernel for the error.
    pub(crate) fn from_f64(shape: Vec<usize>, values: Vec<f64>, location: &str) -> Result<Self> {
        let data: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: location.to_string(),
            });
        }
        Self::new(shape, data)
    }

    /// Constructor for kernel outputs that are finite by construction.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// Dot product accumulated in `f64` over four interleaved lanes.
///
/// Lane assignment depends only on the index, so the summation order is a
/// function of the length alone.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dot product of an `f32` slice with an `f64` slice.
pub fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}

fn as_matrix(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{name} must be rank 2, got {s:?}"))),
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "lhs")?;
    let (k2, n) = as_matrix(b, "rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    // Transpose once so every output element is a contiguous dot product.
    let mut bt = vec![0.0f32; k * n];
    for (r, row) in b.rows().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            bt[c * k + r] = v;
        }
    }
    let out: Vec<f64> = a
        .data()
        .par_chunks(k)
        .flat_map_iter(|ar| bt.chunks(k).map(move |bc| dot(ar, bc)))
        .collect();
    Tensor::from_f64(vec![m, n], out, "matmul")
}

/// Affine map `x · wᵀ + bias` for `x[n×k]` and `w[m×k]` (PyTorch linear layout).
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, k) = as_matrix(x, "input")?;
    let (m, k2) = as_matrix(w, "weight")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "linear: input width {k} but weight is {m}x{k2}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::Dimension(format!(
                "linear: bias shape {:?}, expected [{m}]",
                b.shape()
            )));
        }
    }
    let out: Vec<f64> = x
        .data()
        .par_chunks(k)
        .flat_map_iter(|xr| {
            w.rows().enumerate().map(move |(j, wr)| {
                dot(xr, wr) + bias.map_or(0.0, |b| b.data()[j] as f64)
            })
        })
        .collect();
    Tensor::from_f64(vec![n, m], out, "linear")
}

/// Normalizes each last-axis vector to zero mean and unit variance, then
/// scales by `gamma` and shifts by `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension(format!(
            "layer_norm: last dim {d}, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v as f64 - mean) * inv * g as f64 + b as f64);
        }
    }
    Tensor::from_f64(x.shape().to_vec(), out, "layer_norm")
}

/// Max-subtracted softmax over each last-axis vector.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out)
}

/// Exact (erf-based) Gaussian error linear unit.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Elementwise [`gelu_scalar`].
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v as f64) as f32).collect();
    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
}

/// Elementwise sum of two equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 + y as f64)
        .collect();
    Tensor::from_f64(a.shape().to_vec(), data, "add")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::NAN]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn identity_matmul_is_exact() {
        let a = random(&[3, 3], 1);
        let i = Tensor::identity(3).unwrap();
        assert_eq!(matmul(&i, &a).unwrap(), a);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 1]);
        assert_eq!(c.data(), [2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[7, 5], 2);
        let b = random(&[5, 3], 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                assert!((c.data()[i * 3 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = random(&[2, 3], 4);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let x = random(&[4, 6], 5);
        let w = random(&[3, 6], 6);
        let b = random(&[3], 7);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect = dot(x.row(i), w.row(j)) + b.data()[j] as f64;
                assert!((y.data()[i * 3 + j] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::new(vec![4], vec![3.0; 4]).unwrap();
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_scalar_loop() {
        let x = random(&[4, 8], 8);
        let g = random(&[8], 9);
        let b = random(&[8], 10);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
            let mut mean = 0.0;
            for v in &row {
                mean += v;
            }
            mean /= 8.0;
            let mut var = 0.0;
            for v in &row {
                var += (v - mean) * (v - mean);
            }
            var /= 8.0;
            for c in 0..8 {
                let expect = (row[c] - mean) / (var + 1e-6).sqrt() * g.data()[c] as f64
                    + b.data()[c] as f64;
                assert!((y.data()[r * 8 + c] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax_rows(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let y = softmax_rows(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        let x = random(&[1, 9], 11);
        let y = softmax_rows(&x);
        // Plain exponentials without max subtraction are safe for |x| < 2.
        let exps: Vec<f64> = x.data().iter().map(|&v| (v as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in y.data().iter().zip(&exps) {
            assert!((*got as f64 - e / total).abs() < 1e-6);
        }
    }

    /// Maclaurin series for erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0u32;
        while term.abs() > 1e-18 {
            sum += term / (2 * n + 1) as f64;
            n += 1;
            term *= -x * x / n as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        let t = gelu(&Tensor::from_slice(&[1.0]).unwrap());
        assert!((t.data()[0] as f64 - oracle).abs() < 1e-6);
        assert!((gelu_scalar(1.0) - oracle).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_bitwise_deterministic() {
        let a = random(&[33, 17], 12);
        let b = random(&[17, 19], 13);
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        assert_eq!(softmax_rows(&a), softmax_rows(&a));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e4f32..1e4, 1..40)) {
            let t = Tensor::from_slice(&v).unwrap();
            let s: f64 = softmax_rows(&t).data().iter().map(|&x| x as f64).sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
