//! Dense row-major f32 tensors and the handful of kernels everything else
//! is built from.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense tensor of 32-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let n = rows.len();
        let m = if n == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }

    /// Normal(0, std) init, the default for projection weights.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("rank-{} tensor has no column view", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let m = self.cols();
        &mut self.data[i * m..(i + 1) * m]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

fn check_axis(op: &'static str, axis: usize, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            got,
        })
    }
}

/// C = A [n×k] · B [k×m]. Saxpy (i-k-j) order so the inner loop vectorizes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    check_axis("matmul", 0, k, b.rows())?;
    let m = b.cols();
    let mut c = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue; // one-hot inputs make many rows sparse
            }
            let b_row = b.row(p);
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
    Ok(c)
}

/// Dot product with independent lanes so the reduction vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let i = c * LANES;
        let (xa, xb) = (&a[i..i + LANES], &b[i..i + LANES]);
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for i in chunks * LANES..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// C = A [n×k] · Bᵀ where B is [m×k]; rows of both operands are contiguous.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    check_axis("matmul_nt", 1, k, b.cols())?;
    let m = b.rows();
    let mut c = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (j, c_v) in c_row.iter_mut().enumerate() {
            *c_v = dot(a_row, b.row(j));
        }
    }
    Ok(c)
}

/// Explicit transpose of a matrix.
pub fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..n {
        let row = a.row(i);
        for (j, &v) in row.iter().enumerate() {
            out.data[j * n + i] = v;
        }
    }
    out
}

/// C = Aᵀ · B where A is [k×n], B is [k×m]; used for weight gradients.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, n) = (a.rows(), a.cols());
    check_axis("matmul_tn", 0, k, b.rows())?;
    let m = b.cols();
    let mut c = Tensor::zeros(vec![n, m]);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = c.row_mut(i);
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_pi * b_v;
            }
        }
    }
    Ok(c)
}

/// Numerically stable softmax over a single logit vector.
/// Max-subtraction makes it shift-invariant and overflow-free.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Argmax with lowest-index tie-break.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-form gaussian error linear unit, the transformer feed-forward activation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = matmul(&x, &eye).unwrap();
        assert_eq!(y.data, vec![1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_error_names_axis() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 0"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let b = Tensor::new(vec![2, 3], vec![0.5, 1.5, -0.5, 1.0, 0.0, -1.0]);
        let c = matmul_nt(&a, &b).unwrap();
        // rows of b as columns
        let bt = Tensor::new(vec![3, 2], vec![0.5, 1.0, 1.5, 0.0, -0.5, -1.0]);
        let c2 = matmul(&a, &bt).unwrap();
        assert_eq!(c.data, c2.data);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.5]);
        let c = matmul_tn(&a, &b).unwrap();
        let at = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let c2 = matmul(&at, &b).unwrap();
        assert_eq!(c.data, c2.data);
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0; 5]);
        for v in p {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_saturation_no_overflow() {
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1] < 1e-6);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[(2.0f32).ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[0.3, -1.2, 2.5]);
        let b = softmax(&[0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 2.0, 0.3, 0.3, 0.1]), 1);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-2.0f32, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_derivative(x) - fd).abs() < 1e-3,
                "x={x}: {} vs {}",
                gelu_derivative(x),
                fd
            );
        }
    }
}
