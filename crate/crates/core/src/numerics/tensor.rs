//! Dense row-major f64 tensors.
//!
//! `Tensor` is the plain value type shared by every stage: images, detector
//! features, weight matrices, logits. It carries no autodiff state — the
//! tape in [`super::graph`] owns gradients. Constructors validate shape and
//! finiteness so that a tensor, once built, always holds finite values.

use super::NumericsError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `values` matches the shape product and
    /// contains only finite numbers.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor, NumericsError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected == 0 {
            return Err(NumericsError::InvalidArg {
                what: format!("tensor shape {shape:?} has zero elements"),
            });
        }
        if values.len() != expected {
            return Err(NumericsError::InvalidArg {
                what: format!(
                    "shape {shape:?} expects {expected} values, got {}",
                    values.len()
                ),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: format!("Tensor::new (index {bad})"),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(n > 0, "zero-element tensor shape {shape:?}");
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        assert!(v.is_finite(), "non-finite scalar {v}");
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows / columns for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.shape.len() == 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.values.len() == 1, "item() on shape {:?}", self.shape);
        self.values[0]
    }

    /// Consumes the tensor, returning its backing storage.
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Internal constructor for op outputs; panics on non-finite values so
    /// numerical blow-ups surface at their source instead of ten stages later.
    pub(crate) fn from_op(op: &str, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            panic!("non-finite value produced by op `{op}` at flat index {bad}");
        }
        Tensor { shape, values }
    }
}

/// Row-major matrix product of `[m,k] x [k,n]`, written with the k-loop in
/// the middle so the inner loop streams both `b` and `out` contiguously.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out += a^T * b` for `a: [m,k]`, `b: [m,n]`, `out: [k,n]` — the gradient
/// of a matmul with respect to its right operand, accumulated in place.
pub(crate) fn matmul_at_b_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` for `a: [m,n]`, `b: [k,n]`, `out: [m,k]` — the gradient
/// of a matmul with respect to its left operand, accumulated in place.
pub(crate) fn matmul_a_bt_accum(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sum(exp(row))) with the max-shift trick; also returns the max.
pub(crate) fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
    (mx + sum.ln(), mx)
}
