//! Dense linear algebra and scalar primitives shared by every other module.
//!
//! Everything is `f64`. Vectors and matrices are thin owned wrappers around
//! `Vec<f64>` that deref to slices, so the free functions here take plain
//! slices and work on either.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{DplError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        DenseVector(vec![0.0; len])
    }

    /// Wrap values without validation.
    pub fn from_vec(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    /// Wrap values, rejecting NaN and infinities.
    pub fn try_from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DplError::Numeric(format!(
                "non-finite entry {} at position {pos}",
                values[pos]
            )));
        }
        Ok(DenseVector(values))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        DenseVector(v)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = String;

    fn try_from(raw: RawMatrix) -> std::result::Result<Self, String> {
        DenseMatrix::from_vec(raw.rows, raw.cols, raw.values).map_err(|e| e.to_string())
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(DplError::Dimension {
                context: "matrix storage",
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(DplError::Dimension {
                    context: "matrix row",
                    expected: cols,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(DplError::Dimension {
                context: "matrix-vector product",
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok(self
            .row_iter()
            .map(|row| dot(row, x))
            .collect::<Vec<_>>()
            .into())
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<DenseVector> {
        if y.len() != self.rows {
            return Err(DplError::Dimension {
                context: "transposed matrix-vector product",
                expected: self.rows,
                found: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.row_iter().zip(y) {
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * yr;
            }
        }
        Ok(out.into())
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            for (m, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *m += s * vc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_same_len(context: &'static str, u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(DplError::Dimension {
            context,
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<DenseVector> {
    if v.is_empty() {
        return Err(DplError::Dimension {
            context: "softmax input",
            expected: 1,
            found: 0,
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out.into())
}

/// `log softmax(v)`, computed as `v - max - ln Σ exp(v - max)`.
pub fn log_softmax(v: &[f64]) -> Result<DenseVector> {
    if v.is_empty() {
        return Err(DplError::Dimension {
            context: "log-softmax input",
            expected: 1,
            found: 0,
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x - max - lse).collect::<Vec<_>>().into())
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    check_same_len("euclidean distance", u, v)?;
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn l2_normalize(v: &[f64]) -> Result<DenseVector> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(DplError::Degenerate(format!(
            "cannot normalize a vector of norm {n}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect::<Vec<_>>().into())
}

/// `ln(1 + eˣ)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid; the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`.
///
/// Coordinate `i` is `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h`. The probe point is
/// restored exactly after each coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<DenseVector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(DplError::Config(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DplError::Numeric(format!(
                "objective not finite around coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_logs_recovers_ratios() {
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(DplError::Dimension { .. })));
    }

    #[test]
    fn distances() {
        assert!(
            (euclidean_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.4142135624).abs() < 1e-10
        );
        assert_eq!(euclidean_distance(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normalize() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(u.as_slice(), &[0.0, 1.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(DplError::Degenerate(_))
        ));
    }

    #[test]
    fn finite_differences_are_exact_on_low_degree_polynomials() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -1.0], 1e-5).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 3.0], 1e-3).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn finite_differences_report_non_finite_objective() {
        let r = finite_diff_grad(|x| (x[0]).ln(), &[0.0], 1e-3);
        assert!(matches!(r, Err(DplError::Numeric(_))));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn softplus_and_sigmoid() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert_eq!(softplus(800.0), 800.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn matrix_products() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap().as_slice(), &[3.0, 7.0, 11.0]);
        assert_eq!(
            m.matvec_transposed(&[1.0, 0.0, 1.0]).unwrap().as_slice(),
            &[6.0, 8.0]
        );
        let mut z = DenseMatrix::zeros(2, 2);
        z.add_outer(2.0, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(z.values(), &[6.0, 8.0, 12.0, 16.0]);
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..40)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
            c in prop::collection::vec(-10.0f64..10.0, 5),
        ) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..30)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((u.norm() - 1.0).abs() < 1e-12);
        }
    }
}
