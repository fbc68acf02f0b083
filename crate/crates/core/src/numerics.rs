//! Dense tensors and scalar Gaussian primitives.
//!
//! Everything downstream works on [`Tensor`]: a row-major `f64` buffer with an
//! explicit shape. Files store weights as little-endian `f32`; they are widened
//! to `f64` on load because the variance recursions are subtraction-heavy and
//! bleed precision in 32-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor shape must have at least one dimension".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("tensor shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterprets the buffer under a new shape of identical element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Elementwise sum. Shapes must match exactly; no broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise square.
    pub fn square(&self) -> Tensor {
        let data = self.data.iter().map(|a| a * a).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Applies `f` to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One independent Gaussian component: mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianScalar {
    pub mean: f64,
    pub var: f64,
}

impl GaussianScalar {
    pub fn new(mean: f64, var: f64) -> Self {
        GaussianScalar { mean, var }
    }

    /// Clamps the variance from below.
    pub fn floored(self, floor: f64) -> Self {
        GaussianScalar { mean: self.mean, var: self.var.max(floor) }
    }
}

pub(crate) const INV_SQRT_2PI: f64 = 0.3989422804014327;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub(crate) fn pdf_raw(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn cdf_raw(x: f64) -> f64 {
    // erfc form keeps full precision in both tails.
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density at `x`.
pub fn std_normal_pdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Numeric(format!("std_normal_pdf: non-finite input {x}")));
    }
    Ok(pdf_raw(x))
}

/// Standard normal cumulative distribution at `x`.
///
/// Absolute error is below 1e-12 over the whole real line (checked against a
/// high-precision reference table in the tests).
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Numeric(format!("std_normal_cdf: non-finite input {x}")));
    }
    Ok(cdf_raw(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn pdf_known_values() {
        assert_eq!(std_normal_pdf(0.0).unwrap(), 0.3989422804014327);
        let p1 = std_normal_pdf(1.0).unwrap();
        assert!((p1 - 0.24197072451914337).abs() < 1e-16);
        assert_eq!(std_normal_pdf(-1.0).unwrap(), p1);
    }

    #[test]
    fn pdf_rejects_non_finite() {
        assert!(std_normal_pdf(f64::NAN).is_err());
        assert!(std_normal_pdf(f64::INFINITY).is_err());
    }

    #[test]
    fn cdf_known_values() {
        assert_eq!(std_normal_cdf(0.0).unwrap(), 0.5);
        assert!(std_normal_cdf(8.0).unwrap() >= 1.0 - 1e-15);
        // 97.5% quantile, reference value from a 50-digit erf evaluation.
        let q = std_normal_cdf(1.959963985).unwrap();
        assert!((q - 0.975).abs() < 1e-9, "cdf(1.959963985) = {q}");
    }

    // Reference values computed with a 50-digit arbitrary-precision erfc.
    const CDF_TABLE: &[(f64, f64)] = &[
        (-8.0, 6.2209605742717841e-16),
        (-6.0, 9.8658764503769814e-10),
        (-5.0, 2.8665157187919391e-7),
        (-4.0, 3.1671241833119921e-5),
        (-3.0, 0.0013498980316300945),
        (-2.5, 0.0062096653257761352),
        (-2.0, 0.022750131948179207),
        (-1.5, 0.066807201268858066),
        (-1.0, 0.15865525393145705),
        (-0.5, 0.3085375387259869),
        (-0.25, 0.40129367431707628),
        (-0.1, 0.46017216272297102),
        (0.1, 0.53982783727702898),
        (0.25, 0.59870632568292372),
        (0.5, 0.6914624612740131),
        (1.0, 0.84134474606854295),
        (1.5, 0.93319279873114193),
        (2.0, 0.97724986805182079),
        (2.5, 0.99379033467422386),
        (3.0, 0.99865010196836991),
        (4.0, 0.99996832875816688),
        (5.0, 0.99999971334842812),
        (6.0, 0.99999999901341235),
        (8.0, 0.99999999999999938),
    ];

    #[test]
    fn cdf_matches_reference_within_1e12() {
        for &(x, want) in CDF_TABLE {
            let got = std_normal_cdf(x).unwrap();
            assert!(
                (got - want).abs() <= 1e-12,
                "cdf({x}) = {got}, reference {want}"
            );
        }
    }

    #[test]
    fn cdf_symmetry_sums_to_one() {
        let mut s = Stream::new(11, 0, 0);
        for _ in 0..10_000 {
            let x = 16.0 * s.next_f64() - 8.0;
            let total = cdf_raw(x) + cdf_raw(-x);
            assert!((total - 1.0).abs() <= 1e-12, "cdf({x}) + cdf({-x}) = {total}");
        }
    }

    #[test]
    fn pdf_is_cdf_derivative() {
        let mut s = Stream::new(12, 0, 0);
        let h = 1e-5;
        for _ in 0..100_000 {
            let x = 16.0 * s.next_f64() - 8.0;
            let fd = (cdf_raw(x + h) - cdf_raw(x - h)) / (2.0 * h);
            assert!(
                (pdf_raw(x) - fd).abs() <= 1e-6,
                "pdf({x}) = {} vs finite difference {fd}",
                pdf_raw(x)
            );
        }
    }

    #[test]
    fn cdf_monotone_on_sorted_input() {
        let mut s = Stream::new(13, 0, 0);
        let mut xs: Vec<f64> = (0..1000).map(|_| 20.0 * s.next_f64() - 10.0).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for x in xs {
            let c = cdf_raw(x);
            assert!(c >= prev, "cdf not monotone at {x}");
            prev = c;
        }
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(Tensor::from_slice(&[-2.0, 3.0]).square().data(), &[4.0, 9.0]);
        let ones = Tensor::full(vec![2], 1.0).unwrap();
        assert_eq!(a.mul(&ones).unwrap(), a);
        let c = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        assert!(a.add(&c).is_err());
    }
}
