//! Dense vector math, the temperature similarity kernel, optimization and
//! gradient validation.
//!
//! Everything here is generic over [`Scalar`] so the same kernels run in
//! `f32` (storage-width experiments) and `f64` (training and gradient checks).

mod adam;
mod gradcheck;
mod matrix;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, cosine_lr, AdamConfig, OptimizerState};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use matrix::Matrix;
pub use rng::RngStream;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Floating point element type used by every kernel in the crate.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for types that cannot hold it,
    /// which never happens for `f32`/`f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }

    /// Rounds through `f32`, the on-disk width.
    fn quantize(self) -> Self {
        Self::lit(self.as_f64() as f32 as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("vector is empty")]
    EmptyVector,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("loss is not finite at coordinate {0}")]
    NonFiniteLoss(usize),
}

pub(crate) fn shape_mismatch(expected: impl Display, found: impl Display) -> NumericsError {
    NumericsError::ShapeMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// A dense real vector with at least one entry and only finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct Embedding<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::EmptyVector);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { values })
    }

    /// Unit vector along axis `axis`.
    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut values = vec![T::zero(); dim];
        values[axis] = T::one();
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm().as_f64() - 1.0).abs() <= tol
    }

    pub fn dot(&self, other: &Self) -> Result<T, NumericsError> {
        check_len(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn cosine(&self, other: &Self) -> Result<T, NumericsError> {
        check_len(self.dim(), other.dim())?;
        cosine(&self.values, &other.values)
    }

    pub fn cast<U: Scalar>(&self) -> Embedding<U> {
        Embedding {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for Embedding<T> {
    type Error = NumericsError;

    fn try_from(values: Vec<T>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl<T: Scalar> From<Embedding<T>> for Vec<T> {
    fn from(e: Embedding<T>) -> Self {
        e.values
    }
}

impl<T: Scalar> AsRef<[T]> for Embedding<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<(), NumericsError> {
    if expected == found {
        Ok(())
    } else {
        Err(shape_mismatch(
            format!("length {expected}"),
            format!("length {found}"),
        ))
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `v / ‖v‖₂` on a raw slice.
pub fn normalize_slice<T: Scalar>(v: &[T]) -> Result<Vec<T>, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::EmptyVector);
    }
    let n = norm(v);
    if !(n.as_f64() >= ZERO_NORM) {
        return Err(NumericsError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn l2_normalize<T: Scalar>(v: &Embedding<T>) -> Result<Embedding<T>, NumericsError> {
    Ok(Embedding {
        values: normalize_slice(&v.values)?,
    })
}

/// Cosine similarity of two raw slices of equal length.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T, NumericsError> {
    let na = norm(a);
    let nb = norm(b);
    if !(na.as_f64() >= ZERO_NORM && nb.as_f64() >= ZERO_NORM) {
        return Err(NumericsError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
pub fn cosine_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>, Vec<T>), NumericsError> {
    let na = norm(a);
    let nb = norm(b);
    if !(na.as_f64() >= ZERO_NORM && nb.as_f64() >= ZERO_NORM) {
        return Err(NumericsError::ZeroVector);
    }
    let c = dot(a, b) / (na * nb);
    // d cos / da = b/(|a||b|) - cos * a/|a|^2
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    Ok((c, ga, gb))
}

/// The contrastive kernel `exp(cos(a, b) / λ)`.
pub fn temp_similarity<T: Scalar>(
    a: &Embedding<T>,
    b: &Embedding<T>,
    temperature: T,
) -> Result<T, NumericsError> {
    if !(temperature > T::zero()) {
        return Err(NumericsError::InvalidTemperature(temperature.as_f64()));
    }
    Ok((a.cosine(b)? / temperature).exp())
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub(crate) fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = xs.map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding<f64> {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_pythagorean() {
        let out = l2_normalize(&emb(&[3.0, 4.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_basis_is_identity() {
        let e1 = Embedding::<f64>::basis(5, 0);
        assert_eq!(l2_normalize(&e1).unwrap(), e1);
    }

    #[test]
    fn normalize_random_64_matches_extended_precision_norm() {
        let mut rng = RngStream::new(11);
        let v = emb(&rng.normal_vec(64, 1.0));
        let out = l2_normalize(&v).unwrap();
        // Kahan-compensated sum of squares as the reference accumulator.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &x in out.as_slice() {
            let y = x * x - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        assert!((sum.sqrt() - 1.0).abs() <= 1e-9);
        // Direction preserved.
        assert!((out.cosine(&v).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        assert_eq!(
            l2_normalize(&emb(&[0.0, 0.0])),
            Err(NumericsError::ZeroVector)
        );
        assert_eq!(
            l2_normalize(&emb(&[1e-13, 0.0])),
            Err(NumericsError::ZeroVector)
        );
    }

    #[test]
    fn embedding_rejects_nonfinite_and_empty() {
        assert_eq!(
            Embedding::<f64>::new(vec![]),
            Err(NumericsError::EmptyVector)
        );
        assert_eq!(
            Embedding::new(vec![1.0, f64::NAN]),
            Err(NumericsError::NonFinite(1))
        );
    }

    #[test]
    fn similarity_identical_vectors() {
        let a = emb(&[0.3, -1.2, 2.0]);
        let s = temp_similarity(&a, &a, 0.1).unwrap();
        assert!((s - 22026.465794806718).abs() < 1e-8);
    }

    #[test]
    fn similarity_orthogonal_is_one() {
        let a = emb(&[1.0, 0.0]);
        let b = emb(&[0.0, 2.0]);
        assert_eq!(temp_similarity(&a, &b, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn similarity_matches_scalar_loop() {
        let mut rng = RngStream::new(5);
        let a = rng.normal_vec(16, 1.0);
        let b = rng.normal_vec(16, 1.0);
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for i in 0..16 {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        let expected = (ab / (aa.sqrt() * bb.sqrt()) / 0.1).exp();
        let got = temp_similarity(&emb(&a), &emb(&b), 0.1).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn similarity_rejects_bad_temperature() {
        let a = emb(&[1.0]);
        assert!(matches!(
            temp_similarity(&a, &a, 0.0),
            Err(NumericsError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn similarity_works_in_f32() {
        let a = Embedding::new(vec![1.0f32, 1.0]).unwrap();
        let s = temp_similarity(&a, &a, 0.5).unwrap();
        assert!((s - 2.0f32.exp()).abs() < 1e-5);
    }

    #[test]
    fn cosine_grad_matches_central_difference() {
        let mut rng = RngStream::new(3);
        let a = rng.normal_vec(6, 1.0);
        let b = rng.normal_vec(6, 1.0);
        let (_, ga, gb) = cosine_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine(&ap, &b).unwrap() - cosine(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (cosine(&a, &bp).unwrap() - cosine(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let xs = [1000.0f64, 1000.0];
        let v = log_sum_exp(xs.iter().copied());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, len).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn similarity_scale_invariant(a in vec_strategy(8), b in vec_strategy(8),
                                      s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
            let base = temp_similarity(&emb(&a), &emb(&b), 0.1).unwrap();
            let scaled = temp_similarity(&emb(&sa), &emb(&tb), 0.1).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        }

        #[test]
        fn similarity_symmetric(a in vec_strategy(8), b in vec_strategy(8)) {
            let ab = temp_similarity(&emb(&a), &emb(&b), 0.1).unwrap();
            let ba = temp_similarity(&emb(&b), &emb(&a), 0.1).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn normalized_output_is_unit(a in vec_strategy(32)) {
            prop_assert!(l2_normalize(&emb(&a)).unwrap().is_unit(1e-12));
        }
    }
}
