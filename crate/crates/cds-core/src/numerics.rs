//! Scalar and vector primitives: L2 normalization, temperature softmax,
//! entropy, cross entropy, and the finite-difference gradient checker used to
//! verify every hand-derived gradient in the crate.
//!
//! All operations are pure functions on immutable inputs and compute in
//! double precision.

use alloc::vec::Vec;

use crate::error::{CdsError, Result};
use crate::math;

/// Norms at or below this threshold are treated as degenerate. A zero feature
/// carries no information and indicates an upstream bug, so we error rather
/// than pick an arbitrary direction.
pub const EPS_NORM: f64 = 1e-12;

/// A unit-L2-norm feature vector.
///
/// Constructed only through [`l2_normalize`] or the checked
/// [`FeatureVector::from_unit`], so holding one is proof of unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps an already-normalized vector, verifying ‖v‖₂ = 1 within `tol`.
    pub fn from_unit(v: Vec<f64>, tol: f64) -> Result<Self> {
        let norm = l2_norm(&v);
        if (norm - 1.0).abs() > tol {
            return Err(CdsError::NormTooSmall { norm });
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl core::ops::Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Raw similarity or logit scores. Entries must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "non-finite score {bad}"
            )));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A probability distribution: non-negative entries summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CdsError::EmptyDomain("distribution"));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(CdsError::InvalidConfig(alloc::string::String::from(
                "distribution entries must be finite and non-negative",
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns v/‖v‖₂.
pub fn l2_normalize(v: &[f64]) -> Result<FeatureVector> {
    let norm = l2_norm(v);
    if norm <= EPS_NORM {
        return Err(CdsError::NormTooSmall { norm });
    }
    Ok(FeatureVector(v.iter().map(|x| x / norm).collect()))
}

/// Backward pass of [`l2_normalize`]: (I − f fᵀ)·upstream / ‖v‖₂ with
/// f = v/‖v‖₂. The radial component of `upstream` is annihilated.
pub fn l2_normalize_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if v.len() != upstream.len() {
        return Err(CdsError::DimensionMismatch {
            expected: v.len(),
            got: upstream.len(),
        });
    }
    let norm = l2_norm(v);
    if norm <= EPS_NORM {
        return Err(CdsError::NormTooSmall { norm });
    }
    let f: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let radial = dot(&f, upstream);
    Ok(f.iter()
        .zip(upstream)
        .map(|(fi, ui)| (ui - fi * radial) / norm)
        .collect())
}

/// Temperature softmax with max-subtraction. At τ = 0.05 scores are divided
/// by 20, so naive exponentiation would overflow.
pub fn softmax_temp(scores: &ScoreVector, tau: f64) -> Result<Distribution> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(CdsError::InvalidTemperature { tau });
    }
    if scores.is_empty() {
        return Err(CdsError::EmptyDomain("scores"));
    }
    let s = scores.as_slice();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| math::exp((x - max) / tau)).collect();
    let sum: f64 = exps.iter().sum();
    Distribution::new(exps.iter().map(|e| e / sum).collect())
}

/// Shannon entropy −Σ p log p in nats, with 0·log 0 = 0.
pub fn entropy(p: &Distribution) -> f64 {
    p.probs()
        .iter()
        .map(|&pk| if pk > 0.0 { -pk * math::ln(pk) } else { 0.0 })
        .sum()
}

/// −log p\[index\].
pub fn cross_entropy_at(p: &Distribution, index: usize) -> Result<f64> {
    let probs = p.probs();
    if index >= probs.len() {
        return Err(CdsError::IndexOutOfRange {
            index,
            len: probs.len(),
        });
    }
    if probs[index] == 0.0 {
        return Err(CdsError::InfiniteLoss { index });
    }
    Ok(-math::ln(probs[index]))
}

/// Central-difference gradient check. Returns the max over coordinates of
/// |fd_k − g_k| / max(1, |fd_k|, |g_k|).
pub fn finite_diff_check<F>(mut f: F, analytic_grad: &[f64], x: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    debug_assert_eq!(analytic_grad.len(), x.len());
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe);
        probe[k] = x[k] - h;
        let minus = f(&probe);
        probe[k] = x[k];
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic_grad[k];
        let err = (fd - g).abs() / 1.0f64.max(fd.abs()).max(g.abs());
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scores(v: Vec<f64>) -> ScoreVector {
        ScoreVector::new(v).unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let f = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(f.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_is_identity_on_unit_vectors() {
        let u = [1.0 / 2.0f64.sqrt(), -1.0 / 2.0f64.sqrt()];
        let f = l2_normalize(&u).unwrap();
        for (a, b) in f.iter().zip(&u) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(CdsError::NormTooSmall { .. })
        ));
    }

    #[test]
    fn normalize_idempotent() {
        let v = [0.3, -1.7, 2.2];
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(once.as_slice()).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((l2_norm(once.as_slice()) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalize_backward_tangential_preserved() {
        let g = l2_normalize_backward(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0, 1.0]);
    }

    #[test]
    fn normalize_backward_radial_annihilated() {
        let g = l2_normalize_backward(&[2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        // d/dv (u · l2_normalize(v)) is exactly l2_normalize_backward(v, u).
        let v = [0.4, -1.1, 0.9, 2.3];
        let u = [1.3, 0.2, -0.7, 0.5];
        let grad = l2_normalize_backward(&v, &u).unwrap();
        let err = finite_diff_check(
            |x| dot(l2_normalize(x).unwrap().as_slice(), &u),
            &grad,
            &v,
            1e-5,
        );
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn softmax_equal_scores_is_uniform() {
        let p = softmax_temp(&scores(vec![0.7; 5]), 0.05).unwrap();
        for &pk in p.probs() {
            assert!((pk - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sharp_temperature() {
        let p = softmax_temp(&scores(vec![1.0, 0.0]), 0.05).unwrap();
        let e = (-20.0f64).exp();
        assert!((p.probs()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.probs()[1] - e / (1.0 + e)).abs() < 1e-18);
        // First entry ≈ 1 − 2.06e-9.
        assert!((p.probs()[0] - (1.0 - 2.0611536181902037e-9)).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_exact_on_dyadic_scores() {
        // With scores and shift exactly representable, max-subtraction yields
        // bitwise-identical inputs to exp, hence bitwise-identical outputs.
        let base = vec![0.125, -0.5, 0.75, 0.0];
        let shifted: Vec<f64> = base.iter().map(|s| s + 3.0).collect();
        let p = softmax_temp(&scores(base), 0.05).unwrap();
        let q = softmax_temp(&scores(shifted), 0.05).unwrap();
        assert_eq!(p.probs(), q.probs());
    }

    #[test]
    fn softmax_rejects_zero_temperature() {
        assert!(matches!(
            softmax_temp(&scores(vec![1.0]), 0.0),
            Err(CdsError::InvalidTemperature { .. })
        ));
    }

    #[test]
    fn entropy_uniform_is_ln_n() {
        let p = Distribution::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&p) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let p = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&p), 0.0);
    }

    #[test]
    fn entropy_fair_coin_is_ln_two() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!((entropy(&p) - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform() {
        let p = Distribution::new(vec![0.2; 5]).unwrap();
        assert!((cross_entropy_at(&p, 3).unwrap() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_certain_event_is_zero() {
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy_at(&p, 0).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_quarter() {
        let p = Distribution::new(vec![0.25, 0.75]).unwrap();
        assert!((cross_entropy_at(&p, 0).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            cross_entropy_at(&p, 5),
            Err(CdsError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            cross_entropy_at(&p, 1),
            Err(CdsError::InfiniteLoss { index: 1 })
        ));
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x = [1.0, 2.0];
        let grad = [2.0, 4.0];
        let err = finite_diff_check(|v| v.iter().map(|x| x * x).sum(), &grad, &x, 1e-5);
        assert!(err < 1e-8, "rel error {err}");
    }

    #[test]
    fn finite_diff_on_constant() {
        let x = [0.3, -0.4, 1.1];
        let err = finite_diff_check(|_| 7.25, &[0.0; 3], &x, 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_on_entropy_of_softmax() {
        // Composite H(softmax(s/τ)); analytic gradient per coordinate is
        // −p_k (log p_k + H) / τ.
        let tau = 0.3;
        let x = [0.2, -0.6, 0.9, 0.1];
        let p = softmax_temp(&scores(x.to_vec()), tau).unwrap();
        let h = entropy(&p);
        let grad: Vec<f64> = p
            .probs()
            .iter()
            .map(|&pk| -pk * (pk.ln() + h) / tau)
            .collect();
        let err = finite_diff_check(
            |v| entropy(&softmax_temp(&scores(v.to_vec()), tau).unwrap()),
            &grad,
            &x,
            1e-5,
        );
        assert!(err < 1e-5, "rel error {err}");
    }
}
