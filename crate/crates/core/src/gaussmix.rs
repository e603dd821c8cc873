//! Expectations of test functions under Gaussian measures and weighted
//! Gaussian mixtures.

use crate::hermite::{POSITIVE_NODES, WEIGHTS};
use crate::models::TestFunction;
use crate::{Error, Result};

/// `N(mean, variance)`; zero variance is the Dirac mass at `mean`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianMeasure {
    mean: f64,
    variance: f64,
}

impl GaussianMeasure {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::NegativeVariance(variance));
        }
        Ok(GaussianMeasure { mean, variance })
    }

    pub fn dirac(mean: f64) -> Self {
        GaussianMeasure { mean, variance: 0.0 }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

/// `E[phi(mean + sqrt(variance) Z)]` for standard normal `Z`.
pub fn gauss_expect(m: &GaussianMeasure, phi: &TestFunction) -> f64 {
    normal_expect(m.mean, m.variance, phi)
}

/// Unchecked form of [`gauss_expect`]; `variance` must be non-negative.
#[inline]
pub(crate) fn normal_expect(mean: f64, variance: f64, phi: &TestFunction) -> f64 {
    if variance == 0.0 {
        return phi.eval(mean);
    }
    let sd = variance.sqrt();
    // smallest weights first
    let mut acc = 0.0;
    for i in (0..POSITIVE_NODES.len()).rev() {
        let dy = sd * POSITIVE_NODES[i];
        acc += WEIGHTS[i] * (phi.eval(mean - dy) + phi.eval(mean + dy));
    }
    acc
}

/// A normalised mixture `sum_j w_j N(v_j, omega_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMixture {
    components: Vec<(f64, GaussianMeasure)>,
}

impl WeightedMixture {
    pub const NORMALIZATION_TOL: f64 = 1e-12;

    pub fn new(components: Vec<(f64, GaussianMeasure)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidWeights("empty mixture".into()));
        }
        if let Some((w, _)) = components.iter().find(|(w, _)| !(*w >= 0.0)) {
            return Err(Error::InvalidWeights(format!("weight {w} is negative")));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > Self::NORMALIZATION_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(WeightedMixture { components })
    }

    /// Normalises non-negative weights given in log space.
    pub fn from_log_weights(log_weights: &[f64], measures: &[GaussianMeasure]) -> Result<Self> {
        if log_weights.len() != measures.len() {
            return Err(Error::InvalidWeights("length mismatch".into()));
        }
        let weights = normalize_log_weights(log_weights);
        WeightedMixture::new(weights.into_iter().zip(measures.iter().copied()).collect())
    }

    pub fn components(&self) -> &[(f64, GaussianMeasure)] {
        &self.components
    }

    pub fn max_variance(&self) -> f64 {
        self.components
            .iter()
            .map(|(_, m)| m.variance)
            .fold(0.0, f64::max)
    }
}

/// `exp(l_j - max) / sum_k exp(l_k - max)`.
pub(crate) fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

pub fn mixture_expect(mix: &WeightedMixture, phi: &TestFunction) -> f64 {
    mix.components
        .iter()
        .map(|(w, m)| w * gauss_expect(m, phi))
        .sum()
}

/// Mixture expectation with every component collapsed to its mean.
pub fn point_mass_expect(mix: &WeightedMixture, phi: &TestFunction) -> f64 {
    mix.components
        .iter()
        .map(|(w, m)| w * phi.eval(m.mean))
        .sum()
}
