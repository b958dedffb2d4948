//! Pre-aggregation removal of unreliable pseudo-labels.
//!
//! Detections are filtered on their confidence score; classification labels
//! on the Shannon entropy (in nats) of the predicted class distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Detection;

/// Tolerance on the sum of a probability vector.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Default detection confidence threshold.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.001;

/// A class probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbs("empty vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidProbs(format!("element {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidProbs(format!("elements sum to {sum}")));
        }
        Ok(ProbVector(probs))
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

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ProbVector::new(Vec::<f64>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Thresholds for both filtering routes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub entropy_threshold: f64,
    pub confidence_threshold: f64,
}

impl FilterConfig {
    pub fn new(entropy_threshold: f64, confidence_threshold: f64) -> Result<Self> {
        if entropy_threshold.is_nan() || entropy_threshold < 0.0 {
            return Err(Error::Config(format!(
                "entropy threshold {entropy_threshold} must be >= 0"
            )));
        }
        if !(0.0..=1.0).contains(&confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold {confidence_threshold} must lie in [0, 1]"
            )));
        }
        Ok(FilterConfig {
            entropy_threshold,
            confidence_threshold,
        })
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            entropy_threshold: f64::INFINITY,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let h: f64 = p
        .as_slice()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    // -x ln x is non-negative termwise; clamp the -0.0 a one-hot produces
    h.max(0.0)
}

/// Keeps items whose entropy is at most `tau`, in input order.
pub fn filter_by_entropy<T>(labels: Vec<(T, ProbVector)>, tau: f64) -> Vec<(T, ProbVector)> {
    labels
        .into_iter()
        .filter(|(_, p)| entropy(p) <= tau)
        .collect()
}

/// Keeps detections scoring at least `theta`, in input order.
pub fn filter_by_confidence(dets: Vec<Detection>, theta: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.score >= theta).collect()
}
