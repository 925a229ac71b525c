//! Per-arm response distributions.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};

const SUPPORT_TOL: f64 = 1e-12;

/// Response law of a single treatment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmDistribution {
    Bernoulli {
        p: f64,
    },
    /// Finite support with explicit outcome probabilities.
    Discrete {
        values: Vec<f64>,
        probs: Vec<f64>,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
}

impl ArmDistribution {
    pub fn mean(&self) -> f64 {
        match self {
            Self::Bernoulli { p } => *p,
            Self::Discrete { values, probs } => values.iter().zip(probs).map(|(x, p)| x * p).sum(),
            Self::Normal { mean, .. } => *mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Bernoulli { p } => p * (1.0 - p),
            Self::Discrete { values, probs } => {
                let m = self.mean();
                values
                    .iter()
                    .zip(probs)
                    .map(|(x, p)| p * (x - m) * (x - m))
                    .sum()
            }
            Self::Normal { sd, .. } => sd * sd,
        }
    }

    /// Outcomes with their probabilities, or `None` for a continuous law.
    pub fn outcomes(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            Self::Bernoulli { p } => Some(vec![(0.0, 1.0 - p), (1.0, *p)]),
            Self::Discrete { values, probs } => {
                Some(values.iter().copied().zip(probs.iter().copied()).collect())
            }
            Self::Normal { .. } => None,
        }
    }

    /// Maps one uniform variate to a response by inversion.
    pub fn sample(&self, u: f64) -> f64 {
        match self {
            Self::Bernoulli { p } => {
                if u < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Discrete { values, probs } => {
                let mut acc = 0.0;
                for (x, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *x;
                    }
                }
                *values.last().expect("validated non-empty support")
            }
            Self::Normal { mean, sd } => {
                // u == 0 would map to -inf
                let u = u.max(f64::MIN_POSITIVE);
                let z = Normal::standard().inverse_cdf(u);
                mean + sd * z
            }
        }
    }

    fn validate(&self, arm: usize) -> Result<()> {
        match self {
            Self::Bernoulli { p } => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(invalid(format!(
                        "arm {}: Bernoulli probability {p} must lie in (0, 1)",
                        arm + 1
                    )));
                }
            }
            Self::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(invalid(format!(
                        "arm {}: discrete support needs matching non-empty values and probs",
                        arm + 1
                    )));
                }
                if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                    return Err(invalid(format!("arm {}: negative probability", arm + 1)));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > SUPPORT_TOL {
                    return Err(invalid(format!(
                        "arm {}: probabilities sum to {total}, not 1",
                        arm + 1
                    )));
                }
            }
            Self::Normal { mean, sd } => {
                if !mean.is_finite() || !(*sd >= 0.0) || !sd.is_finite() {
                    return Err(invalid(format!("arm {}: bad normal parameters", arm + 1)));
                }
            }
        }
        Ok(())
    }
}

/// Independent response laws for the `K` arms, with mean vector `theta` and
/// variances `sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    arms: Vec<ArmDistribution>,
}

impl ResponseModel {
    pub fn new(arms: Vec<ArmDistribution>) -> Result<Self> {
        if arms.len() < 2 {
            return Err(invalid("a response model needs at least two arms"));
        }
        for (k, arm) in arms.iter().enumerate() {
            arm.validate(k)?;
        }
        Ok(Self { arms })
    }

    pub fn bernoulli(p: &[f64]) -> Result<Self> {
        Self::new(
            p.iter()
                .map(|&p| ArmDistribution::Bernoulli { p })
                .collect(),
        )
    }

    pub fn arms(&self) -> &[ArmDistribution] {
        &self.arms
    }

    pub fn k(&self) -> usize {
        self.arms.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.arms.iter().map(ArmDistribution::mean).collect()
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.arms.iter().map(ArmDistribution::variance).collect()
    }

    pub fn is_finite_support(&self) -> bool {
        self.arms.iter().all(|a| a.outcomes().is_some())
    }

    pub fn is_bernoulli(&self) -> bool {
        self.arms
            .iter()
            .all(|a| matches!(a, ArmDistribution::Bernoulli { .. }))
    }

    pub fn sample(&self, arm: usize, u: f64) -> f64 {
        self.arms[arm].sample(u)
    }

    /// Same model with arms `i` and `j` exchanged.
    pub fn swapped(&self, i: usize, j: usize) -> Self {
        let mut arms = self.arms.clone();
        arms.swap(i, j);
        Self { arms }
    }
}
