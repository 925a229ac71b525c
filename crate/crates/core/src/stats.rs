//! Streaming mean/covariance and higher-moment accumulators with associative merge.

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

/// One-pass mean and co-moment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovAccumulator {
    count: u64,
    mean: Vec<f64>,
    /// Row-major `dim x dim` sum of centred outer products.
    comoment: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        assert_eq!(x.len(), d, "observation dimension");
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for (i, row) in self.comoment.chunks_mut(d).enumerate() {
            let after = x[i] - self.mean[i];
            for (c, dl) in row.iter_mut().zip(&delta) {
                *c += dl * after;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.dim(), other.dim(), "accumulator dimension");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(b, a)| b - a)
            .collect();
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] +=
                    other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased covariance; `None` with fewer than two observations.
    pub fn covariance(&self) -> Option<Mat> {
        if self.count < 2 {
            return None;
        }
        let d = self.dim();
        let scale = 1.0 / (self.count - 1) as f64;
        let m = Mat::from_fn(d, d, |i, j| {
            0.5 * (self.comoment[i * d + j] + self.comoment[j * d + i]) * scale
        });
        Some(m)
    }
}

/// Univariate one-pass central moments up to order four.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, o: &Self) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        let d = o.mean - self.mean;
        let d2 = d * d;
        let d3 = d2 * d;
        let d4 = d2 * d2;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + o.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        self.mean += d * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.count += o.count;
    }

    /// Unbiased variance.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    /// Standardized third moment `sqrt(n) M3 / M2^{3/2}`.
    pub fn skewness(&self) -> Option<f64> {
        (self.count >= 3 && self.m2 > 0.0)
            .then(|| (self.count as f64).sqrt() * self.m3 / self.m2.powf(1.5))
    }

    /// `n M4 / M2^2 - 3`.
    pub fn excess_kurtosis(&self) -> Option<f64> {
        (self.count >= 4 && self.m2 > 0.0)
            .then(|| self.count as f64 * self.m4 / (self.m2 * self.m2) - 3.0)
    }

    /// Standard error of the variance estimate, `sqrt((mu4 - s^4) / n)`.
    pub fn variance_standard_error(&self) -> Option<f64> {
        if self.count < 4 {
            return None;
        }
        let n = self.count as f64;
        let mu2 = self.m2 / n;
        let mu4 = self.m4 / n;
        Some(((mu4 - mu2 * mu2).max(0.0) / n).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Vec<[f64; 3]> {
        (0..500)
            .map(|i| {
                let t = i as f64;
                [
                    (t * 0.37).sin() * 3.0 + 1e6,
                    (t * 0.11).cos(),
                    (t * 0.05).sin().powi(3),
                ]
            })
            .collect()
    }

    #[test]
    fn covariance_matches_two_pass() {
        let xs = data();
        let mut acc = CovAccumulator::new(3);
        for x in &xs {
            acc.push(x);
        }
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..3)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let cov = acc.covariance().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let two: f64 = xs
                    .iter()
                    .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
                assert!((cov[(i, j)] - two).abs() <= 1e-10 * scale, "{i}{j}");
            }
        }
    }

    #[test]
    fn merge_equals_sequential() {
        let xs = data();
        let mut whole = CovAccumulator::new(3);
        let mut parts = vec![CovAccumulator::new(3); 7];
        let mut m_whole = MomentAccumulator::new();
        let mut m_parts = vec![MomentAccumulator::new(); 7];
        for (i, x) in xs.iter().enumerate() {
            whole.push(x);
            parts[i % 7].push(x);
            m_whole.push(x[2]);
            m_parts[i % 7].push(x[2]);
        }
        let mut merged = CovAccumulator::new(3);
        let mut m_merged = MomentAccumulator::new();
        for (p, m) in parts.iter().zip(&m_parts) {
            merged.merge(p);
            m_merged.merge(m);
        }
        let (a, b) = (whole.covariance().unwrap(), merged.covariance().unwrap());
        assert!((a - b).abs().max() < 1e-9);
        assert!((m_whole.skewness().unwrap() - m_merged.skewness().unwrap()).abs() < 1e-9);
        assert!(
            (m_whole.excess_kurtosis().unwrap() - m_merged.excess_kurtosis().unwrap()).abs() < 1e-9
        );
    }

    #[test]
    fn known_moments() {
        // Two-point distribution on {0, 1} with equal weight.
        let mut m = MomentAccumulator::new();
        for i in 0..1000 {
            m.push((i % 2) as f64);
        }
        assert!(m.skewness().unwrap().abs() < 1e-12);
        assert!((m.excess_kurtosis().unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_observation_has_no_covariance() {
        let mut acc = CovAccumulator::new(2);
        acc.push(&[1.0, 2.0]);
        assert!(acc.covariance().is_none());
    }
}
