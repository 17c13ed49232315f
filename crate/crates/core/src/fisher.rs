//! Per-dimension Fisher scores: between-class over within-class scatter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Score of a dimension whose within-class scatter is zero while its
/// between-class scatter is not.
pub const INFINITE_SCORE: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    /// One score per dimension; `+∞` marks a perfectly separating dimension.
    pub scores: Vec<f64>,
    /// Dimensions where both scatters vanish (score reported as 0).
    pub degenerate: Vec<usize>,
    /// Dimensions with infinite score.
    pub separating: Vec<usize>,
    /// Mean over finite scores (0 when none are finite).
    pub mean: f64,
}

impl FisherReport {
    /// Dimensions sorted by decreasing score, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

pub fn fisher_score(features: &Tensor<f32>, labels: &[usize]) -> Result<FisherReport> {
    let (m, d) = features.dims2("fisher_score")?;
    if labels.len() != m {
        return Err(Error::shape("fisher_score", format!("{m} rows, {} labels", labels.len())));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("Fisher scores need at least two classes"));
    }
    if let Some((c, _)) = groups.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::invalid(format!("class {c} has fewer than two samples")));
    }
    let x = |i: usize, k: usize| features.data()[i * d + k] as f64;
    let mut report = FisherReport {
        scores: Vec::with_capacity(d),
        degenerate: Vec::new(),
        separating: Vec::new(),
        mean: 0.0,
    };
    for k in 0..d {
        let mu = (0..m).map(|i| x(i, k)).sum::<f64>() / m as f64;
        let (mut between, mut within) = (0.0, 0.0);
        for rows in groups.values() {
            let n = rows.len() as f64;
            let mu_c = rows.iter().map(|&i| x(i, k)).sum::<f64>() / n;
            between += n * (mu_c - mu).powi(2);
            within += rows.iter().map(|&i| (x(i, k) - mu_c).powi(2)).sum::<f64>();
        }
        // Scatter below this relative level is rounding noise of the means.
        let floor = 1e-12 * (mu * mu * m as f64).max(f64::MIN_POSITIVE);
        let score = if within > floor {
            between / within
        } else if between > floor {
            report.separating.push(k);
            INFINITE_SCORE
        } else {
            report.degenerate.push(k);
            0.0
        };
        report.scores.push(score);
    }
    let finite: Vec<f64> = report.scores.iter().copied().filter(|s| s.is_finite()).collect();
    report.mean = if finite.is_empty() {
        0.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_dataset() {
        let f = Tensor::new([4, 1], vec![0.0f32, 0.1, 1.0, 0.9]).unwrap();
        let r = fisher_score(&f, &[0, 0, 1, 1]).unwrap();
        // Scalar recount: overall mean 0.5, class means 0.05 and 0.95.
        let between = 2.0 * 0.45f64.powi(2) + 2.0 * 0.45f64.powi(2);
        let within = 2.0 * 0.05f64.powi(2) + 2.0 * 0.05f64.powi(2);
        assert!((between - 0.81).abs() < 1e-12);
        assert!((within - 0.01).abs() < 1e-12);
        assert!((r.scores[0] - between / within).abs() <= 1e-4 * 81.0);
    }

    #[test]
    fn signal_dimension_outranks_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let f = Tensor::from_fn([40, 2], |i| {
            let noise = rng.random_range(-0.05f32..0.05);
            if i % 2 == 0 { labels[i / 2] as f32 + noise } else { rng.random_range(-1.0..1.0) }
        });
        let r = fisher_score(&f, &labels).unwrap();
        assert!(r.scores[0] > 100.0 * r.scores[1]);
    }

    #[test]
    fn degenerate_and_separating_dimensions() {
        let f = Tensor::new([4, 2], vec![3.0f32, 0.0, 3.0, 0.0, 3.0, 1.0, 3.0, 1.0]).unwrap();
        let r = fisher_score(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.scores[0], 0.0);
        assert_eq!(r.degenerate, vec![0]);
        assert_eq!(r.scores[1], INFINITE_SCORE);
        assert_eq!(r.separating, vec![1]);
        assert_eq!(r.ranking(), vec![1, 0]);
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn preconditions() {
        let f = Tensor::new([3, 1], vec![0.0f32, 1.0, 2.0]).unwrap();
        assert!(fisher_score(&f, &[0, 0, 0]).is_err());
        assert!(fisher_score(&f, &[0, 0, 1]).is_err());
        assert!(fisher_score(&f, &[0, 1]).is_err());
    }

    #[test]
    fn translation_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let f = Tensor::from_fn([30, 4], |i| labels[i / 4] as f32 * 0.3 + rng.random_range(-1.0f32..1.0));
        let base = fisher_score(&f, &labels).unwrap();
        let moved = fisher_score(&f.map(|v| v + 5.0), &labels).unwrap();
        let scaled = fisher_score(&f.scale(3.0), &labels).unwrap();
        for k in 0..4 {
            assert!((base.scores[k] - moved.scores[k]).abs() <= 1e-6 * base.scores[k].max(1.0));
            assert!((base.scores[k] - scaled.scores[k]).abs() <= 1e-6 * base.scores[k].max(1.0));
        }
    }
}
