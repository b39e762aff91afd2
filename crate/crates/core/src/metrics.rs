//! Selection quality and importance stability metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_std, pearson};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFdp {
    pub power: f64,
    pub fdp: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Power `|S ∩ T| / |T|` and false discovery proportion
/// `|S \ T| / max(1, |S|)`.
pub fn power_fdp(selected: &[usize], true_support: &[usize]) -> Result<PowerFdp> {
    if true_support.is_empty() {
        return Err(Error::Config("power is undefined without true signals".into()));
    }
    let truth: BTreeSet<usize> = true_support.iter().copied().collect();
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let tp = chosen.intersection(&truth).count();
    let fp = chosen.len() - tp;
    Ok(PowerFdp {
        power: tp as f64 / truth.len() as f64,
        fdp: fp as f64 / chosen.len().max(1) as f64,
        true_positives: tp,
        false_positives: fp,
    })
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets counted as identical (1.0).
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Jaccard index of every unordered pair, in `(0,1), (0,2), …` order.
pub fn pairwise_jaccard(sets: &[Vec<usize>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            out.push(jaccard(&sets[i], &sets[j]));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityProfile {
    /// Coefficient of variation (sample sd / mean) per feature.
    pub instability: Vec<f64>,
    /// Mean score per feature.
    pub signal_strength: Vec<f64>,
    /// Features whose mean was zero; their instability is reported as 0.
    pub zero_mean: Vec<usize>,
}

/// Per-feature instability across `R ≥ 2` runs (rows of `runs`).
pub fn instability_profile(runs: &[Vec<f64>]) -> Result<InstabilityProfile> {
    if runs.len() < 2 {
        return Err(Error::Config("instability needs at least 2 runs".into()));
    }
    let p = runs[0].len();
    if let Some(bad) = runs.iter().find(|r| r.len() != p) {
        return Err(Error::Dimension {
            context: "run length",
            expected: p,
            got: bad.len(),
        });
    }
    let mut out = InstabilityProfile {
        instability: Vec::with_capacity(p),
        signal_strength: Vec::with_capacity(p),
        zero_mean: Vec::new(),
    };
    let mut column = Vec::with_capacity(runs.len());
    for j in 0..p {
        column.clear();
        column.extend(runs.iter().map(|r| r[j]));
        let (mean, sd) = mean_std(&column);
        out.signal_strength.push(mean);
        if mean == 0.0 {
            out.zero_mean.push(j);
            out.instability.push(0.0);
        } else {
            out.instability.push(sd / mean);
        }
    }
    Ok(out)
}

/// Pearson correlation between two importance vectors.
pub fn score_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "score vectors",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(Error::Config("correlation needs at least 3 values".into()));
    }
    pearson(a, b).ok_or_else(|| Error::Numerical("zero-variance score vector".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn power_fdp_examples() {
        let truth: Vec<usize> = (1..=10).collect();
        let r = power_fdp(&[1, 2, 3, 11], &truth).unwrap();
        assert_abs_diff_eq!(r.power, 0.3);
        assert_abs_diff_eq!(r.fdp, 0.25);
        let r = power_fdp(&truth, &truth).unwrap();
        assert_eq!((r.power, r.fdp), (1.0, 0.0));
        let r = power_fdp(&[], &truth).unwrap();
        assert_eq!((r.power, r.fdp), (0.0, 0.0));
        assert!(power_fdp(&[1], &[]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(jaccard(&[4, 5], &[5, 4]), 1.0);
        assert_eq!(jaccard(&[1], &[2]), 0.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
        let sets: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        assert_eq!(pairwise_jaccard(&sets).len(), 10);
    }

    #[test]
    fn instability_examples() {
        let prof = instability_profile(&[vec![2.0, 1.0], vec![2.0, 3.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(prof.instability[0], 0.0);
        assert_eq!(prof.signal_strength[0], 2.0);

        // (1, 3): sd = √2, mean = 2.
        let prof = instability_profile(&[vec![1.0], vec![3.0]]).unwrap();
        assert_abs_diff_eq!(prof.instability[0], 2f64.sqrt() / 2.0, epsilon = 1e-12);

        let zero = instability_profile(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(zero.zero_mean, vec![0]);
        assert!(instability_profile(&[vec![1.0]]).is_err());
    }

    #[test]
    fn instability_scale_invariant() {
        let runs = vec![vec![0.3, 1.2, 5.0], vec![0.5, 0.9, 4.0], vec![0.4, 1.5, 6.5]];
        let scaled: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(|v| v * 3.7).collect()).collect();
        let a = instability_profile(&runs).unwrap();
        let b = instability_profile(&scaled).unwrap();
        for (x, y) in a.instability.iter().zip(&b.instability) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn correlation_examples() {
        let a = vec![0.1, 0.5, 0.2, 0.9, 0.4];
        let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(score_correlation(&a, &affine).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score_correlation(&a, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert!(score_correlation(&a, &[1.0; 5]).is_err());
        assert!(score_correlation(&a[..2], &a[..2]).is_err());

        let mut rng = crate::seed::rng(77);
        let x: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(score_correlation(&x, &y).unwrap().abs() < 0.1);
    }
}
