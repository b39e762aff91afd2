//! Knockoff feature statistics and filters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{read_json, write_json};
use crate::error::{Error, Result};
use crate::linalg::median;

/// Per-feature knockoff statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub w: Vec<f64>,
    /// Index of the top-scoring copy (0 = original); multiple knockoffs only.
    pub kappa: Option<Vec<usize>>,
    /// Gap between the top score and the median of the rest.
    pub tau: Option<Vec<f64>>,
    pub copies: usize,
}

/// Outcome of a knockoff filter. `selected` is 0-indexed and ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub threshold: f64,
    pub selected: Vec<usize>,
}

fn check_scores(z: &[f64], copies: usize) -> Result<usize> {
    if copies == 0 || z.is_empty() || !z.len().is_multiple_of(copies + 1) {
        return Err(Error::Dimension {
            context: "importance vector length (multiple of 1 + M)",
            expected: (copies + 1) * (z.len() / (copies + 1)).max(1),
            got: z.len(),
        });
    }
    Ok(z.len() / (copies + 1))
}

/// `W_j = Z_j − Z_{j+p}` for a single knockoff copy.
pub fn single_knockoff_stats(z: &[f64]) -> Result<FeatureStats> {
    let p = check_scores(z, 1)?;
    Ok(FeatureStats {
        w: (0..p).map(|j| z[j] - z[j + p]).collect(),
        kappa: None,
        tau: None,
        copies: 1,
    })
}

/// Multiple-knockoff statistics from the `1 + M` scores of each feature:
/// `κ_j` is the argmax (ties to the smallest index), `τ_j` the max minus the
/// median of the other `M` scores, and `W_j` the original's margin over the
/// knockoff median when the original is at least every knockoff, else 0.
pub fn multiple_knockoff_stats(z: &[f64], copies: usize) -> Result<FeatureStats> {
    if copies < 2 {
        return Err(Error::Config("multiple knockoff statistics need M >= 2".into()));
    }
    let p = check_scores(z, copies)?;
    let mut w = Vec::with_capacity(p);
    let mut kappa = Vec::with_capacity(p);
    let mut tau = Vec::with_capacity(p);
    let mut scores = Vec::with_capacity(copies + 1);
    let mut rest = Vec::with_capacity(copies);
    for j in 0..p {
        scores.clear();
        scores.extend((0..=copies).map(|m| z[j + m * p]));
        let mut top = 0;
        for (m, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[top] {
                top = m;
            }
        }
        rest.clear();
        rest.extend(scores.iter().enumerate().filter(|(m, _)| *m != top).map(|(_, s)| *s));
        kappa.push(top);
        tau.push(scores[top] - median(&rest));

        let knock = &scores[1..];
        let knock_max = knock.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.push(if scores[0] >= knock_max {
            scores[0] - median(knock)
        } else {
            0.0
        });
    }
    Ok(FeatureStats {
        w,
        kappa: Some(kappa),
        tau: Some(tau),
        copies,
    })
}

/// Knockoff+ threshold: the smallest `t` among `{|W_j| : W_j ≠ 0}` with
/// `(#{W_j ≤ −t} + 1) / #{W_j ≥ t} ≤ q`. Selects `{j : W_j ≥ T}`; with no
/// qualifying `t` the threshold is `+∞` and nothing is selected.
pub fn single_knockoff_threshold(w: &[f64], q: f64) -> Selection {
    let mut candidates: Vec<f64> = w.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut pos: Vec<f64> = w.iter().copied().filter(|v| *v > 0.0).collect();
    let mut neg: Vec<f64> = w.iter().filter(|v| **v < 0.0).map(|v| -v).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    // Counts of values >= t via binary search over sorted magnitudes.
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|v| *v < t);
    let threshold = candidates
        .into_iter()
        .find(|&t| {
            let selected = at_least(&pos, t);
            selected > 0 && (at_least(&neg, t) as f64 + 1.0) / selected as f64 <= q
        })
        .unwrap_or(f64::INFINITY);
    Selection {
        threshold,
        selected: (0..w.len()).filter(|&j| w[j] >= threshold).collect(),
    }
}

/// Multiple-knockoff threshold: the smallest `t` among `{τ_j > 0}` with
/// `(1/M + #{κ_j ≥ 1, τ_j ≥ t} / M) / max(1, #{κ_j = 0, τ_j ≥ t}) ≤ q`.
/// Selects `{j : κ_j = 0, τ_j ≥ T}`.
pub fn multiple_knockoff_threshold(kappa: &[usize], tau: &[f64], copies: usize, q: f64) -> Selection {
    let m = copies as f64;
    let mut candidates: Vec<f64> = tau.iter().copied().filter(|t| *t > 0.0).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut orig: Vec<f64> = Vec::new();
    let mut knock: Vec<f64> = Vec::new();
    for (&k, &t) in kappa.iter().zip(tau) {
        if k == 0 {
            orig.push(t);
        } else {
            knock.push(t);
        }
    }
    orig.sort_by(f64::total_cmp);
    knock.sort_by(f64::total_cmp);
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|v| *v < t);
    let threshold = candidates
        .into_iter()
        .find(|&t| {
            let num = 1.0 / m + at_least(&knock, t) as f64 / m;
            let den = at_least(&orig, t).max(1) as f64;
            num / den <= q
        })
        .unwrap_or(f64::INFINITY);
    Selection {
        threshold,
        selected: (0..kappa.len())
            .filter(|&j| kappa[j] == 0 && tau[j] >= threshold)
            .collect(),
    }
}

/// Statistics and filter for an importance vector with `copies` knockoffs.
pub fn select(z: &[f64], copies: usize, q: f64) -> Result<(FeatureStats, Selection)> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("target FDR q must be in (0, 1), got {q}")));
    }
    if copies == 1 {
        let stats = single_knockoff_stats(z)?;
        let sel = single_knockoff_threshold(&stats.w, q);
        Ok((stats, sel))
    } else {
        let stats = multiple_knockoff_stats(z, copies)?;
        let sel = multiple_knockoff_threshold(
            stats.kappa.as_deref().unwrap_or_default(),
            stats.tau.as_deref().unwrap_or_default(),
            copies,
            q,
        );
        Ok((stats, sel))
    }
}

/// Serialized selection result. `selected` is 1-indexed; an infinite
/// threshold serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub q: f64,
    #[serde(rename = "M")]
    pub copies: usize,
    #[serde(rename = "T")]
    pub threshold: Option<f64>,
    pub selected: Vec<usize>,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub kappa: Option<Vec<usize>>,
    pub tau: Option<Vec<f64>>,
    pub strategy: Option<serde_json::Value>,
}

impl SelectionReport {
    pub fn new(q: f64, stats: &FeatureStats, sel: &Selection, strategy: Option<serde_json::Value>) -> Self {
        SelectionReport {
            q,
            copies: stats.copies,
            threshold: sel.threshold.is_finite().then_some(sel.threshold),
            selected: sel.selected.iter().map(|j| j + 1).collect(),
            w: stats.w.clone(),
            kappa: stats.kappa.clone(),
            tau: stats.tau.clone(),
            strategy,
        }
    }

    pub fn selected_zero_based(&self) -> Vec<usize> {
        self.selected.iter().map(|j| j - 1).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
