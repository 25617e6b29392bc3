//! Correlation and size-stratified accuracy.

use serde::{Deserialize, Serialize};

use super::data::SizeBand;
use crate::error::{Error, Result};

/// Sample Pearson correlation coefficient.
///
/// `Ok(None)` when either input has zero variance (the coefficient is
/// undefined). Errors on unequal lengths or fewer than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(
            "pearson",
            format!("need two equal-length inputs of at least 2 points, got {} and {}", xs.len(), ys.len()),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Accuracy overall and per size band; `None` marks an empty band, and a
/// ratio whose small-band accuracy is missing or zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratifiedMetrics {
    pub total: f64,
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
    /// `total / small`
    pub ratio: Option<f64>,
}

impl StratifiedMetrics {
    pub fn band(&self, band: SizeBand) -> Option<f64> {
        match band {
            SizeBand::Small => self.small,
            SizeBand::Medium => self.medium,
            SizeBand::Large => self.large,
        }
    }
}

pub fn stratified_metrics(predictions: &[usize], labels: &[usize], bands: &[SizeBand]) -> Result<StratifiedMetrics> {
    if predictions.len() != labels.len() || labels.len() != bands.len() {
        return Err(Error::invalid(
            "stratified_metrics",
            format!(
                "misaligned inputs: {} predictions, {} labels, {} bands",
                predictions.len(),
                labels.len(),
                bands.len()
            ),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("stratified_metrics", "no samples"));
    }
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    for ((&p, &y), &b) in predictions.iter().zip(labels).zip(bands) {
        counts[b as usize] += 1;
        if p == y {
            hits[b as usize] += 1;
        }
    }
    let acc = |i: usize| (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64);
    let total = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    let small = acc(0);
    Ok(StratifiedMetrics {
        total,
        small,
        medium: acc(1),
        large: acc(2),
        ratio: small.filter(|&s| s > 0.0).map(|s| total / s),
    })
}

/// Median of the finite values, `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
