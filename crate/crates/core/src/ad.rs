//! Response-range applicability domain: `(min − 0.15·range, max + 0.15·range)`,
//! checked against predicted values when true values are unknown.

use thiserror::Error;

pub const AD_PADDING: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("applicability domain needs at least 2 distinct finite responses")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdRange {
    pub lower: f64,
    pub upper: f64,
    pub min: f64,
    pub max: f64,
    pub range_size: f64,
}

impl AdRange {
    pub fn fit(responses: &[f64]) -> Result<Self, AdError> {
        let mut it = responses.iter().copied().filter(|v| v.is_finite());
        let first = it.next().ok_or(AdError::Degenerate)?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if min == max {
            return Err(AdError::Degenerate);
        }
        let range_size = max - min;
        Ok(AdRange {
            lower: min - AD_PADDING * range_size,
            upper: max + AD_PADDING * range_size,
            min,
            max,
            range_size,
        })
    }

    /// Open interval: a value equal to a bound is outside.
    pub fn contains(&self, value: f64) -> bool {
        self.lower < value && value < self.upper
    }
}

/// One range per task; `None` where a task has too few distinct values.
pub fn fit_per_task(responses: &[Vec<f64>]) -> Vec<Option<AdRange>> {
    responses.iter().map(|r| AdRange::fit(r).ok()).collect()
}
