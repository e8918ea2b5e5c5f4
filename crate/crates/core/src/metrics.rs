//! RMSE, coefficient of determination, concordance index, and
//! record-weighted aggregation across tasks.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} true values, {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("true values have zero variance")]
    ZeroVariance,
    #[error("no pair of unequal true values")]
    NoComparablePairs,
    #[error("all task counts are zero")]
    AllCountsZero,
    #[error("non-finite value in input")]
    NonFinite,
}

fn check(y: &[f64], y_hat: &[f64]) -> Result<(), MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Coefficient of determination `1 − SS_res / SS_tot`; negative when the
/// predictor is worse than the mean.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Concordance index in `O(n log n)`.
///
/// Over pairs with `y_i > y_j`: 1 if `ŷ_i > ŷ_j`, 0.5 on a prediction tie,
/// 0 otherwise. Pairs with equal true values are skipped.
pub fn concordance_index(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let n = y.len();
    let mut sorted_hat = y_hat.to_vec();
    sorted_hat.sort_by(f64::total_cmp);
    sorted_hat.dedup();
    let rank = |v: f64| sorted_hat.partition_point(|&s| s < v);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));

    let mut tree = Fenwick(vec![0; sorted_hat.len() + 1]);
    let (mut inserted, mut pairs, mut concordant, mut ties) = (0u64, 0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && y[order[end]].partial_cmp(&y[order[start]]) == Some(Ordering::Equal) {
            end += 1;
        }
        // every inserted element has a strictly smaller true value
        for &i in &order[start..end] {
            let r = rank(y_hat[i]);
            let below = tree.prefix(r);
            concordant += below;
            ties += tree.prefix(r + 1) - below;
            pairs += inserted;
        }
        for &i in &order[start..end] {
            tree.add(rank(y_hat[i]));
        }
        inserted += (end - start) as u64;
        start = end;
    }
    if pairs == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / pairs as f64)
}

/// Count-weighted mean over tasks whose metric is defined. Returns the mean
/// and whether any task with records was excluded.
pub fn weighted_mean(values: &[Option<f64>], counts: &[usize]) -> Result<(f64, bool), MetricError> {
    if values.len() != counts.len() {
        return Err(MetricError::LengthMismatch(values.len(), counts.len()));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(MetricError::AllCountsZero);
    }
    let (mut num, mut den, mut excluded) = (0.0, 0usize, false);
    for (v, &c) in values.iter().zip(counts) {
        match v {
            Some(v) if c > 0 => {
                num += v * c as f64;
                den += c;
            }
            None if c > 0 => excluded = true,
            _ => {}
        }
    }
    if den == 0 {
        return Err(MetricError::Empty);
    }
    Ok((num / den as f64, excluded))
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for `n = 1`).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    pub n_records: usize,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
    pub ci: Option<f64>,
}

impl TaskMetrics {
    pub fn compute(task: usize, y: &[f64], y_hat: &[f64]) -> Result<Self, MetricError> {
        if y.len() != y_hat.len() {
            return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
        }
        if y.is_empty() {
            return Ok(TaskMetrics {
                task,
                n_records: 0,
                rmse: None,
                r2: None,
                ci: None,
            });
        }
        let defined = |r: Result<f64, MetricError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(MetricError::ZeroVariance | MetricError::NoComparablePairs) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(TaskMetrics {
            task,
            n_records: y.len(),
            rmse: Some(rmse(y, y_hat)?),
            r2: defined(r2(y, y_hat))?,
            ci: defined(concordance_index(y, y_hat))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub value: Option<f64>,
    /// Some task with records had this metric undefined and was left out.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<TaskMetrics>,
    pub rmse: Aggregate,
    pub r2: Aggregate,
    pub ci: Aggregate,
}

impl EvalReport {
    pub fn from_tasks(tasks: Vec<TaskMetrics>) -> Result<Self, MetricError> {
        let counts: Vec<usize> = tasks.iter().map(|t| t.n_records).collect();
        let agg = |pick: fn(&TaskMetrics) -> Option<f64>| -> Result<Aggregate, MetricError> {
            let values: Vec<_> = tasks.iter().map(pick).collect();
            match weighted_mean(&values, &counts) {
                Ok((v, excluded)) => Ok(Aggregate {
                    value: Some(v),
                    excluded,
                }),
                Err(MetricError::Empty) => Ok(Aggregate {
                    value: None,
                    excluded: true,
                }),
                Err(e) => Err(e),
            }
        };
        Ok(EvalReport {
            rmse: agg(|t| t.rmse)?,
            r2: agg(|t| t.r2)?,
            ci: agg(|t| t.ci)?,
            tasks,
        })
    }

    /// Per-task `y` and `ŷ` columns, indexed by task.
    pub fn evaluate(y: &[Vec<f64>], y_hat: &[Vec<f64>]) -> Result<Self, MetricError> {
        if y.len() != y_hat.len() {
            return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
        }
        let tasks = y
            .iter()
            .zip(y_hat)
            .enumerate()
            .map(|(t, (a, b))| TaskMetrics::compute(t, a, b))
            .collect::<Result<_, _>>()?;
        EvalReport::from_tasks(tasks)
    }

    pub fn n_records(&self) -> usize {
        self.tasks.iter().map(|t| t.n_records).sum()
    }

    /// Mean RMSE minus mean CI over tasks, the lower-is-better selection
    /// score. Unweighted across tasks; falls back to RMSE alone when no
    /// task has a defined CI.
    pub fn composite(&self) -> Option<f64> {
        let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        let rmse = mean(self.tasks.iter().filter_map(|t| t.rmse).collect())?;
        match mean(self.tasks.iter().filter_map(|t| t.ci).collect()) {
            Some(ci) => Some(rmse - ci),
            None => Some(rmse),
        }
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        let v: Vec<f64> = self.tasks.iter().filter_map(|t| t.rmse).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_ci(&self) -> Option<f64> {
        let v: Vec<f64> = self.tasks.iter().filter_map(|t| t.ci).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_ci(y: &[f64], p: &[f64]) -> Option<f64> {
        let (mut score, mut n) = (0.0, 0usize);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] > y[j] {
                    n += 1;
                    if p[i] > p[j] {
                        score += 1.0;
                    } else if p[i] == p[j] {
                        score += 0.5;
                    }
                }
            }
        }
        (n > 0).then(|| score / n as f64)
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        // root is applied: mean squared error here would be 12.5
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[], &[]), Err(MetricError::Empty));
        assert_eq!(rmse(&[1.0], &[]), Err(MetricError::LengthMismatch(1, 0)));
    }

    #[test]
    fn r2_examples() {
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(MetricError::ZeroVariance));
        assert!(r2(&[1.0, 2.0], &[5.0, -5.0]).unwrap() < 0.0);
    }

    #[test]
    fn ci_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(concordance_index(&y, &[7.0; 4]).unwrap(), 0.5);
        assert_eq!(concordance_index(&y, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(concordance_index(&y, &[4.0, 3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            concordance_index(&[1.0, 1.0], &[0.0, 1.0]),
            Err(MetricError::NoComparablePairs)
        );
    }

    #[test]
    fn aggregation() {
        let (v, excluded) = weighted_mean(&[Some(1.0), Some(0.5)], &[2, 8]).unwrap();
        assert_eq!(v, 0.6);
        assert!(!excluded);
        assert_eq!(weighted_mean(&[Some(0.3)], &[4]).unwrap(), (0.3, false));
        let (v, excluded) = weighted_mean(&[Some(1.0), None, Some(0.5)], &[2, 5, 8]).unwrap();
        assert_eq!(v, 0.6);
        assert!(excluded);
        assert_eq!(weighted_mean(&[Some(1.0)], &[0]), Err(MetricError::AllCountsZero));
    }

    #[test]
    fn report_flags_undefined_ci() {
        let y = vec![vec![1.0, 2.0, 3.0], vec![5.0, 5.0]];
        let p = vec![vec![1.0, 2.0, 3.0], vec![4.0, 6.0]];
        let r = EvalReport::evaluate(&y, &p).unwrap();
        assert_eq!(r.ci.value, Some(1.0));
        assert!(r.ci.excluded);
        assert!(!r.rmse.excluded);
        assert_eq!(r.n_records(), 5);
    }

    #[test]
    fn perfect_predictor_composite_is_minus_one() {
        let y = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let r = EvalReport::evaluate(&y, &y).unwrap();
        assert_eq!(r.composite(), Some(-1.0));
        let flat = vec![vec![2.0, 2.0]];
        let r = EvalReport::evaluate(&flat, &[vec![1.0, 3.0]]).unwrap();
        assert_eq!(r.composite(), Some(1.0));
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ci_matches_brute_force(pairs in prop::collection::vec((0u8..6, 0u8..6), 2..50)) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1 as f64 * 0.5).collect();
            match brute_ci(&y, &p) {
                Some(b) => prop_assert_eq!(concordance_index(&y, &p).unwrap(), b),
                None => prop_assert!(concordance_index(&y, &p).is_err()),
            }
        }

        #[test]
        fn ci_rank_invariant(v in prop::collection::vec((-10.0f64..10.0, -5.0f64..5.0), 2..40)) {
            let y: Vec<f64> = v.iter().map(|p| p.0.round()).collect();
            let p: Vec<f64> = v.iter().map(|p| p.1).collect();
            let q: Vec<f64> = p.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            if let Ok(a) = concordance_index(&y, &p) {
                prop_assert_eq!(a, concordance_index(&y, &q).unwrap());
            }
        }

        #[test]
        fn rmse_symmetric_nonnegative(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..30)) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            let r = rmse(&a, &b).unwrap();
            prop_assert_eq!(r, rmse(&b, &a).unwrap());
            prop_assert!(r >= 0.0);
            prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn mean_predictor_r2_zero(y in prop::collection::vec(-100.0f64..100.0, 2..30)) {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            if let Ok(v) = r2(&y, &vec![mean; y.len()]) {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
