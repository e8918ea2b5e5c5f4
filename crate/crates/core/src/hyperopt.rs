//! Hyperparameter search: seeded random search and Gaussian-process
//! Bayesian optimization with expected improvement.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("dimension '{0}': lower bound must be below upper bound")]
    EmptyRange(String),
    #[error("dimension '{0}': log scale needs a positive lower bound")]
    LogNonPositive(String),
    #[error("dimension '{0}': no choices")]
    NoChoices(String),
    #[error("duplicate dimension '{0}'")]
    Duplicate(String),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("budget {budget} must exceed n_init {n_init}")]
    BudgetBelowInit { budget: usize, n_init: usize },
    #[error("trial log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Domain {
    Continuous {
        lo: f64,
        hi: f64,
        #[serde(default)]
        log: bool,
    },
    Integer {
        lo: i64,
        hi: i64,
    },
    Categorical {
        choices: Vec<String>,
    },
}

// Unknown keys are still rejected by `Domain`; serde cannot combine
// `deny_unknown_fields` with `flatten` on the outer struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    #[serde(rename = "dimension")]
    pub dimensions: Vec<Dimension>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(v) => write!(f, "{v}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Choice(v) => f.write_str(v),
        }
    }
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            Value::Choice(_) => None,
        }
    }
}

pub type Point = Vec<Value>;

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self, SearchError> {
        let s = SearchSpace { dimensions };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        for (i, d) in self.dimensions.iter().enumerate() {
            if self.dimensions[..i].iter().any(|o| o.name == d.name) {
                return Err(SearchError::Duplicate(d.name.clone()));
            }
            match &d.domain {
                Domain::Continuous { lo, hi, log } => {
                    if lo.partial_cmp(hi) != Some(std::cmp::Ordering::Less) {
                        return Err(SearchError::EmptyRange(d.name.clone()));
                    }
                    if *log && *lo <= 0.0 {
                        return Err(SearchError::LogNonPositive(d.name.clone()));
                    }
                }
                Domain::Integer { lo, hi } => {
                    if lo >= hi {
                        return Err(SearchError::EmptyRange(d.name.clone()));
                    }
                }
                Domain::Categorical { choices } => {
                    if choices.is_empty() {
                        return Err(SearchError::NoChoices(d.name.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Point {
        self.dimensions
            .iter()
            .map(|d| match &d.domain {
                Domain::Continuous { lo, hi, log: false } => Value::Float(rng.gen_range(*lo..=*hi)),
                Domain::Continuous { lo, hi, log: true } => Value::Float(rng.gen_range(lo.ln()..=hi.ln()).exp()),
                Domain::Integer { lo, hi } => Value::Int(rng.gen_range(*lo..=*hi)),
                Domain::Categorical { choices } => Value::Choice(choices[rng.gen_range(0..choices.len())].clone()),
            })
            .collect()
    }

    /// Coordinates in the unit cube: scaled numeric dims (log dims on the
    /// log scale) and one-hot categoricals.
    pub fn encode(&self, point: &Point) -> Vec<f64> {
        let mut out = Vec::new();
        for (d, v) in self.dimensions.iter().zip(point) {
            match (&d.domain, v) {
                (Domain::Continuous { lo, hi, log }, v) => {
                    let x = v.as_f64().unwrap_or(*lo);
                    out.push(if *log {
                        (x.ln() - lo.ln()) / (hi.ln() - lo.ln())
                    } else {
                        (x - lo) / (hi - lo)
                    });
                }
                (Domain::Integer { lo, hi }, v) => {
                    out.push((v.as_f64().unwrap_or(*lo as f64) - *lo as f64) / (*hi - *lo) as f64)
                }
                (Domain::Categorical { choices }, v) => {
                    let s = v.to_string();
                    out.extend(choices.iter().map(|c| if *c == s { 1.0 } else { 0.0 }));
                }
            }
        }
        out
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.name == name)
    }

    /// Parses a value written by `Value`'s `Display` for dimension `i`.
    pub fn parse_value(&self, i: usize, s: &str) -> Option<Value> {
        match &self.dimensions.get(i)?.domain {
            Domain::Continuous { .. } => s.parse().ok().map(Value::Float),
            Domain::Integer { .. } => s.parse().ok().map(Value::Int),
            Domain::Categorical { choices } => choices.iter().find(|c| *c == s).cloned().map(Value::Choice),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Complete,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub point: Point,
    pub objective: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
}

impl SearchResult {
    /// Index of the lowest complete trial (earliest on ties).
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in self.trials.iter().enumerate() {
            if let Some(v) = t.objective {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn best(&self) -> Option<&Trial> {
        self.best_index().map(|i| &self.trials[i])
    }

    /// Lowest objective seen after each trial.
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut cur: Option<f64> = None;
        self.trials
            .iter()
            .map(|t| {
                if let Some(v) = t.objective {
                    cur = Some(cur.map_or(v, |c| c.min(v)));
                }
                cur
            })
            .collect()
    }
}

fn run_trial(point: Point, objective: &mut dyn FnMut(&Point) -> Result<f64, String>) -> Trial {
    match objective(&point) {
        Ok(v) if v.is_finite() => Trial {
            point,
            objective: Some(v),
            status: TrialStatus::Complete,
        },
        Ok(v) => Trial {
            point,
            objective: None,
            status: TrialStatus::Failed(format!("non-finite objective {v}")),
        },
        Err(e) => {
            log::warn!("trial failed: {e}");
            Trial {
                point,
                objective: None,
                status: TrialStatus::Failed(e),
            }
        }
    }
}

pub fn random_search(
    space: &SearchSpace,
    objective: &mut dyn FnMut(&Point) -> Result<f64, String>,
    budget: usize,
    seed: u64,
) -> Result<SearchResult, SearchError> {
    space.validate()?;
    if budget == 0 {
        return Err(SearchError::ZeroBudget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..budget)
        .map(|_| run_trial(space.sample(&mut rng), objective))
        .collect();
    Ok(SearchResult { trials })
}

/// Exact GP regression with a squared-exponential kernel of unit signal
/// variance on standardized targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    lengthscale: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
}

fn se_kernel(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (lengthscale * lengthscale)).exp()
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * x[k]).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

fn solve_upper_t(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

pub const JITTER_LADDER: [f64; 7] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
pub const LENGTHSCALE_GRID: [f64; 8] = [0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0];

impl GaussianProcess {
    /// Fits with the smallest jitter on the ladder that factorizes.
    pub fn fit(x: &[Vec<f64>], y: &[f64], lengthscale: f64) -> Option<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return None;
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = se_kernel(&x[i], &x[j], lengthscale);
            }
        }
        for jitter in JITTER_LADDER {
            let mut kj = k.clone();
            for i in 0..n {
                kj[i * n + i] += jitter;
            }
            let Some(chol) = cholesky(&kj, n) else { continue };
            let alpha = solve_upper_t(&chol, n, &solve_lower(&chol, n, &ys));
            let fit: f64 = ys.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
            let lml = -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Some(GaussianProcess {
                x: x.to_vec(),
                lengthscale,
                chol,
                alpha,
                y_mean,
                y_scale,
                jitter,
                log_marginal_likelihood: lml,
            });
        }
        None
    }

    /// Fits every lengthscale on the grid and keeps the most likely.
    pub fn fit_best(x: &[Vec<f64>], y: &[f64]) -> Option<Self> {
        LENGTHSCALE_GRID
            .iter()
            .filter_map(|&l| GaussianProcess::fit(x, y, l))
            .fold(None, |best: Option<Self>, gp| match best {
                Some(b) if b.log_marginal_likelihood >= gp.log_marginal_likelihood => Some(b),
                _ => Some(gp),
            })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Posterior mean and variance in the original objective units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let ks: Vec<f64> = self.x.iter().map(|xi| se_kernel(xi, x, self.lengthscale)).collect();
        let mean: f64 = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = solve_lower(&self.chol, n, &ks);
        let var = (1.0 - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale)
    }
}

/// Expected improvement below `best` for a Gaussian with the given mean and
/// standard deviation.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    if std <= 0.0 {
        return (best - mean).max(0.0);
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (best - mean) / std;
    ((best - mean) * n.cdf(z) + std * n.pdf(z)).max(0.0)
}

pub const DEFAULT_CANDIDATES: usize = 1024;

/// `n_init` points drawn exactly as `random_search` with the same seed
/// would draw its first `n_init`, then EI-selected points from a fresh
/// pool of `n_candidates` random points per iteration.
pub fn gp_ei_search(
    space: &SearchSpace,
    objective: &mut dyn FnMut(&Point) -> Result<f64, String>,
    budget: usize,
    n_init: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<SearchResult, SearchError> {
    space.validate()?;
    if budget <= n_init {
        return Err(SearchError::BudgetBelowInit { budget, n_init });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut trials: Vec<Trial> = (0..n_init)
        .map(|_| run_trial(space.sample(&mut init_rng), objective))
        .collect();
    while trials.len() < budget {
        let done: Vec<&Trial> = trials.iter().filter(|t| t.objective.is_some()).collect();
        let x: Vec<Vec<f64>> = done.iter().map(|t| space.encode(&t.point)).collect();
        let y: Vec<f64> = done.iter().map(|t| t.objective.expect("filtered")).collect();
        let candidates: Vec<Point> = (0..n_candidates.max(1)).map(|_| space.sample(&mut pool_rng)).collect();
        let next = match GaussianProcess::fit_best(&x, &y) {
            Some(gp) => {
                let best = y.iter().copied().fold(f64::INFINITY, f64::min);
                let mut pick = (0, f64::NEG_INFINITY);
                for (i, c) in candidates.iter().enumerate() {
                    let (m, v) = gp.predict(&space.encode(c));
                    let ei = expected_improvement(m, v.sqrt(), best);
                    if ei > pick.1 {
                        pick = (i, ei);
                    }
                }
                candidates[pick.0].clone()
            }
            None => {
                log::warn!("GP fit failed at every jitter level; sampling at random");
                candidates[0].clone()
            }
        };
        trials.push(run_trial(next, objective));
    }
    Ok(SearchResult { trials })
}

pub fn trial_log_csv(space: &SearchSpace, result: &SearchResult) -> String {
    let mut s = String::from("trial,status,objective");
    for d in &space.dimensions {
        s.push(',');
        s.push_str(&d.name);
    }
    s.push('\n');
    for (i, t) in result.trials.iter().enumerate() {
        let status = match &t.status {
            TrialStatus::Complete => "complete".to_string(),
            TrialStatus::Failed(m) => format!("failed: {}", m.replace([',', '\n', '"'], " ")),
        };
        let obj = t.objective.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{i},{status},{obj}"));
        for v in &t.point {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn parse_trial_log(space: &SearchSpace, text: &str) -> Result<SearchResult, SearchError> {
    let err = |m: String| SearchError::Log(m);
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut trials = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| err(e.to_string()))?;
        if row.len() != 3 + space.dimensions.len() {
            return Err(err(format!("expected {} fields", 3 + space.dimensions.len())));
        }
        let status = match &row[1] {
            "complete" => TrialStatus::Complete,
            s => TrialStatus::Failed(s.strip_prefix("failed: ").unwrap_or(s).to_string()),
        };
        let objective = match &row[2] {
            "" => None,
            s => Some(s.parse().map_err(|_| err(format!("bad objective '{s}'")))?),
        };
        let point = (0..space.dimensions.len())
            .map(|i| {
                space
                    .parse_value(i, &row[3 + i])
                    .ok_or_else(|| err(format!("bad value '{}' for {}", &row[3 + i], space.dimensions[i].name)))
            })
            .collect::<Result<_, _>>()?;
        trials.push(Trial {
            point,
            objective,
            status,
        });
    }
    Ok(SearchResult { trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> SearchSpace {
        SearchSpace::new(vec![Dimension {
            name: "x".into(),
            domain: Domain::Continuous {
                lo: 0.0,
                hi: 1.0,
                log: false,
            },
        }])
        .unwrap()
    }

    fn quad(p: &Point) -> Result<f64, String> {
        let x = p[0].as_f64().unwrap();
        Ok((x - 0.3) * (x - 0.3))
    }

    #[test]
    fn space_validation() {
        let bad = |domain| {
            SearchSpace::new(vec![Dimension {
                name: "a".into(),
                domain,
            }])
            .is_err()
        };
        assert!(bad(Domain::Continuous {
            lo: 1.0,
            hi: 1.0,
            log: false
        }));
        assert!(bad(Domain::Continuous {
            lo: 0.0,
            hi: 1.0,
            log: true
        }));
        assert!(bad(Domain::Integer { lo: 3, hi: 2 }));
        assert!(bad(Domain::Categorical { choices: vec![] }));
    }

    #[test]
    fn unknown_dimension_keys_are_rejected() {
        let text = "[[dimension]]\nname = \"lr\"\ntype = \"continuous\"\nlo = 0.1\nhi = 1.0\nlgo = true\n";
        assert!(toml::from_str::<SearchSpace>(text).is_err());
    }

    #[test]
    fn space_parses_from_toml() {
        let text = r#"
            [[dimension]]
            name = "learning_rate"
            type = "continuous"
            lo = 1e-4
            hi = 1e-2
            log = true

            [[dimension]]
            name = "n_layers"
            type = "integer"
            lo = 1
            hi = 3

            [[dimension]]
            name = "readout"
            type = "categorical"
            choices = ["sum", "mean"]
        "#;
        let space: SearchSpace = toml::from_str(text).unwrap();
        space.validate().unwrap();
        let p = space.sample(&mut ChaCha8Rng::seed_from_u64(0));
        let lr = p[0].as_f64().unwrap();
        assert!((1e-4..=1e-2).contains(&lr));
        let e = space.encode(&p);
        assert_eq!(e.len(), 4);
        assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn budget_one_is_best() {
        let r = random_search(&unit(), &mut quad, 1, 3).unwrap();
        assert_eq!(r.best_index(), Some(0));
        assert!(random_search(&unit(), &mut quad, 0, 3).is_err());
    }

    #[test]
    fn random_search_quadratic() {
        let r = random_search(&unit(), &mut quad, 50, 7).unwrap();
        let x = r.best().unwrap().point[0].as_f64().unwrap();
        assert!((x - 0.3).abs() < 0.05);
        assert_eq!(r, random_search(&unit(), &mut quad, 50, 7).unwrap());
        let b = r.best_so_far();
        assert!(b.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn failed_trials_excluded() {
        let mut n = 0;
        let mut f = |p: &Point| {
            n += 1;
            if n % 2 == 0 {
                Err("diverged".to_string())
            } else {
                quad(p)
            }
        };
        let r = random_search(&unit(), &mut f, 10, 1).unwrap();
        assert!(r.best().unwrap().objective.is_some());
        assert_eq!(r.trials.iter().filter(|t| t.objective.is_none()).count(), 5);
    }

    #[test]
    fn ei_properties() {
        assert_eq!(expected_improvement(1.0, 0.0, 0.5), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 0.5), 0.0);
        assert_eq!(expected_improvement(0.2, 0.0, 0.5), 0.3);
        for (m, s) in [(0.0, 1.0), (5.0, 0.1), (-3.0, 2.0), (100.0, 1e-3)] {
            assert!(expected_improvement(m, s, 0.0) >= 0.0);
        }
    }

    #[test]
    fn gp_interpolates_noiseless_points() {
        let x: Vec<Vec<f64>> = [0.0, 0.2, 0.45, 0.7, 1.0].iter().map(|&v| vec![v]).collect();
        let y: Vec<f64> = x.iter().map(|v| (v[0] * 6.0).sin()).collect();
        let gp = GaussianProcess::fit_best(&x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (m, v) = gp.predict(xi);
            assert!((m - yi).abs() < 1e-6, "{m} vs {yi}");
            assert!(v < 1e-6);
        }
    }

    #[test]
    fn singular_kernel_escalates_jitter() {
        let x = vec![vec![0.5]; 4];
        let y = vec![1.0, 1.0, 1.0, 1.0];
        let gp = GaussianProcess::fit(&x, &y, 0.2).unwrap();
        assert!(gp.jitter >= 1e-8);
        assert!(gp.predict(&[0.5]).0.is_finite());
    }

    #[test]
    fn gp_ei_beats_paired_random() {
        for seed in 0..3 {
            let gp = gp_ei_search(&unit(), &mut quad, 30, 5, DEFAULT_CANDIDATES, seed).unwrap();
            let rs = random_search(&unit(), &mut quad, 30, seed).unwrap();
            assert_eq!(gp.trials[..5], rs.trials[..5]);
            let g = gp.best().unwrap();
            assert!((g.point[0].as_f64().unwrap() - 0.3).abs() < 0.05);
            assert!(g.objective <= rs.best().unwrap().objective);
        }
    }

    #[test]
    fn trial_log_round_trip() {
        let space: SearchSpace = toml::from_str(
            "[[dimension]]\nname = \"x\"\ntype = \"continuous\"\nlo = 0.0\nhi = 1.0\n\n[[dimension]]\nname = \"k\"\ntype = \"categorical\"\nchoices = [\"a\", \"b\"]\n",
        )
        .unwrap();
        let mut n = 0;
        let mut f = |p: &Point| {
            n += 1;
            if n == 2 {
                Err("boom, bad".into())
            } else {
                quad(p)
            }
        };
        let r = random_search(&space, &mut f, 4, 2).unwrap();
        let text = trial_log_csv(&space, &r);
        let back = parse_trial_log(&space, &text).unwrap();
        assert_eq!(trial_log_csv(&space, &back), text);
        assert_eq!(back.best_index(), r.best_index());
    }
}
