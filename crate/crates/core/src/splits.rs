//! Cross-validation fold assignment: warm, cold-drug, cold-target,
//! cold-drug-cluster, and random, plus the hyperparameter holdout view.
//!
//! All splitters work on sample indices; `Entities` carries the compound and
//! protein of every sample as dense ids.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compound::Fingerprint;
use crate::dataset::PairSample;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("k must be at least 2, got {0}")]
    BadK(usize),
    #[error("{n} samples cannot fill {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("{axis} '{name}' has {count} observation(s); warm split needs at least 2")]
    TooFewObservations { axis: Axis, name: String, count: usize },
    #[error("{n} {axis} entities cannot fill {k} folds")]
    TooFewEntities { axis: Axis, n: usize, k: usize },
    #[error("could not place {axis} '{name}' in two folds")]
    Infeasible { axis: Axis, name: String },
    #[error("cluster {cluster} holds {size} of {n} samples, more than n(k-1)/k allows")]
    ClusterTooLarge { cluster: usize, size: usize, n: usize },
    #[error("clustering covers {got} compounds, expected {expected}")]
    ClusteringMismatch { got: usize, expected: usize },
    #[error("holdout needs at least 10 samples, got {0}")]
    HoldoutTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Drug,
    Target,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Drug => "drug",
            Axis::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Warm,
    ColdDrug,
    ColdTarget,
    ColdCluster,
    Random,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Warm,
        Scheme::ColdDrug,
        Scheme::ColdTarget,
        Scheme::ColdCluster,
        Scheme::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Warm => "warm",
            Scheme::ColdDrug => "cold-drug",
            Scheme::ColdTarget => "cold-target",
            Scheme::ColdCluster => "cold-cluster",
            Scheme::Random => "random",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown scheme '{s}'"))
    }
}

/// Compound and protein of each sample as dense ids, with their names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entities {
    pub compound: Vec<usize>,
    pub protein: Vec<usize>,
    pub compound_names: Vec<String>,
    pub protein_names: Vec<String>,
}

impl Entities {
    pub fn from_pairs(pairs: &[PairSample]) -> Self {
        fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, s: &str) -> usize {
            *index.entry(s.to_string()).or_insert_with(|| {
                names.push(s.to_string());
                names.len() - 1
            })
        }
        let (mut cn, mut ci, mut pn, mut pi) = (Vec::new(), HashMap::new(), Vec::new(), HashMap::new());
        let compound = pairs.iter().map(|p| intern(&mut cn, &mut ci, &p.smiles)).collect();
        let protein = pairs.iter().map(|p| intern(&mut pn, &mut pi, &p.protein_id)).collect();
        Entities {
            compound,
            protein,
            compound_names: cn,
            protein_names: pn,
        }
    }

    pub fn len(&self) -> usize {
        self.compound.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compound.is_empty()
    }

    pub fn keys(&self, axis: Axis) -> &[usize] {
        match axis {
            Axis::Drug => &self.compound,
            Axis::Target => &self.protein,
        }
    }

    fn names(&self, axis: Axis) -> &[String] {
        match axis {
            Axis::Drug => &self.compound_names,
            Axis::Target => &self.protein_names,
        }
    }

    fn n_entities(&self, axis: Axis) -> usize {
        self.names(axis).len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
    pub scheme: Scheme,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }
}

fn check_k(n: usize, k: usize) -> Result<(), SplitError> {
    if k < 2 {
        return Err(SplitError::BadK(k));
    }
    if n < k {
        return Err(SplitError::TooFewSamples { n, k });
    }
    Ok(())
}

/// Shuffled round-robin assignment.
pub fn random_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment, SplitError> {
    check_k(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(FoldAssignment {
        k,
        folds,
        scheme: Scheme::Random,
        seed,
    })
}

/// Per-entity per-fold sample counts, for tracking how many folds each
/// entity occupies while samples move.
struct Coverage {
    counts: Vec<Vec<usize>>,
    n_folds: Vec<usize>,
}

impl Coverage {
    fn new(keys: &[usize], n_entities: usize, folds: &[usize], k: usize) -> Self {
        let mut c = Coverage {
            counts: vec![vec![0; k]; n_entities],
            n_folds: vec![0; n_entities],
        };
        for (&e, &f) in keys.iter().zip(folds) {
            c.inc(e, f);
        }
        c
    }

    fn inc(&mut self, e: usize, f: usize) {
        if self.counts[e][f] == 0 {
            self.n_folds[e] += 1;
        }
        self.counts[e][f] += 1;
    }

    fn dec(&mut self, e: usize, f: usize) {
        self.counts[e][f] -= 1;
        if self.counts[e][f] == 0 {
            self.n_folds[e] -= 1;
        }
    }

    fn penalty(&self, e: usize) -> usize {
        2usize.saturating_sub(self.n_folds[e])
    }
}

struct WarmState<'a> {
    ent: &'a Entities,
    folds: Vec<usize>,
    drug: Coverage,
    target: Coverage,
}

impl WarmState<'_> {
    fn penalty_of(&self, samples: &[usize]) -> usize {
        let mut drugs: Vec<usize> = samples.iter().map(|&i| self.ent.compound[i]).collect();
        let mut targets: Vec<usize> = samples.iter().map(|&i| self.ent.protein[i]).collect();
        drugs.sort_unstable();
        drugs.dedup();
        targets.sort_unstable();
        targets.dedup();
        drugs.iter().map(|&e| self.drug.penalty(e)).sum::<usize>()
            + targets.iter().map(|&e| self.target.penalty(e)).sum::<usize>()
    }

    fn relocate(&mut self, i: usize, to: usize) {
        let from = self.folds[i];
        let (c, p) = (self.ent.compound[i], self.ent.protein[i]);
        self.drug.dec(c, from);
        self.target.dec(p, from);
        self.drug.inc(c, to);
        self.target.inc(p, to);
        self.folds[i] = to;
    }

    fn total_penalty(&self) -> usize {
        (0..self.drug.n_folds.len())
            .map(|e| self.drug.penalty(e))
            .sum::<usize>()
            + (0..self.target.n_folds.len())
                .map(|e| self.target.penalty(e))
                .sum::<usize>()
    }

    /// Moves `i` to `to` if the penalty over affected entities drops (or,
    /// with `allow_equal`, does not rise). Returns whether it moved.
    fn try_move(&mut self, i: usize, to: usize, allow_equal: bool) -> bool {
        let from = self.folds[i];
        let before = self.penalty_of(&[i]);
        self.relocate(i, to);
        let after = self.penalty_of(&[i]);
        if after < before || (allow_equal && after == before) {
            true
        } else {
            self.relocate(i, from);
            false
        }
    }

    fn try_swap(&mut self, i: usize, j: usize) -> bool {
        let (fi, fj) = (self.folds[i], self.folds[j]);
        let before = self.penalty_of(&[i, j]);
        self.relocate(i, fj);
        self.relocate(j, fi);
        if self.penalty_of(&[i, j]) < before {
            true
        } else {
            self.relocate(i, fi);
            self.relocate(j, fj);
            false
        }
    }

    fn violating_samples(&self) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.drug.penalty(self.ent.compound[i]) > 0 || self.target.penalty(self.ent.protein[i]) > 0)
            .collect()
    }

    fn repair(&mut self, k: usize) {
        loop {
            let mut improved = false;
            for i in self.violating_samples() {
                if self.penalty_of(&[i]) == 0 {
                    continue;
                }
                let from = self.folds[i];
                if (0..k).filter(|&g| g != from).any(|g| self.try_move(i, g, false)) {
                    improved = true;
                    continue;
                }
                let n = self.folds.len();
                if (0..n).any(|j| self.folds[j] != from && self.try_swap(i, j)) {
                    improved = true;
                }
            }
            if !improved || self.total_penalty() == 0 {
                break;
            }
        }
    }

    /// Moves samples from the largest to the smallest fold while coverage
    /// is preserved, until sizes differ by at most one.
    fn balance(&mut self, k: usize) {
        loop {
            let mut sizes = vec![0usize; k];
            for &f in &self.folds {
                sizes[f] += 1;
            }
            let big = (0..k)
                .max_by_key(|&f| (sizes[f], std::cmp::Reverse(f)))
                .expect("k >= 2");
            let small = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 2");
            if sizes[big] <= sizes[small] + 1 {
                break;
            }
            let members: Vec<usize> = (0..self.folds.len()).filter(|&i| self.folds[i] == big).collect();
            let moved = members.into_iter().any(|i| self.try_move(i, small, true));
            if !moved {
                break;
            }
        }
    }
}

/// Every drug and every target lands in at least two folds.
///
/// Samples are grouped by compound (scarcest first) and dealt round-robin,
/// which covers compounds by construction; target coverage is then
/// repaired by moves and swaps, and fold sizes balanced.
pub fn warm_split(ent: &Entities, k: usize, seed: u64) -> Result<FoldAssignment, SplitError> {
    let n = ent.len();
    check_k(n, k)?;
    for axis in [Axis::Drug, Axis::Target] {
        let mut counts = vec![0usize; ent.n_entities(axis)];
        for &e in ent.keys(axis) {
            counts[e] += 1;
        }
        if let Some(e) = counts.iter().position(|&c| c < 2) {
            return Err(SplitError::TooFewObservations {
                axis,
                name: ent.names(axis)[e].clone(),
                count: counts[e],
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_compound: Vec<Vec<usize>> = vec![Vec::new(); ent.compound_names.len()];
    for i in 0..n {
        by_compound[ent.compound[i]].push(i);
    }
    for group in &mut by_compound {
        group.shuffle(&mut rng);
    }
    by_compound.shuffle(&mut rng);
    by_compound.sort_by_key(|g| g.len());
    let mut folds = vec![0; n];
    for (pos, &i) in by_compound.iter().flatten().enumerate() {
        folds[i] = pos % k;
    }

    let mut state = WarmState {
        ent,
        drug: Coverage::new(&ent.compound, ent.compound_names.len(), &folds, k),
        target: Coverage::new(&ent.protein, ent.protein_names.len(), &folds, k),
        folds,
    };
    state.repair(k);
    state.balance(k);
    for (axis, cov) in [(Axis::Drug, &state.drug), (Axis::Target, &state.target)] {
        if let Some(e) = (0..cov.n_folds.len()).find(|&e| cov.penalty(e) > 0) {
            return Err(SplitError::Infeasible {
                axis,
                name: ent.names(axis)[e].clone(),
            });
        }
    }
    Ok(FoldAssignment {
        k,
        folds: state.folds,
        scheme: Scheme::Warm,
        seed,
    })
}

/// Entities on `axis` are partitioned across folds: each goes, in order of
/// decreasing sample count, to the fold with the fewest entities (then the
/// fewest samples, then the lowest index).
pub fn cold_entity_split(ent: &Entities, k: usize, seed: u64, axis: Axis) -> Result<FoldAssignment, SplitError> {
    let n = ent.len();
    check_k(n, k)?;
    let n_ent = ent.n_entities(axis);
    if n_ent < k {
        return Err(SplitError::TooFewEntities { axis, n: n_ent, k });
    }
    let keys = ent.keys(axis);
    let mut counts = vec![0usize; n_ent];
    for &e in keys {
        counts[e] += 1;
    }
    let mut order: Vec<usize> = (0..n_ent).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&e| std::cmp::Reverse(counts[e]));
    let (mut n_in, mut load) = (vec![0usize; k], vec![0usize; k]);
    let mut fold_of = vec![0; n_ent];
    for e in order {
        let f = (0..k).min_by_key(|&f| (n_in[f], load[f], f)).expect("k >= 2");
        fold_of[e] = f;
        n_in[f] += 1;
        load[f] += counts[e];
    }
    Ok(FoldAssignment {
        k,
        folds: keys.iter().map(|&e| fold_of[e]).collect(),
        scheme: match axis {
            Axis::Drug => Scheme::ColdDrug,
            Axis::Target => Scheme::ColdTarget,
        },
        seed,
    })
}

pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster id per compound, numbered by first appearance.
    pub ids: Vec<usize>,
    pub n_clusters: usize,
    pub threshold: f64,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-linkage clusters: connected components of the graph joining
/// compounds with Tanimoto similarity strictly above `threshold`.
pub fn cluster_compounds(fps: &[Fingerprint], threshold: f64) -> Clustering {
    let n = fps.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let pops: Vec<u32> = fps.iter().map(Fingerprint::popcount).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| pops[i]);
    for (a_pos, &a) in order.iter().enumerate() {
        for &b in &order[a_pos + 1..] {
            // similarity is at most |a| / |b| for popcounts |a| <= |b|
            if pops[b] > 0 && pops[a] as f64 / pops[b] as f64 <= threshold {
                break;
            }
            let sim = crate::compound::tanimoto(&fps[a], &fps[b]).unwrap_or(0.0);
            if sim > threshold {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut label = HashMap::new();
    let ids = (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = label.len();
            *label.entry(r).or_insert(next)
        })
        .collect();
    Clustering {
        ids,
        n_clusters: label.len(),
        threshold,
    }
}

/// Whole clusters go to folds, largest first onto the lightest fold (ties
/// to the lowest index); equal-size clusters are ordered by `seed`.
pub fn cold_cluster_split(
    ent: &Entities,
    clustering: &Clustering,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, SplitError> {
    let n = ent.len();
    check_k(n, k)?;
    if clustering.ids.len() != ent.compound_names.len() {
        return Err(SplitError::ClusteringMismatch {
            got: clustering.ids.len(),
            expected: ent.compound_names.len(),
        });
    }
    let sample_cluster: Vec<usize> = ent.compound.iter().map(|&c| clustering.ids[c]).collect();
    let folds = assign_clusters(&sample_cluster, clustering.n_clusters, k, seed)?;
    Ok(FoldAssignment {
        k,
        folds,
        scheme: Scheme::ColdCluster,
        seed,
    })
}

/// Greedy cluster-to-fold assignment on per-sample cluster ids.
pub fn assign_clusters(
    sample_cluster: &[usize],
    n_clusters: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, SplitError> {
    let n = sample_cluster.len();
    let mut sizes = vec![0usize; n_clusters];
    for &c in sample_cluster {
        sizes[c] += 1;
    }
    let present = sizes.iter().filter(|&&s| s > 0).count();
    if present < k {
        return Err(SplitError::TooFewEntities {
            axis: Axis::Drug,
            n: present,
            k,
        });
    }
    if let Some(c) = (0..n_clusters).find(|&c| sizes[c] * k > n * (k - 1)) {
        return Err(SplitError::ClusterTooLarge {
            cluster: c,
            size: sizes[c],
            n,
        });
    }
    let mut order: Vec<usize> = (0..n_clusters).filter(|&c| sizes[c] > 0).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&c| std::cmp::Reverse(sizes[c]));
    let mut load = vec![0usize; k];
    let mut fold_of = vec![0; n_clusters];
    for c in order {
        let f = (0..k).min_by_key(|&f| (load[f], f)).expect("k >= 2");
        fold_of[c] = f;
        load[f] += sizes[c];
    }
    Ok(sample_cluster.iter().map(|&c| fold_of[c]).collect())
}

/// A random 90/10 split in which the 10% holdout is spread evenly over
/// `k` random folds, so each fold's validation view (fold minus holdout)
/// is about 18% and each training view (other folds, holdout included)
/// about 80% of the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Holdout {
    pub in_holdout: Vec<bool>,
    pub folds: FoldAssignment,
}

impl Holdout {
    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.in_holdout.len()).filter(|&i| self.in_holdout[i]).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.in_holdout.len()).filter(|&i| !self.in_holdout[i]).collect()
    }

    pub fn train_view(&self, fold: usize) -> Vec<usize> {
        self.folds.train_indices(fold)
    }

    pub fn validation_view(&self, fold: usize) -> Vec<usize> {
        self.folds
            .test_indices(fold)
            .into_iter()
            .filter(|&i| !self.in_holdout[i])
            .collect()
    }
}

pub fn hyperopt_holdout(n: usize, k: usize, seed: u64) -> Result<Holdout, SplitError> {
    if n < 10 {
        return Err(SplitError::HoldoutTooSmall(n));
    }
    let folds = random_split(n, k, seed)?;
    let h = (n as f64 * 0.1).round() as usize;
    let mut in_holdout = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001);
    let mut fold_order: Vec<usize> = (0..k).collect();
    fold_order.shuffle(&mut rng);
    for (rank, &f) in fold_order.iter().enumerate() {
        let quota = h / k + usize::from(rank < h % k);
        let mut members = folds.test_indices(f);
        members.shuffle(&mut rng);
        for &i in members.iter().take(quota) {
            in_holdout[i] = true;
        }
    }
    Ok(Holdout { in_holdout, folds })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("entity {entity} appears in folds {a} and {b}")]
    Leak { entity: usize, a: usize, b: usize },
    #[error("entity {entity} appears in only {folds} fold(s)")]
    Undercovered { entity: usize, folds: usize },
    #[error("fold {0} is empty")]
    EmptyFold(usize),
    #[error("{got} fold labels for {expected} samples")]
    Length { got: usize, expected: usize },
    #[error("fold index {0} out of range")]
    FoldOutOfRange(usize),
}

fn audit_basic(fa: &FoldAssignment, n: usize) -> Result<(), AuditError> {
    if fa.folds.len() != n {
        return Err(AuditError::Length {
            got: fa.folds.len(),
            expected: n,
        });
    }
    if let Some(&f) = fa.folds.iter().find(|&&f| f >= fa.k) {
        return Err(AuditError::FoldOutOfRange(f));
    }
    if let Some(f) = fa.fold_sizes().iter().position(|&s| s == 0) {
        return Err(AuditError::EmptyFold(f));
    }
    Ok(())
}

/// Checks that train and test sets share no key for every fold, i.e. each
/// key lives in exactly one fold.
pub fn audit_disjoint(keys: &[usize], fa: &FoldAssignment) -> Result<(), AuditError> {
    audit_basic(fa, keys.len())?;
    let mut home: HashMap<usize, usize> = HashMap::new();
    for (&e, &f) in keys.iter().zip(&fa.folds) {
        let h = *home.entry(e).or_insert(f);
        if h != f {
            return Err(AuditError::Leak { entity: e, a: h, b: f });
        }
    }
    Ok(())
}

/// Checks that every key occurs in at least two folds.
pub fn audit_min_folds(keys: &[usize], fa: &FoldAssignment) -> Result<(), AuditError> {
    audit_basic(fa, keys.len())?;
    let mut seen: HashMap<usize, Vec<usize>> = HashMap::new();
    for (&e, &f) in keys.iter().zip(&fa.folds) {
        let v = seen.entry(e).or_default();
        if !v.contains(&f) {
            v.push(f);
        }
    }
    let mut bad: Vec<_> = seen.into_iter().filter(|(_, v)| v.len() < 2).collect();
    bad.sort();
    match bad.first() {
        Some((e, v)) => Err(AuditError::Undercovered {
            entity: *e,
            folds: v.len(),
        }),
        None => Ok(()),
    }
}

/// Runs the scheme's leakage or coverage audit.
pub fn audit(ent: &Entities, fa: &FoldAssignment, clustering: Option<&Clustering>) -> Result<(), AuditError> {
    match fa.scheme {
        Scheme::Warm => {
            audit_min_folds(&ent.compound, fa)?;
            audit_min_folds(&ent.protein, fa)
        }
        Scheme::ColdDrug => audit_disjoint(&ent.compound, fa),
        Scheme::ColdTarget => audit_disjoint(&ent.protein, fa),
        Scheme::ColdCluster => match clustering {
            Some(c) => {
                let keys: Vec<usize> = ent.compound.iter().map(|&i| c.ids[i]).collect();
                audit_disjoint(&keys, fa)
            }
            None => audit_disjoint(&ent.compound, fa),
        },
        Scheme::Random => audit_basic(fa, ent.len()),
    }
}
