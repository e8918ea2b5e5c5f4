//! Interaction tables: ingestion, the `4 − log10` value transform, sparse
//! entity filtering, and assembly of multitask (compound, protein) samples.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protein::{encode_sequence, ProteinError};
use crate::smiles::parse_smiles;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("{count} malformed rows (tolerance {tolerance}); first at line {line}: {message}")]
    TooManyMalformed {
        count: usize,
        tolerance: usize,
        line: u64,
        message: String,
    },
    #[error("no sequence for protein '{0}'")]
    MissingProtein(String),
    #[error("protein '{id}': {source}")]
    Sequence { id: String, source: ProteinError },
    #[error("duplicate protein id '{0}' in sequence file")]
    DuplicateProtein(String),
    #[error("non-positive raw value {value} for ({smiles}, {protein_id}, task {task})")]
    NonPositive {
        smiles: String,
        protein_id: String,
        task: usize,
        value: f64,
    },
    #[error("task {task} out of range for {n_tasks} tasks")]
    TaskOutOfRange { task: usize, n_tasks: usize },
    #[error("no records")]
    Empty,
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A row as read, before transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub smiles: String,
    pub protein_id: String,
    pub task: usize,
    pub raw: f64,
}

/// A transformed observation. The compound is identified by its SMILES
/// string as written in the input.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub smiles: String,
    pub protein_id: String,
    pub task: usize,
    pub raw: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProteinEntry {
    pub id: String,
    pub phosphorylated: bool,
    pub sequence: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProteinTable {
    entries: BTreeMap<String, ProteinEntry>,
}

impl ProteinTable {
    pub fn new(entries: impl IntoIterator<Item = ProteinEntry>) -> Result<Self, DatasetError> {
        let mut table = ProteinTable::default();
        for e in entries {
            encode_sequence(&e.sequence).map_err(|source| DatasetError::Sequence {
                id: e.id.clone(),
                source,
            })?;
            if table.entries.contains_key(&e.id) {
                return Err(DatasetError::DuplicateProtein(e.id));
            }
            table.entries.insert(e.id.clone(), e);
        }
        Ok(table)
    }

    pub fn get(&self, id: &str) -> Option<&ProteinEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProteinEntry> {
        self.entries.values()
    }
}

/// Reads `id<TAB>phosphorylated<TAB>sequence` with a header line. The flag
/// accepts `0/1` or `false/true`.
pub fn read_sequences(reader: impl Read) -> Result<ProteinTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(reader);
    let mut entries = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| DatasetError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 {
            return Err(DatasetError::Row {
                line,
                message: format!("expected 3 tab-separated fields, got {}", row.len()),
            });
        }
        let phosphorylated = match row[1].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(DatasetError::Row {
                    line,
                    message: format!("bad phosphorylation flag '{other}'"),
                })
            }
        };
        entries.push(ProteinEntry {
            id: row[0].trim().to_string(),
            phosphorylated,
            sequence: row[2].trim().to_string(),
        });
    }
    ProteinTable::new(entries)
}

/// Reads `assay_id<TAB>task_id` lines (no header).
pub fn read_assay_map(reader: impl Read) -> Result<HashMap<String, usize>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_reader(reader);
    let mut map = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| DatasetError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let task = row
            .get(1)
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| DatasetError::Row {
                line,
                message: "expected assay_id<TAB>task_id".into(),
            })?;
        map.insert(row[0].trim().to_string(), task);
    }
    Ok(map)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Malformed rows tolerated before failing.
    pub max_malformed: usize,
    /// Maps the `task_id` column through assay ids when present.
    pub assay_map: Option<HashMap<String, usize>>,
    /// Fixed task count; inferred as `max task + 1` otherwise.
    pub n_tasks: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub rows: usize,
    /// Non-numeric or inequality-qualified values.
    pub imprecise: usize,
    pub malformed: usize,
}

fn is_imprecise(v: &str) -> Option<f64> {
    let v = v.trim();
    if v.starts_with(['>', '<', '~']) {
        return None;
    }
    v.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Parses `smiles,protein_id,task_id,value` rows, checking every SMILES
/// and every protein reference.
pub fn read_interactions(
    reader: impl Read,
    proteins: &ProteinTable,
    opts: &LoadOptions,
) -> Result<(Vec<RawRecord>, LoadStats), DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DatasetError::Row {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["smiles", "protein_id", "task_id", "value"];
    if header.iter().map(str::trim).ne(expected) {
        return Err(DatasetError::Row {
            line: 1,
            message: format!("header must be '{}'", expected.join(",")),
        });
    }

    let mut stats = LoadStats::default();
    let mut first_bad: Option<(u64, String)> = None;
    let mut smiles_ok: HashMap<String, Result<(), String>> = HashMap::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        stats.rows += 1;
        let parsed = match row {
            Err(e) => Err((e.position().map_or(0, |p| p.line()), e.to_string())),
            Ok(row) => {
                let line = row.position().map_or(0, |p| p.line());
                parse_row(&row, opts, &mut smiles_ok).map_err(|m| (line, m))
            }
        };
        match parsed {
            Ok(Some(rec)) => {
                if proteins.get(&rec.protein_id).is_none() {
                    return Err(DatasetError::MissingProtein(rec.protein_id));
                }
                out.push(rec)
            }
            Ok(None) => stats.imprecise += 1,
            Err((line, message)) => {
                stats.malformed += 1;
                log::warn!("line {line}: {message}");
                first_bad.get_or_insert((line, message));
            }
        }
    }
    if stats.malformed > opts.max_malformed {
        let (line, message) = first_bad.expect("malformed row recorded");
        return Err(DatasetError::TooManyMalformed {
            count: stats.malformed,
            tolerance: opts.max_malformed,
            line,
            message,
        });
    }
    if stats.imprecise > 0 {
        log::info!("discarded {} rows with imprecise values", stats.imprecise);
    }
    Ok((out, stats))
}

fn parse_row(
    row: &csv::StringRecord,
    opts: &LoadOptions,
    smiles_ok: &mut HashMap<String, Result<(), String>>,
) -> Result<Option<RawRecord>, String> {
    if row.len() != 4 {
        return Err(format!("expected 4 fields, got {}", row.len()));
    }
    let smiles = row[0].trim();
    let protein_id = row[1].trim();
    if protein_id.is_empty() {
        return Err("empty protein_id".into());
    }
    smiles_ok
        .entry(smiles.to_string())
        .or_insert_with(|| parse_smiles(smiles).map(|_| ()).map_err(|e| e.to_string()))
        .clone()
        .map_err(|e| format!("SMILES '{smiles}': {e}"))?;
    let task_field = row[2].trim();
    let task = match &opts.assay_map {
        Some(map) => *map
            .get(task_field)
            .ok_or_else(|| format!("unknown assay '{task_field}'"))?,
        None => task_field.parse().map_err(|_| format!("bad task_id '{task_field}'"))?,
    };
    if let Some(n) = opts.n_tasks {
        if task >= n {
            return Err(format!("task {task} out of range for {n} tasks"));
        }
    }
    let Some(raw) = is_imprecise(&row[3]) else {
        return Ok(None);
    };
    Ok(Some(RawRecord {
        smiles: smiles.to_string(),
        protein_id: protein_id.to_string(),
        task,
        raw,
    }))
}

/// `4 − log10(raw)`.
pub fn transform(raw: f64) -> f64 {
    4.0 - raw.log10()
}

pub fn inverse_transform(value: f64) -> f64 {
    10f64.powf(4.0 - value)
}

/// Applies the optional exact-match remap, then the log transform.
pub fn transform_values(
    records: Vec<RawRecord>,
    remap: Option<(f64, f64)>,
) -> Result<Vec<InteractionRecord>, DatasetError> {
    records
        .into_iter()
        .map(|r| {
            let raw = match remap {
                Some((from, to)) if r.raw == from => to,
                _ => r.raw,
            };
            if raw <= 0.0 {
                return Err(DatasetError::NonPositive {
                    smiles: r.smiles,
                    protein_id: r.protein_id,
                    task: r.task,
                    value: raw,
                });
            }
            Ok(InteractionRecord {
                value: transform(raw),
                smiles: r.smiles,
                protein_id: r.protein_id,
                task: r.task,
                raw,
            })
        })
        .collect()
}

/// Averages transformed values of repeated (compound, protein, task)
/// observations, keeping first-appearance order. Returns the number of
/// rows merged away.
pub fn merge_duplicates(records: Vec<InteractionRecord>) -> (Vec<InteractionRecord>, usize) {
    let mut index: HashMap<(String, String, usize), usize> = HashMap::new();
    let mut sums: Vec<(InteractionRecord, f64, usize)> = Vec::new();
    let total = records.len();
    for r in records {
        let key = (r.smiles.clone(), r.protein_id.clone(), r.task);
        match index.get(&key) {
            Some(&i) => {
                sums[i].1 += r.value;
                sums[i].2 += 1;
            }
            None => {
                index.insert(key, sums.len());
                let v = r.value;
                sums.push((r, v, 1));
            }
        }
    }
    let merged = total - sums.len();
    let out = sums
        .into_iter()
        .map(|(mut r, s, n)| {
            if n > 1 {
                r.value = s / n as f64;
                r.raw = inverse_transform(r.value);
            }
            r
        })
        .collect();
    (out, merged)
}

/// Repeatedly drops compounds and proteins with at most `min_obs`
/// observations until none remain.
pub fn filter_sparse(mut records: Vec<InteractionRecord>, min_obs: usize) -> Vec<InteractionRecord> {
    if min_obs == 0 {
        return records;
    }
    loop {
        let mut by_compound: HashMap<&str, usize> = HashMap::new();
        let mut by_protein: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *by_compound.entry(&r.smiles).or_default() += 1;
            *by_protein.entry(&r.protein_id).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| by_compound[r.smiles.as_str()] > min_obs && by_protein[r.protein_id.as_str()] > min_obs)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
    if records.is_empty() {
        log::warn!("sparse filtering with min_obs={min_obs} removed every record");
    }
    records
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub n_compounds: usize,
    pub n_proteins: usize,
    /// Observed (compound, protein, task) records.
    pub n_pairs: usize,
    pub n_tasks: usize,
    pub per_task: Vec<usize>,
}

pub fn summarize(records: &[InteractionRecord], n_tasks: usize) -> DatasetSummary {
    let mut compounds = std::collections::HashSet::new();
    let mut proteins = std::collections::HashSet::new();
    let mut per_task = vec![0; n_tasks];
    for r in records {
        compounds.insert(r.smiles.as_str());
        proteins.insert(r.protein_id.as_str());
        if r.task < n_tasks {
            per_task[r.task] += 1;
        }
    }
    DatasetSummary {
        n_compounds: compounds.len(),
        n_proteins: proteins.len(),
        n_pairs: per_task.iter().sum(),
        n_tasks,
        per_task,
    }
}

/// One (compound, protein) pair with all its task values; unobserved tasks
/// have mask 0 and value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub smiles: String,
    pub protein_id: String,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
}

impl PairSample {
    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask
            .iter()
            .zip(&self.values)
            .enumerate()
            .filter(|(_, (m, _))| **m > 0.0)
            .map(|(t, (_, v))| (t, *v))
    }
}

/// Groups records into pair samples in first-appearance order. Records
/// must be duplicate-free.
pub fn assemble_pairs(records: &[InteractionRecord], n_tasks: usize) -> Result<Vec<PairSample>, DatasetError> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out: Vec<PairSample> = Vec::new();
    for r in records {
        if r.task >= n_tasks {
            return Err(DatasetError::TaskOutOfRange { task: r.task, n_tasks });
        }
        let i = *index.entry((&r.smiles, &r.protein_id)).or_insert_with(|| {
            out.push(PairSample {
                smiles: r.smiles.clone(),
                protein_id: r.protein_id.clone(),
                values: vec![0.0; n_tasks],
                mask: vec![0.0; n_tasks],
            });
            out.len() - 1
        });
        out[i].values[r.task] = r.value;
        out[i].mask[r.task] = 1.0;
    }
    Ok(out)
}

/// Replicates minority pairs so they make up at least `ratio` of the
/// majority count. A pair is in the minority when any observed value is at
/// least `threshold` (the active side of the transformed scale). Copies are
/// drawn uniformly with replacement under `seed` and appended.
pub fn oversample(pairs: &[PairSample], threshold: f64, ratio: f64, seed: u64) -> Vec<PairSample> {
    let (minority, majority): (Vec<&PairSample>, Vec<&PairSample>) =
        pairs.iter().partition(|p| p.observed().any(|(_, v)| v >= threshold));
    let mut out = pairs.to_vec();
    if minority.is_empty() {
        return out;
    }
    let target = (ratio * majority.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in minority.len()..target {
        out.push((*minority.choose(&mut rng).expect("non-empty")).clone());
    }
    out
}

/// A loaded, transformed, filtered and deduplicated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    pub proteins: ProteinTable,
    pub n_tasks: usize,
    pub stats: LoadStats,
    pub merged_duplicates: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub load: LoadOptions,
    pub inactive_remap: Option<(f64, f64)>,
    pub min_obs: usize,
}

impl Dataset {
    pub fn from_readers(
        interactions: impl Read,
        sequences: impl Read,
        opts: &IngestOptions,
    ) -> Result<Self, DatasetError> {
        let proteins = read_sequences(sequences)?;
        let (raw, stats) = read_interactions(interactions, &proteins, &opts.load)?;
        let n_tasks = opts
            .load
            .n_tasks
            .unwrap_or_else(|| raw.iter().map(|r| r.task + 1).max().unwrap_or(1));
        let records = transform_values(raw, opts.inactive_remap)?;
        let (records, merged_duplicates) = merge_duplicates(records);
        let records = filter_sparse(records, opts.min_obs);
        if records.is_empty() {
            return Err(DatasetError::Empty);
        }
        Ok(Dataset {
            records,
            proteins,
            n_tasks,
            stats,
            merged_duplicates,
        })
    }

    pub fn load(
        interactions: &Path,
        sequences: &Path,
        assay_map: Option<&Path>,
        mut opts: IngestOptions,
    ) -> Result<Self, DatasetError> {
        let open = |p: &Path| std::fs::File::open(p).map_err(|e| DatasetError::io(p, e));
        if let Some(p) = assay_map {
            opts.load.assay_map = Some(read_assay_map(open(p)?)?);
        }
        Dataset::from_readers(open(interactions)?, open(sequences)?, &opts)
    }

    pub fn summary(&self) -> DatasetSummary {
        summarize(&self.records, self.n_tasks)
    }

    pub fn pairs(&self) -> Vec<PairSample> {
        assemble_pairs(&self.records, self.n_tasks).expect("tasks validated at load")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEQS: &str = "id\tphosphorylated\tsequence\nP1\t0\tMKVLAAGG\nP2\t1\tWYWYACDE\n";

    fn rec(c: &str, p: &str) -> InteractionRecord {
        InteractionRecord {
            smiles: c.into(),
            protein_id: p.into(),
            task: 0,
            raw: 1.0,
            value: 4.0,
        }
    }

    #[test]
    fn three_row_fixture() {
        let csv = "smiles,protein_id,task_id,value\nCCO,P1,0,10\nCCO,P2,0,100\nc1ccccc1,P1,0,1\n";
        let d = Dataset::from_readers(csv.as_bytes(), SEQS.as_bytes(), &IngestOptions::default()).unwrap();
        let s = d.summary();
        assert_eq!((s.n_compounds, s.n_proteins, s.n_pairs), (2, 2, 3));
        assert_eq!(d.records[2].value, 4.0);
    }

    #[test]
    fn imprecise_values_discarded() {
        let csv = "smiles,protein_id,task_id,value\nCCO,P1,0,>10000\nCCO,P2,0,5\nCCN,P2,0,abc\n";
        let t = read_sequences(SEQS.as_bytes()).unwrap();
        let (rows, stats) = read_interactions(csv.as_bytes(), &t, &LoadOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(stats.imprecise, 2);
        assert_eq!(stats.malformed, 0);
    }

    #[test]
    fn malformed_rows_report_line() {
        let csv = "smiles,protein_id,task_id,value\nCCO,P1,0,10\nC1CC,P1,0,10\n";
        let t = read_sequences(SEQS.as_bytes()).unwrap();
        let err = read_interactions(csv.as_bytes(), &t, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DatasetError::TooManyMalformed { line: 3, .. }), "{err}");
        let opts = LoadOptions {
            max_malformed: 1,
            ..LoadOptions::default()
        };
        let (rows, stats) = read_interactions(csv.as_bytes(), &t, &opts).unwrap();
        assert_eq!((rows.len(), stats.malformed), (1, 1));
    }

    #[test]
    fn missing_protein_named() {
        let csv = "smiles,protein_id,task_id,value\nCCO,P7,0,10\n";
        let t = read_sequences(SEQS.as_bytes()).unwrap();
        let err = read_interactions(csv.as_bytes(), &t, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("P7"));
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform(1.0), 4.0);
        assert_eq!(transform(10000.0), 0.0);
        let r = transform_values(
            vec![RawRecord {
                smiles: "C".into(),
                protein_id: "P".into(),
                task: 0,
                raw: 1_000_000.0,
            }],
            Some((1_000_000.0, 1_000.0)),
        )
        .unwrap();
        assert_eq!(r[0].value, 1.0);
        let bad = RawRecord {
            smiles: "C".into(),
            protein_id: "P".into(),
            task: 0,
            raw: 0.0,
        };
        assert!(transform_values(vec![bad], None).is_err());
    }

    #[test]
    fn assay_map_routes_tasks() {
        let map = read_assay_map("ATG_A\t1\nNVS_B\t0\n".as_bytes()).unwrap();
        let csv = "smiles,protein_id,task_id,value\nCCO,P1,ATG_A,10\nCCO,P1,NVS_B,100\n";
        let t = read_sequences(SEQS.as_bytes()).unwrap();
        let opts = LoadOptions {
            assay_map: Some(map),
            ..LoadOptions::default()
        };
        let (rows, _) = read_interactions(csv.as_bytes(), &t, &opts).unwrap();
        assert_eq!(rows.iter().map(|r| r.task).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn duplicates_averaged() {
        let mut a = rec("C", "P");
        a.value = 1.0;
        let mut b = rec("C", "P");
        b.value = 2.0;
        let (out, merged) = merge_duplicates(vec![a, b, rec("N", "P")]);
        assert_eq!(merged, 1);
        assert_eq!(out[0].value, 1.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn star_graph_empties() {
        let recs: Vec<_> = (0..5).map(|i| rec(&format!("C{i}"), "P")).collect();
        assert_eq!(filter_sparse(recs.clone(), 0), recs);
        assert!(filter_sparse(recs, 1).is_empty());
    }

    #[test]
    fn filter_keeps_dense_core() {
        let mut recs = Vec::new();
        for p in 0..7 {
            recs.push(rec("HUB", &format!("P{p}")));
            recs.push(rec(&format!("X{p}"), &format!("P{p}")));
        }
        for p in 0..7 {
            for c in 0..6 {
                recs.push(rec(&format!("D{c}"), &format!("P{p}")));
            }
        }
        let once = filter_sparse(recs, 6);
        assert!(once.iter().all(|r| r.smiles != "X0"));
        assert_eq!(filter_sparse(once.clone(), 6), once);
    }

    #[test]
    fn multitask_pairs_masked() {
        let mut a = rec("C", "P");
        a.task = 2;
        a.value = 0.5;
        let pairs = assemble_pairs(&[rec("C", "P"), a, rec("N", "P")], 3).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].mask, vec![1.0, 0.0, 1.0]);
        assert_eq!(pairs[0].values, vec![4.0, 0.0, 0.5]);
        assert!(assemble_pairs(&[rec("C", "P")], 0).is_err());
    }

    #[test]
    fn oversample_reaches_ratio() {
        let mut pairs = assemble_pairs(&(0..10).map(|i| rec(&format!("C{i}"), "P")).collect::<Vec<_>>(), 1).unwrap();
        for p in pairs.iter_mut().skip(2) {
            p.values[0] = 0.0;
        }
        let out = oversample(&pairs, 3.0, 0.5, 1);
        let minority = out.iter().filter(|p| p.values[0] >= 3.0).count();
        assert_eq!(minority, 4);
        assert_eq!(out.len(), 12);
        assert_eq!(out, oversample(&pairs, 3.0, 0.5, 1));
    }
}
