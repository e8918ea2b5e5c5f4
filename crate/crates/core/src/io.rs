//! Artifact files. Every writer is the exact inverse of its reader, so a
//! read followed by a write reproduces the input byte for byte.
//!
//! Text formats are CSV with `\n` line endings and floats in shortest
//! round-trip notation. Comment lines (`# `) before the header carry
//! metadata or a config snapshot. Binary formats are little-endian:
//!
//! ```text
//! PSC:   "PADMEPSC" u32 layout  u32 n  { str id, u32 len, f64 * len }
//! graph: "PADMEGRF" u32 version u32 n  { str smiles, u32 width, u32 atoms,
//!        f32 * atoms*width, atoms * { u32 deg, u32 * deg },
//!        u32 n_slices, n_slices * { u32 len, u32 * len } }
//! str = u32 byte length + UTF-8
//! ```

use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::compound::{AtomFeatureMatrix, Fingerprint};
use crate::graphconv::GraphFeatures;
use crate::metrics::{Aggregate, EvalReport, TaskMetrics};
use crate::protein::{ProteinDescriptor, PSC_LAYOUT_VERSION, PSC_LEN};
use crate::splits::{FoldAssignment, Scheme};

pub const PSC_MAGIC: &[u8; 8] = b"PADMEPSC";
pub const GRAPH_MAGIC: &[u8; 8] = b"PADMEGRF";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

pub const FINGERPRINT_HEADER: [&str; 4] = ["smiles", "radius", "n_bits", "hex"];
pub const FOLD_HEADER: [&str; 4] = ["index", "smiles", "protein_id", "fold"];
pub const PREDICTION_HEADER: [&str; 5] = ["smiles", "protein_id", "task", "prediction", "in_ad"];
pub const REPORT_HEADER: [&str; 6] = ["task", "n_records", "rmse", "r2", "ci", "flags"];
pub const CV_HEADER: [&str; 11] = [
    "rep",
    "fold",
    "n_train",
    "n_val",
    "best_epoch",
    "rmse",
    "r2",
    "ci",
    "composite",
    "audit",
    "note",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad header: expected {expected}, found {found}")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Field { line: u64, message: String },
    #[error("not a {0} file")]
    BadMagic(&'static str),
    #[error("{kind} format version {found} is not supported (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("truncated or corrupt file: {0}")]
    Corrupt(String),
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Splits leading `# ` comment lines from the CSV body.
fn split_comments(text: &str) -> (Vec<String>, &str) {
    let mut comments = Vec::new();
    let mut rest = text;
    while let Some(line) = rest.strip_prefix("# ") {
        let end = line.find('\n').map_or(line.len(), |i| i + 1);
        comments.push(line[..end].trim_end_matches('\n').to_string());
        rest = &line[end..];
    }
    (comments, rest)
}

fn write_comments<W: Write>(w: &mut W, text: &str) -> std::io::Result<()> {
    for line in text.lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

fn join_comments(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// Records of `body` after checking the header.
fn records(body: &str, header: &[&str], line_offset: u64) -> Result<Vec<(u64, csv::StringRecord)>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let found = rdr.headers()?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(IoError::Header {
            expected: header.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) + line_offset;
        out.push((line, rec));
    }
    Ok(out)
}

fn field<T: FromStr>(line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, IoError> {
    let s = rec.get(i).unwrap_or("");
    s.parse().map_err(|_| IoError::Field {
        line,
        message: format!("invalid {name} '{s}'"),
    })
}

fn opt_field(line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<Option<f64>, IoError> {
    match rec.get(i).unwrap_or("") {
        "" => Ok(None),
        _ => field(line, rec, i, name).map(Some),
    }
}

// ---- fingerprints ----

pub fn write_fingerprints<W: Write>(w: W, rows: &[(String, Fingerprint)]) -> Result<(), IoError> {
    let mut wr = csv_writer(w);
    wr.write_record(FINGERPRINT_HEADER)?;
    for (smiles, fp) in rows {
        wr.write_record([
            smiles.clone(),
            fp.radius().to_string(),
            fp.n_bits().to_string(),
            fp.to_hex(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_fingerprints<R: Read>(mut r: R) -> Result<Vec<(String, Fingerprint)>, IoError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    records(&text, &FINGERPRINT_HEADER, 0)?
        .into_iter()
        .map(|(line, rec)| {
            let radius: usize = field(line, &rec, 1, "radius")?;
            let n_bits: usize = field(line, &rec, 2, "n_bits")?;
            let fp = Fingerprint::from_hex(&rec[3], radius).map_err(|e| IoError::Field {
                line,
                message: e.to_string(),
            })?;
            if fp.n_bits() != n_bits {
                return Err(IoError::Field {
                    line,
                    message: format!("hex has {} bits, n_bits says {n_bits}", fp.n_bits()),
                });
            }
            Ok((rec[0].to_string(), fp))
        })
        .collect()
}

// ---- binary helpers ----

struct Bin(Vec<u8>);

impl Bin {
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn f32s(&mut self, v: &[f64]) {
        for &x in v {
            self.0.extend((x as f32).to_le_bytes());
        }
    }
    fn u32s(&mut self, v: &[usize]) {
        self.u32(v.len());
        for &x in v {
            self.u32(x);
        }
    }
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.0.len() < n {
            return Err(IoError::Corrupt(format!(
                "needed {n} more bytes, {} left",
                self.0.len()
            )));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<usize, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn str(&mut self) -> Result<String, IoError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| IoError::Corrupt("invalid UTF-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| IoError::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| IoError::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn u32s(&mut self) -> Result<Vec<usize>, IoError> {
        let n = self.u32()?;
        // each entry needs 4 bytes; guards against absurd lengths
        if n > self.0.len() / 4 {
            return Err(IoError::Corrupt(format!("list of {n} exceeds remaining bytes")));
        }
        (0..n).map(|_| self.u32()).collect()
    }
    fn header(&mut self, magic: &[u8; 8], kind: &'static str, expected: u32) -> Result<(), IoError> {
        if self.0.len() < 8 || &self.0[..8] != magic {
            return Err(IoError::BadMagic(kind));
        }
        self.take(8)?;
        let found = self.u32()? as u32;
        if found != expected {
            return Err(IoError::Version { kind, found, expected });
        }
        Ok(())
    }
    fn finish(&self) -> Result<(), IoError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(IoError::Corrupt(format!("{} trailing bytes", self.0.len())))
        }
    }
}

// ---- protein descriptors ----

pub fn psc_to_bytes(rows: &[(String, ProteinDescriptor)]) -> Vec<u8> {
    let mut b = Bin(PSC_MAGIC.to_vec());
    b.u32(PSC_LAYOUT_VERSION as usize);
    b.u32(rows.len());
    for (id, d) in rows {
        b.str(id);
        b.u32(d.values().len());
        b.f64s(d.values());
    }
    b.0
}

pub fn psc_from_bytes(bytes: &[u8]) -> Result<Vec<(String, ProteinDescriptor)>, IoError> {
    let mut c = Cursor(bytes);
    c.header(PSC_MAGIC, "protein descriptor", PSC_LAYOUT_VERSION)?;
    let n = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let id = c.str()?;
        let len = c.u32()?;
        if len != PSC_LEN {
            return Err(IoError::Corrupt(format!(
                "descriptor for {id} has length {len}, expected {PSC_LEN}"
            )));
        }
        let d = ProteinDescriptor::from_values(c.f64s(len)?).expect("length checked");
        out.push((id, d));
    }
    c.finish()?;
    Ok(out)
}

// ---- graph features ----

pub fn graphs_to_bytes(rows: &[(String, GraphFeatures)]) -> Vec<u8> {
    let mut b = Bin(GRAPH_MAGIC.to_vec());
    b.u32(GRAPH_FORMAT_VERSION as usize);
    b.u32(rows.len());
    for (smiles, g) in rows {
        b.str(smiles);
        b.u32(g.atoms.width);
        b.u32(g.atoms.n_atoms());
        b.f32s(&g.atoms.rows);
        for nb in &g.adjacency {
            b.u32s(nb);
        }
        b.u32(g.atoms.degree_slices.len());
        for s in &g.atoms.degree_slices {
            b.u32s(s);
        }
    }
    b.0
}

pub fn graphs_from_bytes(bytes: &[u8]) -> Result<Vec<(String, GraphFeatures)>, IoError> {
    let mut c = Cursor(bytes);
    c.header(GRAPH_MAGIC, "graph feature", GRAPH_FORMAT_VERSION)?;
    let n = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let smiles = c.str()?;
        let width = c.u32()?;
        let n_atoms = c.u32()?;
        let rows = c.f32s(
            n_atoms
                .checked_mul(width)
                .ok_or_else(|| IoError::Corrupt("size overflow".into()))?,
        )?;
        let adjacency = (0..n_atoms).map(|_| c.u32s()).collect::<Result<Vec<_>, _>>()?;
        if adjacency.iter().flatten().any(|&j| j >= n_atoms) {
            return Err(IoError::Corrupt(format!("{smiles}: neighbor index out of range")));
        }
        let n_slices = c.u32()?;
        let degree_slices = (0..n_slices).map(|_| c.u32s()).collect::<Result<Vec<_>, _>>()?;
        out.push((
            smiles,
            GraphFeatures {
                atoms: AtomFeatureMatrix {
                    rows,
                    width,
                    degree_slices,
                },
                adjacency,
            },
        ));
    }
    c.finish()?;
    Ok(out)
}

// ---- folds ----

/// A fold assignment with the pair each index refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFile {
    pub assignment: FoldAssignment,
    pub pairs: Vec<(String, String)>,
}

pub fn write_folds<W: Write>(mut w: W, f: &FoldFile) -> Result<(), IoError> {
    let a = &f.assignment;
    writeln!(w, "# scheme={} k={} seed={}", a.scheme, a.k, a.seed)?;
    let mut wr = csv_writer(w);
    wr.write_record(FOLD_HEADER)?;
    for (i, ((s, p), fold)) in f.pairs.iter().zip(&a.folds).enumerate() {
        wr.write_record([i.to_string(), s.clone(), p.clone(), fold.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_folds<R: Read>(mut r: R) -> Result<FoldFile, IoError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (comments, body) = split_comments(&text);
    let meta = comments
        .first()
        .ok_or_else(|| IoError::Corrupt("missing '# scheme=.. k=.. seed=..' line".into()))?;
    let mut scheme = None;
    let mut k = None;
    let mut seed = None;
    for kv in meta.split_whitespace() {
        let bad = || IoError::Field {
            line: 1,
            message: format!("invalid metadata '{kv}'"),
        };
        match kv.split_once('=').ok_or_else(bad)? {
            ("scheme", v) => scheme = Some(Scheme::from_str(v).map_err(|_| bad())?),
            ("k", v) => k = Some(v.parse::<usize>().map_err(|_| bad())?),
            ("seed", v) => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let (Some(scheme), Some(k), Some(seed)) = (scheme, k, seed) else {
        return Err(IoError::Corrupt("metadata needs scheme, k and seed".into()));
    };
    let mut pairs = Vec::new();
    let mut folds = Vec::new();
    for (line, rec) in records(body, &FOLD_HEADER, comments.len() as u64)? {
        let index: usize = field(line, &rec, 0, "index")?;
        if index != pairs.len() {
            return Err(IoError::Field {
                line,
                message: format!("index {index} out of sequence"),
            });
        }
        let fold: usize = field(line, &rec, 3, "fold")?;
        if fold >= k {
            return Err(IoError::Field {
                line,
                message: format!("fold {fold} not below k={k}"),
            });
        }
        pairs.push((rec[1].to_string(), rec[2].to_string()));
        folds.push(fold);
    }
    Ok(FoldFile {
        assignment: FoldAssignment { k, folds, scheme, seed },
        pairs,
    })
}

// ---- predictions ----

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub smiles: String,
    pub protein_id: String,
    pub task: usize,
    pub prediction: f64,
    pub in_ad: Option<bool>,
}

/// The `in_ad` column is written only when every row has it.
pub fn write_predictions<W: Write>(w: W, rows: &[PredictionRow]) -> Result<(), IoError> {
    let with_ad = !rows.is_empty() && rows.iter().all(|r| r.in_ad.is_some());
    let n = if with_ad { 5 } else { 4 };
    let mut wr = csv_writer(w);
    wr.write_record(&PREDICTION_HEADER[..n])?;
    for r in rows {
        let mut rec = vec![
            r.smiles.clone(),
            r.protein_id.clone(),
            r.task.to_string(),
            fmt_f64(r.prediction),
        ];
        if with_ad {
            rec.push(r.in_ad.expect("checked").to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(mut r: R) -> Result<Vec<PredictionRow>, IoError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let header = if text.lines().next().is_some_and(|l| l.ends_with(",in_ad")) {
        &PREDICTION_HEADER[..]
    } else {
        &PREDICTION_HEADER[..4]
    };
    records(&text, header, 0)?
        .into_iter()
        .map(|(line, rec)| {
            Ok(PredictionRow {
                smiles: rec[0].to_string(),
                protein_id: rec[1].to_string(),
                task: field(line, &rec, 2, "task")?,
                prediction: field(line, &rec, 3, "prediction")?,
                in_ad: if header.len() == 5 {
                    Some(field(line, &rec, 4, "in_ad")?)
                } else {
                    None
                },
            })
        })
        .collect()
}

// ---- evaluation report ----

/// Per-task rows, then one `weighted` row. `snapshot` (usually the run
/// config) is stored as leading comment lines.
pub fn write_report<W: Write>(mut w: W, report: &EvalReport, snapshot: &str) -> Result<(), IoError> {
    write_comments(&mut w, snapshot)?;
    let mut wr = csv_writer(w);
    wr.write_record(REPORT_HEADER)?;
    for t in &report.tasks {
        let mut flags = Vec::new();
        if t.n_records == 0 {
            flags.push("no_records");
        } else {
            if t.r2.is_none() {
                flags.push("r2_undefined");
            }
            if t.ci.is_none() {
                flags.push("ci_undefined");
            }
        }
        wr.write_record([
            t.task.to_string(),
            t.n_records.to_string(),
            fmt_opt(t.rmse),
            fmt_opt(t.r2),
            fmt_opt(t.ci),
            flags.join(";"),
        ])?;
    }
    let mut flags = Vec::new();
    for (name, a) in [("rmse", &report.rmse), ("r2", &report.r2), ("ci", &report.ci)] {
        if a.excluded {
            flags.push(format!("{name}_excluded"));
        }
    }
    wr.write_record([
        "weighted".to_string(),
        report.n_records().to_string(),
        fmt_opt(report.rmse.value),
        fmt_opt(report.r2.value),
        fmt_opt(report.ci.value),
        flags.join(";"),
    ])?;
    wr.flush()?;
    Ok(())
}

/// Returns the report and the snapshot text.
pub fn read_report<R: Read>(mut r: R) -> Result<(EvalReport, String), IoError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (comments, body) = split_comments(&text);
    let mut tasks = Vec::new();
    let mut aggregate = None;
    for (line, rec) in records(body, &REPORT_HEADER, comments.len() as u64)? {
        if aggregate.is_some() {
            return Err(IoError::Field {
                line,
                message: "rows after the weighted row".into(),
            });
        }
        let rmse = opt_field(line, &rec, 2, "rmse")?;
        let r2 = opt_field(line, &rec, 3, "r2")?;
        let ci = opt_field(line, &rec, 4, "ci")?;
        if &rec[0] == "weighted" {
            let flags: Vec<&str> = rec[5].split(';').collect();
            let agg = |value, name: &str| Aggregate {
                value,
                excluded: flags.contains(&format!("{name}_excluded").as_str()),
            };
            aggregate = Some((agg(rmse, "rmse"), agg(r2, "r2"), agg(ci, "ci")));
        } else {
            tasks.push(TaskMetrics {
                task: field(line, &rec, 0, "task")?,
                n_records: field(line, &rec, 1, "n_records")?,
                rmse,
                r2,
                ci,
            });
        }
    }
    let (rmse, r2, ci) = aggregate.ok_or_else(|| IoError::Corrupt("missing weighted row".into()))?;
    Ok((EvalReport { tasks, rmse, r2, ci }, join_comments(&comments)))
}

// ---- cross-validation report ----

#[derive(Debug, Clone, PartialEq)]
pub struct CvFoldRow {
    pub rep: usize,
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
    pub ci: Option<f64>,
    pub composite: Option<f64>,
    /// `pass`, or the audit failure message.
    pub audit: String,
}

/// Mean or standard deviation over fold rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummaryRow {
    pub stat: String,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
    pub ci: Option<f64>,
    pub composite: Option<f64>,
    pub audit: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub snapshot: String,
    pub folds: Vec<CvFoldRow>,
    pub summary: Vec<CvSummaryRow>,
}

impl CvReport {
    /// Builds `mean` and `std` rows (sample standard deviation) from the
    /// folds where each metric is defined.
    pub fn new(snapshot: String, folds: Vec<CvFoldRow>) -> Self {
        let col = |get: fn(&CvFoldRow) -> Option<f64>| -> (Option<(f64, f64)>, usize) {
            let v: Vec<f64> = folds.iter().filter_map(get).collect();
            (crate::metrics::mean_std(&v), folds.len() - v.len())
        };
        let cols = [col(|f| f.rmse), col(|f| f.r2), col(|f| f.ci), col(|f| f.composite)];
        let audit = if folds.iter().all(|f| f.audit == "pass") {
            "pass"
        } else {
            "fail"
        };
        let note = {
            let names = ["rmse", "r2", "ci", "composite"];
            names
                .iter()
                .zip(&cols)
                .filter(|(_, (_, missing))| *missing > 0)
                .map(|(n, (_, missing))| format!("{n}_undefined_in_{missing}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        let summary = ["mean", "std"]
            .iter()
            .enumerate()
            .map(|(which, stat)| {
                let pick = |i: usize| cols[i].0.map(|(m, s)| if which == 0 { m } else { s });
                CvSummaryRow {
                    stat: stat.to_string(),
                    rmse: pick(0),
                    r2: pick(1),
                    ci: pick(2),
                    composite: pick(3),
                    audit: audit.to_string(),
                    note: note.clone(),
                }
            })
            .collect();
        CvReport {
            snapshot,
            folds,
            summary,
        }
    }

    pub fn audits_pass(&self) -> bool {
        self.folds.iter().all(|f| f.audit == "pass")
    }

    pub fn mean(&self) -> Option<&CvSummaryRow> {
        self.summary.iter().find(|s| s.stat == "mean")
    }
}

pub fn write_cv_report<W: Write>(mut w: W, report: &CvReport) -> Result<(), IoError> {
    write_comments(&mut w, &report.snapshot)?;
    let mut wr = csv_writer(w);
    wr.write_record(CV_HEADER)?;
    for f in &report.folds {
        wr.write_record([
            f.rep.to_string(),
            f.fold.to_string(),
            f.n_train.to_string(),
            f.n_val.to_string(),
            f.best_epoch.to_string(),
            fmt_opt(f.rmse),
            fmt_opt(f.r2),
            fmt_opt(f.ci),
            fmt_opt(f.composite),
            f.audit.clone(),
            String::new(),
        ])?;
    }
    for s in &report.summary {
        wr.write_record([
            "all".to_string(),
            s.stat.clone(),
            String::new(),
            String::new(),
            String::new(),
            fmt_opt(s.rmse),
            fmt_opt(s.r2),
            fmt_opt(s.ci),
            fmt_opt(s.composite),
            s.audit.clone(),
            s.note.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_cv_report<R: Read>(mut r: R) -> Result<CvReport, IoError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (comments, body) = split_comments(&text);
    let mut folds = Vec::new();
    let mut summary = Vec::new();
    for (line, rec) in records(body, &CV_HEADER, comments.len() as u64)? {
        let metrics = (
            opt_field(line, &rec, 5, "rmse")?,
            opt_field(line, &rec, 6, "r2")?,
            opt_field(line, &rec, 7, "ci")?,
            opt_field(line, &rec, 8, "composite")?,
        );
        if &rec[0] == "all" {
            summary.push(CvSummaryRow {
                stat: rec[1].to_string(),
                rmse: metrics.0,
                r2: metrics.1,
                ci: metrics.2,
                composite: metrics.3,
                audit: rec[9].to_string(),
                note: rec[10].to_string(),
            });
        } else {
            if !summary.is_empty() {
                return Err(IoError::Field {
                    line,
                    message: "fold row after summary rows".into(),
                });
            }
            folds.push(CvFoldRow {
                rep: field(line, &rec, 0, "rep")?,
                fold: field(line, &rec, 1, "fold")?,
                n_train: field(line, &rec, 2, "n_train")?,
                n_val: field(line, &rec, 3, "n_val")?,
                best_epoch: field(line, &rec, 4, "best_epoch")?,
                rmse: metrics.0,
                r2: metrics.1,
                ci: metrics.2,
                composite: metrics.3,
                audit: rec[9].to_string(),
            });
        }
    }
    Ok(CvReport {
        snapshot: join_comments(&comments),
        folds,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compound::{atom_features, ecfp, AtomFeatureConfig};
    use crate::protein::psc;
    use crate::smiles::parse_smiles;

    fn rewrite<T>(bytes: &[u8], read: impl Fn(&[u8]) -> T, write: impl Fn(&T) -> Vec<u8>) {
        let once = read(bytes);
        assert_eq!(write(&once), bytes, "not byte-identical");
    }

    fn csv_bytes(f: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
        let mut v = Vec::new();
        f(&mut v);
        v
    }

    #[test]
    fn fingerprints_round_trip() {
        let rows: Vec<_> = ["CCO", "c1ccccc1O", "CC(=O)N"]
            .iter()
            .map(|s| (s.to_string(), ecfp(&parse_smiles(s).unwrap(), 2, 1024).unwrap()))
            .collect();
        let bytes = csv_bytes(|v| write_fingerprints(v, &rows).unwrap());
        assert_eq!(read_fingerprints(&bytes[..]).unwrap(), rows);
        rewrite(
            &bytes,
            |b| read_fingerprints(b).unwrap(),
            |r| csv_bytes(|v| write_fingerprints(v, r).unwrap()),
        );
    }

    #[test]
    fn psc_round_trip_and_rejection() {
        let rows = vec![
            ("P1".to_string(), psc("MKTAYIAKQR", false).unwrap()),
            ("P2".to_string(), psc("ACDW", true).unwrap()),
        ];
        let bytes = psc_to_bytes(&rows);
        assert_eq!(psc_from_bytes(&bytes).unwrap(), rows);
        assert!(matches!(
            psc_from_bytes(b"PADMEGRF\x01\0\0\0"),
            Err(IoError::BadMagic(_))
        ));
        assert!(psc_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 9;
        assert!(matches!(psc_from_bytes(&v2), Err(IoError::Version { .. })));
    }

    #[test]
    fn graphs_round_trip() {
        let cfg = AtomFeatureConfig::default();
        let rows: Vec<_> = ["CCO", "c1ccncc1", "C"]
            .iter()
            .map(|s| {
                let g = parse_smiles(s).unwrap();
                let atoms = atom_features(&g, &cfg).unwrap();
                (
                    s.to_string(),
                    GraphFeatures {
                        atoms,
                        adjacency: g.neighbor_lists(),
                    },
                )
            })
            .collect();
        let bytes = graphs_to_bytes(&rows);
        assert_eq!(graphs_from_bytes(&bytes).unwrap(), rows);
        assert!(graphs_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn folds_round_trip() {
        let f = FoldFile {
            assignment: FoldAssignment {
                k: 3,
                folds: vec![0, 2, 1, 0],
                scheme: Scheme::ColdTarget,
                seed: 17,
            },
            pairs: vec![
                ("CCO".into(), "P1".into()),
                ("C(C)O".into(), "P1".into()),
                ("CCO".into(), "P2".into()),
                ("N".into(), "P3".into()),
            ],
        };
        let bytes = csv_bytes(|v| write_folds(v, &f).unwrap());
        assert!(bytes.starts_with(b"# scheme=cold-target k=3 seed=17\nindex,smiles,protein_id,fold\n"));
        assert_eq!(read_folds(&bytes[..]).unwrap(), f);
        let bad = String::from_utf8(bytes).unwrap().replace(",2\n", ",7\n");
        assert!(read_folds(bad.as_bytes()).is_err());
    }

    #[test]
    fn predictions_round_trip() {
        let mut rows = vec![
            PredictionRow {
                smiles: "CCO".into(),
                protein_id: "P1".into(),
                task: 0,
                prediction: 6.123456789012345,
                in_ad: None,
            },
            PredictionRow {
                smiles: "N".into(),
                protein_id: "P2".into(),
                task: 1,
                prediction: -0.1,
                in_ad: None,
            },
        ];
        for with_ad in [false, true] {
            if with_ad {
                rows[0].in_ad = Some(true);
                rows[1].in_ad = Some(false);
            }
            let bytes = csv_bytes(|v| write_predictions(v, &rows).unwrap());
            assert_eq!(read_predictions(&bytes[..]).unwrap(), rows);
        }
    }

    #[test]
    fn report_round_trip_with_snapshot() {
        let report = EvalReport::evaluate(
            &[vec![1.0, 2.0, 3.0], vec![5.0, 5.0], vec![]],
            &[vec![1.1, 2.2, 2.9], vec![4.0, 6.0], vec![]],
        )
        .unwrap();
        let snapshot = "[train]\nbatch_size = 8\n";
        let bytes = csv_bytes(|v| write_report(v, &report, snapshot).unwrap());
        let (back, snap) = read_report(&bytes[..]).unwrap();
        assert_eq!(back, report);
        assert_eq!(snap, snapshot);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("weighted,")).count(), 1);
        rewrite(
            &bytes,
            |b| read_report(b).unwrap(),
            |(r, s)| csv_bytes(|v| write_report(v, r, s).unwrap()),
        );
    }

    #[test]
    fn cv_report_round_trip() {
        let row = |fold, rmse: f64, audit: &str| CvFoldRow {
            rep: 0,
            fold,
            n_train: 80,
            n_val: 20,
            best_epoch: 4,
            rmse: Some(rmse),
            r2: Some(0.5),
            ci: if fold == 1 { None } else { Some(0.7) },
            composite: Some(rmse - 0.7),
            audit: audit.into(),
        };
        let r = CvReport::new(
            "[split]\nk = 2\n".into(),
            vec![row(0, 1.0, "pass"), row(1, 2.0, "pass")],
        );
        assert_eq!(r.mean().unwrap().rmse, Some(1.5));
        let std = &r.summary[1];
        assert!((std.rmse.unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(std.note, "ci_undefined_in_1");
        let bytes = csv_bytes(|v| write_cv_report(v, &r).unwrap());
        assert_eq!(read_cv_report(&bytes[..]).unwrap(), r);
        let failing = CvReport::new(String::new(), vec![row(0, 1.0, "compound CCO in folds 0 and 1")]);
        assert!(!failing.audits_pass());
        let bytes = csv_bytes(|v| write_cv_report(v, &failing).unwrap());
        assert_eq!(read_cv_report(&bytes[..]).unwrap(), failing);
    }
}
