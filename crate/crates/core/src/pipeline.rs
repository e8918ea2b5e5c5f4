//! Stages wired together: load, featurize, split, cross-validate, tune,
//! predict, and the end-to-end smoke run.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::ad::{fit_per_task, AdRange};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::compound::{ecfp, CompoundError, Fingerprint};
use crate::config::{ConfigError, RunConfig, Strategy};
use crate::dataset::{oversample, Dataset, DatasetError, IngestOptions, LoadOptions, PairSample};
use crate::hyperopt::{gp_ei_search, random_search, SearchError, SearchResult, SearchSpace};
use crate::io::{self, CvFoldRow, CvReport, FoldFile, IoError, PredictionRow};
use crate::metrics::EvalReport;
use crate::model::{CompoundFeatures, ModelConfig, PadmeModel};
use crate::protein::psc;
use crate::smiles::parse_smiles;
use crate::splits::{
    audit, cluster_compounds, cold_cluster_split, cold_entity_split, hyperopt_holdout, random_split, warm_split, Axis,
    Clustering, Entities, FoldAssignment, Scheme, SplitError,
};
use crate::synthetic::SyntheticData;
use crate::trainer::{self, Featurized, TrainConfig, TrainError};

/// Fingerprint used for compound clustering regardless of model features.
pub const CLUSTER_RADIUS: usize = 2;
pub const CLUSTER_BITS: usize = 2048;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Compound(#[from] CompoundError),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| PipelineError::File {
            path: path.display().to_string(),
            source,
        })
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| PipelineError::File {
            path: path.display().to_string(),
            source,
        })
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| PipelineError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| PipelineError::File {
        path: path.display().to_string(),
        source,
    })
}

fn ingest_options(cfg: &RunConfig) -> IngestOptions {
    let d = &cfg.data;
    IngestOptions {
        load: LoadOptions {
            max_malformed: d.max_malformed,
            assay_map: None,
            n_tasks: (d.n_tasks > 0).then_some(d.n_tasks),
        },
        inactive_remap: d.inactive_remap.map(|[a, b]| (a, b)),
        min_obs: d.min_obs,
    }
}

pub fn load_dataset(cfg: &RunConfig, data_dir: &Path) -> Result<Dataset> {
    load_interactions(cfg, data_dir, &data_dir.join(&cfg.data.interactions))
}

/// Like [`load_dataset`] but with the interactions read from `interactions`.
pub fn load_interactions(cfg: &RunConfig, data_dir: &Path, interactions: &Path) -> Result<Dataset> {
    let d = &cfg.data;
    let ds = Dataset::load(
        interactions,
        &data_dir.join(&d.sequences),
        cfg.resolve(data_dir, &d.assay_map).as_deref(),
        ingest_options(cfg),
    )?;
    let s = &ds.stats;
    log::info!(
        "loaded {} records ({} rows, {} imprecise, {} malformed, {} duplicates merged)",
        ds.records.len(),
        s.rows,
        s.imprecise,
        s.malformed,
        ds.merged_duplicates
    );
    Ok(ds)
}

/// Model config with the task count taken from the data.
pub fn model_config_for(cfg: &ModelConfig, ds: &Dataset) -> ModelConfig {
    let mut m = cfg.clone();
    if m.n_tasks != ds.n_tasks {
        log::debug!("model n_tasks {} -> {} from data", m.n_tasks, ds.n_tasks);
        m.n_tasks = ds.n_tasks;
    }
    m
}

/// Proteins the compound-only variants get output columns for.
pub fn target_proteins(pairs: &[PairSample]) -> Vec<String> {
    pairs
        .iter()
        .map(|p| p.protein_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn cluster_fingerprints(names: &[String]) -> Result<Vec<Fingerprint>> {
    names
        .iter()
        .map(|s| {
            let g = parse_smiles(s).map_err(|e| PipelineError::Invalid(format!("{s}: {e}")))?;
            Ok(ecfp(&g, CLUSTER_RADIUS, CLUSTER_BITS)?)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub entities: Entities,
    pub assignment: FoldAssignment,
    pub clustering: Option<Clustering>,
}

impl SplitOutcome {
    /// `pass`, or the audit failure.
    pub fn audit(&self) -> String {
        match audit(&self.entities, &self.assignment, self.clustering.as_ref()) {
            Ok(()) => "pass".into(),
            Err(e) => e.to_string(),
        }
    }

    /// Rebuilds a split from a fold file written for the same dataset.
    pub fn from_fold_file(pairs: &[PairSample], file: FoldFile, threshold: f64) -> Result<Self> {
        let same = file.pairs.len() == pairs.len()
            && file
                .pairs
                .iter()
                .zip(pairs)
                .all(|((s, p), q)| *s == q.smiles && *p == q.protein_id);
        if !same {
            return Err(PipelineError::Invalid(
                "fold file does not match the dataset's pairs".into(),
            ));
        }
        let entities = Entities::from_pairs(pairs);
        let clustering = if file.assignment.scheme == Scheme::ColdCluster {
            Some(cluster_compounds(
                &cluster_fingerprints(&entities.compound_names)?,
                threshold,
            ))
        } else {
            None
        };
        Ok(SplitOutcome {
            entities,
            assignment: file.assignment,
            clustering,
        })
    }

    pub fn fold_file(&self, pairs: &[PairSample]) -> FoldFile {
        FoldFile {
            assignment: self.assignment.clone(),
            pairs: pairs.iter().map(|p| (p.smiles.clone(), p.protein_id.clone())).collect(),
        }
    }
}

pub fn make_split(pairs: &[PairSample], scheme: Scheme, k: usize, seed: u64, threshold: f64) -> Result<SplitOutcome> {
    let entities = Entities::from_pairs(pairs);
    let mut clustering = None;
    let assignment = match scheme {
        Scheme::Warm => warm_split(&entities, k, seed)?,
        Scheme::ColdDrug => cold_entity_split(&entities, k, seed, Axis::Drug)?,
        Scheme::ColdTarget => cold_entity_split(&entities, k, seed, Axis::Target)?,
        Scheme::Random => random_split(entities.len(), k, seed)?,
        Scheme::ColdCluster => {
            let c = cluster_compounds(&cluster_fingerprints(&entities.compound_names)?, threshold);
            log::info!(
                "{} compounds in {} clusters at threshold {threshold}",
                c.ids.len(),
                c.n_clusters
            );
            let a = cold_cluster_split(&entities, &c, k, seed)?;
            clustering = Some(c);
            a
        }
    };
    Ok(SplitOutcome {
        entities,
        assignment,
        clustering,
    })
}

/// Training indices with minority pairs replicated per the data config.
fn training_indices(cfg: &RunConfig, pairs: &[PairSample], train: Vec<usize>, seed: u64) -> Vec<usize> {
    let Some(threshold) = cfg.data.oversample_threshold else {
        return train;
    };
    let subset: Vec<PairSample> = train.iter().map(|&i| pairs[i].clone()).collect();
    let grown = oversample(&subset, threshold, cfg.data.oversample_ratio, seed);
    let index: HashMap<(&str, &str), usize> = train
        .iter()
        .map(|&i| ((pairs[i].smiles.as_str(), pairs[i].protein_id.as_str()), i))
        .collect();
    let mut out = train.clone();
    out.extend(
        grown[subset.len()..]
            .iter()
            .map(|p| index[&(p.smiles.as_str(), p.protein_id.as_str())]),
    );
    out
}

/// Fresh model for one training run; `offset` varies the init seed.
pub fn new_model(cfg: &RunConfig, ds: &Dataset, pairs: &[PairSample], offset: u64) -> Result<PadmeModel> {
    let mut m = model_config_for(&cfg.model, ds);
    m.seed = m.seed.wrapping_add(offset);
    Ok(PadmeModel::new(m, target_proteins(pairs)).map_err(TrainError::from)?)
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: CvReport,
    pub splits: Vec<SplitOutcome>,
}

/// Repeated k-fold cross-validation. Each repetition re-splits with
/// `split.seed + rep`; every fold trains with early stopping on its
/// validation fold and is scored there.
pub fn cv(cfg: &RunConfig, ds: &Dataset) -> Result<CvOutcome> {
    cv_observed(cfg, ds, None, |_, _, _| Ok(()))
}

/// [`cv`] over `given` splits (one per repetition) when supplied, calling
/// `on_fold(row, trained model, rows so far)` after each fold so callers
/// can persist checkpoints and partial reports.
pub fn cv_observed<F>(
    cfg: &RunConfig,
    ds: &Dataset,
    given: Option<Vec<SplitOutcome>>,
    mut on_fold: F,
) -> Result<CvOutcome>
where
    F: FnMut(&CvFoldRow, &PadmeModel, &[CvFoldRow]) -> Result<()>,
{
    let pairs = ds.pairs();
    let m = model_config_for(&cfg.model, ds);
    let data = Featurized::build(&pairs, &ds.proteins, &m)?;
    let s = &cfg.split;
    let holdout = if s.exclude_holdout {
        Some(hyperopt_holdout(pairs.len(), s.k, s.seed)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut splits = Vec::new();
    let given_reps = given.as_ref().map(Vec::len);
    let mut given = given.map(Vec::into_iter);
    for rep in 0..given_reps.unwrap_or(s.repetitions) {
        let split = match given.as_mut().and_then(Iterator::next) {
            Some(split) => split,
            None => make_split(
                &pairs,
                s.scheme,
                s.k,
                s.seed.wrapping_add(rep as u64),
                s.cluster_threshold,
            )?,
        };
        let k = split.assignment.k;
        let audit = split.audit();
        if audit != "pass" {
            log::error!("rep {rep}: split audit failed: {audit}");
        }
        for fold in 0..k {
            let offset = (rep * k + fold) as u64;
            let mut val = split.assignment.test_indices(fold);
            if let Some(h) = &holdout {
                val.retain(|&i| !h.in_holdout[i]);
            }
            let train = training_indices(
                cfg,
                &pairs,
                split.assignment.train_indices(fold),
                cfg.train.seed ^ offset,
            );
            let tc = TrainConfig {
                seed: cfg.train.seed.wrapping_add(offset),
                ..cfg.train.clone()
            };
            let outcome = trainer::train(new_model(cfg, ds, &pairs, offset)?, &data, &train, &val, &tc)?;
            let report = trainer::evaluate(&outcome.model, &data, &val)?;
            log::info!(
                "rep {rep} fold {fold}: best epoch {} rmse {:?} ci {:?}",
                outcome.best_epoch,
                report.rmse.value,
                report.ci.value
            );
            let row = CvFoldRow {
                rep,
                fold,
                n_train: train.len(),
                n_val: val.len(),
                best_epoch: outcome.best_epoch,
                rmse: report.rmse.value,
                r2: report.r2.value,
                ci: report.ci.value,
                composite: report.composite(),
                audit: audit.clone(),
            };
            rows.push(row.clone());
            on_fold(&row, &outcome.model, &rows)?;
        }
        splits.push(split);
    }
    Ok(CvOutcome {
        report: CvReport::new(cfg.to_toml(), rows),
        splits,
    })
}

/// Tuning objective: train on everything outside the holdout, early stop
/// and score on the holdout. Lower is better.
pub struct HoldoutObjective<'a> {
    base: &'a RunConfig,
    ds: &'a Dataset,
    pairs: Vec<PairSample>,
    data: Featurized,
    train: Vec<usize>,
    holdout: Vec<usize>,
}

impl<'a> HoldoutObjective<'a> {
    pub fn new(base: &'a RunConfig, ds: &'a Dataset) -> Result<Self> {
        let pairs = ds.pairs();
        let data = Featurized::build(&pairs, &ds.proteins, &model_config_for(&base.model, ds))?;
        let h = hyperopt_holdout(pairs.len(), base.split.k, base.split.seed)?;
        let train = training_indices(base, &pairs, h.train_indices(), base.train.seed);
        Ok(HoldoutObjective {
            base,
            ds,
            pairs,
            data,
            train,
            holdout: h.holdout_indices(),
        })
    }

    pub fn evaluate(&self, cfg: &RunConfig) -> Result<f64> {
        if cfg.model.feature_signature() != self.base.model.feature_signature() {
            return Err(PipelineError::Invalid(
                "search points may not change compound features".into(),
            ));
        }
        let model = new_model(cfg, self.ds, &self.pairs, 0)?;
        let out = trainer::train(model, &self.data, &self.train, &self.holdout, &cfg.train)?;
        Ok(out.best_score)
    }
}

pub fn tune(cfg: &RunConfig, ds: &Dataset, space: &SearchSpace) -> Result<SearchResult> {
    let obj = HoldoutObjective::new(cfg, ds)?;
    let mut f = |p: &crate::hyperopt::Point| -> std::result::Result<f64, String> {
        let c = cfg.with_point(space, p).map_err(|e| e.to_string())?;
        obj.evaluate(&c).map_err(|e| e.to_string())
    };
    let t = &cfg.tune;
    let result = match t.strategy {
        Strategy::Random => random_search(space, &mut f, t.budget, t.seed)?,
        Strategy::Gp => gp_ei_search(space, &mut f, t.budget, t.n_init, t.candidates, t.seed)?,
    };
    Ok(result)
}

/// Trains one model: early stopping on a seeded random 1/k of the pairs,
/// the rest for training.
pub fn train_final(cfg: &RunConfig, ds: &Dataset) -> Result<(trainer::TrainOutcome, EvalReport)> {
    let pairs = ds.pairs();
    let data = Featurized::build(&pairs, &ds.proteins, &model_config_for(&cfg.model, ds))?;
    let folds = random_split(pairs.len(), cfg.split.k.max(2), cfg.split.seed)?;
    let val = folds.test_indices(0);
    let train = training_indices(cfg, &pairs, folds.train_indices(0), cfg.train.seed);
    let out = trainer::train(new_model(cfg, ds, &pairs, 0)?, &data, &train, &val, &cfg.train)?;
    let report = trainer::evaluate(&out.model, &data, &val)?;
    Ok((out, report))
}

/// Per-task applicability domains from the dataset's transformed values.
pub fn fit_ad(ds: &Dataset) -> Vec<Option<AdRange>> {
    let mut per_task = vec![Vec::new(); ds.n_tasks];
    for r in &ds.records {
        per_task[r.task].push(r.value);
    }
    fit_per_task(&per_task)
}

/// Reads `smiles,protein_id[,...]` pairs; extra columns are ignored.
pub fn read_query_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let headers = rdr.headers().map_err(IoError::from)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Invalid(format!("{}: no '{name}' column", path.display())))
    };
    let (s, p) = (col("smiles")?, col("protein_id")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(IoError::from)?;
        out.push((rec[s].to_string(), rec[p].to_string()));
    }
    Ok(out)
}

/// One row per (pair, task). `ad`, when given, adds `in_ad` per task; a
/// task without a domain is marked outside.
pub fn predict_rows(
    model: &PadmeModel,
    query: &[(String, String)],
    proteins: &crate::dataset::ProteinTable,
    ad: Option<&[Option<AdRange>]>,
) -> Result<Vec<PredictionRow>> {
    let n_tasks = model.config().n_tasks;
    let pairs: Vec<PairSample> = query
        .iter()
        .map(|(s, p)| PairSample {
            smiles: s.clone(),
            protein_id: p.clone(),
            values: vec![0.0; n_tasks],
            mask: vec![0.0; n_tasks],
        })
        .collect();
    let data = Featurized::build(&pairs, proteins, model.config())?;
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let preds = trainer::predict(model, &data, &idx)?;
    let mut rows = Vec::new();
    for (q, p) in query.iter().zip(&preds) {
        for (task, &prediction) in p.iter().enumerate() {
            rows.push(PredictionRow {
                smiles: q.0.clone(),
                protein_id: q.1.clone(),
                task,
                prediction,
                in_ad: ad.map(|a| {
                    a.get(task)
                        .and_then(|r| r.as_ref())
                        .is_some_and(|r| r.contains(prediction))
                }),
            });
        }
    }
    Ok(rows)
}

/// Writes compound features (fingerprint CSV or graph binary, per the
/// variant) and protein descriptors into `out_dir`. Returns the paths.
pub fn featurize(ds: &Dataset, model: &ModelConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let smiles: BTreeSet<&str> = ds.records.iter().map(|r| r.smiles.as_str()).collect();
    let mut fps = Vec::new();
    let mut graphs = Vec::new();
    for s in smiles {
        match model.featurize(s).map_err(TrainError::from)? {
            CompoundFeatures::Ecfp(f) => fps.push((s.to_string(), f)),
            CompoundFeatures::Graph(g) => graphs.push((s.to_string(), g)),
        }
    }
    let mut written = Vec::new();
    if model.variant.uses_graph() {
        let path = out_dir.join("graphs.bin");
        write_bytes(&path, &io::graphs_to_bytes(&graphs))?;
        written.push(path);
    } else {
        let path = out_dir.join("fingerprints.csv");
        io::write_fingerprints(create(&path)?, &fps)?;
        written.push(path);
    }
    let used: BTreeSet<&str> = ds.records.iter().map(|r| r.protein_id.as_str()).collect();
    let descriptors = ds
        .proteins
        .iter()
        .filter(|e| used.contains(e.id.as_str()))
        .map(|e| {
            psc(&e.sequence, e.phosphorylated)
                .map(|d| (e.id.clone(), d))
                .map_err(|e| PipelineError::Invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join("proteins.psc");
    write_bytes(&path, &io::psc_to_bytes(&descriptors))?;
    written.push(path);
    Ok(written)
}

/// Minimum wall time of one epoch over `repeats` runs on `n_pairs`
/// synthetic pairs.
pub fn epoch_cost(n_pairs: usize, model: &ModelConfig, train: &TrainConfig, repeats: usize) -> Result<Duration> {
    let syn = SyntheticData::sized(n_pairs, 11);
    let pairs = crate::dataset::assemble_pairs(&syn.records, 1)?;
    let proteins = syn.protein_table();
    let mut m = model.clone();
    m.n_tasks = 1;
    let data = Featurized::build(&pairs, &proteins, &m)?;
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let mut model = PadmeModel::new(m.clone(), target_proteins(&pairs)).map_err(TrainError::from)?;
        best = best.min(trainer::time_epoch(&mut model, &data, &idx, train)?);
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct SmokeStep {
    pub name: String,
    pub ok: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct SmokeReport {
    pub steps: Vec<SmokeStep>,
}

impl SmokeReport {
    pub fn ok(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.ok)
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<String>) {
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        let elapsed = start.elapsed();
        log::info!("smoke {name}: {} ({detail})", if ok { "ok" } else { "FAILED" });
        self.steps.push(SmokeStep {
            name: name.into(),
            ok,
            detail,
            elapsed,
        });
    }
}

/// The four schemes a full evaluation covers.
pub const SMOKE_SCHEMES: [Scheme; 4] = [Scheme::Warm, Scheme::ColdDrug, Scheme::ColdTarget, Scheme::ColdCluster];

fn check_same(what: &str, a: &[u8], b: &[u8]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!(
            "{what} did not round-trip byte-identically"
        )))
    }
}

/// Every stage on the dataset in `data_dir` with a small model, writing
/// artifacts to `out_dir` and reading each back.
pub fn smoke(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> SmokeReport {
    let mut rep = SmokeReport::default();
    let ds = match load_dataset(cfg, data_dir) {
        Ok(ds) => {
            rep.run("load", || Ok(format!("{} records", ds.records.len())));
            ds
        }
        Err(e) => {
            rep.run("load", || Err(e));
            return rep;
        }
    };
    let pairs = ds.pairs();

    rep.run("featurize", || {
        let paths = featurize(&ds, &cfg.model, out_dir)?;
        for p in &paths {
            let bytes = std::fs::read(p).map_err(|source| PipelineError::File {
                path: p.display().to_string(),
                source,
            })?;
            let again = match p.extension().and_then(|e| e.to_str()) {
                Some("csv") => {
                    let mut v = Vec::new();
                    io::write_fingerprints(&mut v, &io::read_fingerprints(&bytes[..])?)?;
                    v
                }
                Some("psc") => io::psc_to_bytes(&io::psc_from_bytes(&bytes)?),
                _ => io::graphs_to_bytes(&io::graphs_from_bytes(&bytes)?),
            };
            check_same(&p.display().to_string(), &bytes, &again)?;
        }
        Ok(format!("{} files", paths.len()))
    });

    for scheme in SMOKE_SCHEMES {
        rep.run(&format!("cv-{scheme}"), || {
            let mut c = cfg.clone();
            c.split.scheme = scheme;
            let out = cv(&c, &ds)?;
            for (i, s) in out.splits.iter().enumerate() {
                let path = out_dir.join(format!("folds-{scheme}-{i}.csv"));
                io::write_folds(create(&path)?, &s.fold_file(&pairs))?;
                let back = io::read_folds(open(&path)?)?;
                if back != s.fold_file(&pairs) {
                    return Err(PipelineError::Invalid(format!("{} did not parse back", path.display())));
                }
            }
            let path = out_dir.join(format!("cv-{scheme}.csv"));
            let mut bytes = Vec::new();
            io::write_cv_report(&mut bytes, &out.report)?;
            write_bytes(&path, &bytes)?;
            let mut again = Vec::new();
            io::write_cv_report(&mut again, &io::read_cv_report(&bytes[..])?)?;
            check_same("cv report", &bytes, &again)?;
            if !out.report.audits_pass() {
                let bad = out
                    .report
                    .folds
                    .iter()
                    .find(|f| f.audit != "pass")
                    .expect("some fold failed");
                return Err(PipelineError::Invalid(format!("audit: {}", bad.audit)));
            }
            let mean = out.report.mean().and_then(|m| m.rmse).unwrap_or(f64::NAN);
            Ok(format!(
                "{} folds, mean rmse {mean:.4}, audits pass",
                out.report.folds.len()
            ))
        });
    }

    let ckpt_path = out_dir.join("model.ckpt");
    let mut model = None;
    rep.run("train", || {
        let (out, report) = train_final(cfg, &ds)?;
        let ck = Checkpoint {
            model: out.model.clone(),
            adam: Some(out.adam),
            run_config: cfg.to_toml(),
        };
        ck.save(&ckpt_path)?;
        write_bytes(
            &out_dir.join("history.csv"),
            trainer::history_csv(&out.history).as_bytes(),
        )?;
        model = Some(out.model);
        Ok(format!("best epoch {}, rmse {:?}", out.best_epoch, report.rmse.value))
    });
    let Some(model) = model else {
        return rep;
    };

    rep.run("checkpoint", || {
        let bytes = std::fs::read(&ckpt_path).map_err(|source| PipelineError::File {
            path: ckpt_path.display().to_string(),
            source,
        })?;
        let back = Checkpoint::from_bytes(&bytes)?;
        check_same("checkpoint", &bytes, &back.to_bytes()?)?;
        if back.model != model {
            return Err(PipelineError::Invalid("restored model differs".into()));
        }
        Ok(format!("{} bytes", bytes.len()))
    });

    let query: Vec<(String, String)> = pairs.iter().map(|p| (p.smiles.clone(), p.protein_id.clone())).collect();
    let pred_path = out_dir.join("predictions.csv");
    rep.run("predict", || {
        let ad = fit_ad(&ds);
        let rows = predict_rows(&model, &query, &ds.proteins, Some(&ad))?;
        let mut bytes = Vec::new();
        io::write_predictions(&mut bytes, &rows)?;
        write_bytes(&pred_path, &bytes)?;
        let back = io::read_predictions(&bytes[..])?;
        let mut again = Vec::new();
        io::write_predictions(&mut again, &back)?;
        check_same("predictions", &bytes, &again)?;
        let inside = rows.iter().filter(|r| r.in_ad == Some(true)).count();
        Ok(format!("{} rows, {inside} inside the domain", rows.len()))
    });

    rep.run("evaluate", || {
        let idx: Vec<usize> = (0..pairs.len()).collect();
        let data = Featurized::build(&pairs, &ds.proteins, model.config())?;
        let report = trainer::evaluate(&model, &data, &idx)?;
        let mut bytes = Vec::new();
        io::write_report(&mut bytes, &report, &cfg.to_toml())?;
        write_bytes(&out_dir.join("report.csv"), &bytes)?;
        let (back, snapshot) = io::read_report(&bytes[..])?;
        RunConfig::from_toml(&snapshot)?;
        let mut again = Vec::new();
        io::write_report(&mut again, &back, &snapshot)?;
        check_same("report", &bytes, &again)?;
        Ok(format!("rmse {:?} ci {:?}", report.rmse.value, report.ci.value))
    });
    rep
}

/// Writes a small synthetic dataset and a matching config into `dir`.
pub fn write_fixtures(dir: &Path, n_pairs: usize, seed: u64) -> Result<()> {
    let syn = SyntheticData::clustered(n_pairs, seed);
    write_bytes(&dir.join("interactions.csv"), syn.interactions_csv().as_bytes())?;
    write_bytes(&dir.join("sequences.tsv"), syn.sequences_tsv().as_bytes())?;
    write_bytes(&dir.join("config.toml"), SMOKE_CONFIG.as_bytes())?;
    write_bytes(&dir.join("space.toml"), crate::config::DEFAULT_SPACE.as_bytes())?;
    Ok(())
}

/// Small, fast settings for fixture runs.
pub const SMOKE_CONFIG: &str = r#"[model]
variant = "padme-ecfp"
hidden_layers = [64, 32]
dropout_rates = [0.1]
ecfp_bits = 1024

[train]
batch_size = 32
max_epochs = 8
patience = 3
learning_rate = 0.003

[split]
k = 3
repetitions = 1
"#;
