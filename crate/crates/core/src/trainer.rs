//! Mini-batch training with Adam and early stopping on the composite
//! validation score `mean(RMSE) − mean(CI)`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PairSample, ProteinTable};
use crate::metrics::{EvalReport, MetricError};
use crate::model::{CompoundFeatures, ModelConfig, ModelError, PadmeModel, PairRef};
use crate::protein::{psc, ProteinDescriptor, ProteinError};
use crate::tensor::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("empty validation set")]
    EmptyValidationSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("protein '{id}': {source}")]
    Protein { id: String, source: ProteinError },
    #[error("no sequence for protein '{0}'")]
    MissingProtein(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub compound: usize,
    pub protein: usize,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Pair samples with compound and protein features computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub compounds: Vec<CompoundFeatures>,
    pub compound_smiles: Vec<String>,
    pub protein_ids: Vec<String>,
    /// `None` for compound-only variants, which need no descriptor.
    pub descriptors: Vec<Option<ProteinDescriptor>>,
    pub samples: Vec<Sample>,
}

impl Featurized {
    pub fn build(pairs: &[PairSample], proteins: &ProteinTable, cfg: &ModelConfig) -> Result<Self, TrainError> {
        let mut out = Featurized {
            compounds: Vec::new(),
            compound_smiles: Vec::new(),
            protein_ids: Vec::new(),
            descriptors: Vec::new(),
            samples: Vec::with_capacity(pairs.len()),
        };
        let mut ci: HashMap<&str, usize> = HashMap::new();
        let mut pi: HashMap<&str, usize> = HashMap::new();
        for p in pairs {
            let compound = match ci.get(p.smiles.as_str()) {
                Some(&i) => i,
                None => {
                    out.compounds.push(cfg.featurize(&p.smiles)?);
                    out.compound_smiles.push(p.smiles.clone());
                    ci.insert(&p.smiles, out.compounds.len() - 1);
                    out.compounds.len() - 1
                }
            };
            let protein = match pi.get(p.protein_id.as_str()) {
                Some(&i) => i,
                None => {
                    let descriptor = if cfg.variant.uses_protein() {
                        let e = proteins
                            .get(&p.protein_id)
                            .ok_or_else(|| TrainError::MissingProtein(p.protein_id.clone()))?;
                        Some(
                            psc(&e.sequence, e.phosphorylated).map_err(|source| TrainError::Protein {
                                id: e.id.clone(),
                                source,
                            })?,
                        )
                    } else {
                        None
                    };
                    out.protein_ids.push(p.protein_id.clone());
                    out.descriptors.push(descriptor);
                    pi.insert(&p.protein_id, out.protein_ids.len() - 1);
                    out.protein_ids.len() - 1
                }
            };
            out.samples.push(Sample {
                compound,
                protein,
                values: p.values.clone(),
                mask: p.mask.clone(),
            });
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pair_refs(&self, idx: &[usize]) -> Vec<PairRef<'_>> {
        idx.iter()
            .map(|&i| {
                let s = &self.samples[i];
                PairRef {
                    compound: &self.compounds[s.compound],
                    protein_id: &self.protein_ids[s.protein],
                    descriptor: self.descriptors[s.protein].as_ref(),
                }
            })
            .collect()
    }
}

const PREDICT_BATCH: usize = 256;

/// Eval-mode predictions for the selected samples.
pub fn predict(model: &PadmeModel, data: &Featurized, idx: &[usize]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        out.extend(model.predict(&data.pair_refs(chunk))?);
    }
    Ok(out)
}

/// Per-task metrics over the observed entries of the selected samples.
pub fn evaluate(model: &PadmeModel, data: &Featurized, idx: &[usize]) -> Result<EvalReport, TrainError> {
    let preds = predict(model, data, idx)?;
    let n_tasks = model.config().n_tasks;
    let (mut y, mut y_hat) = (vec![Vec::new(); n_tasks], vec![Vec::new(); n_tasks]);
    for (&i, p) in idx.iter().zip(&preds) {
        let s = &data.samples[i];
        for t in 0..n_tasks {
            if s.mask[t] > 0.0 {
                y[t].push(s.values[t]);
                y_hat[t].push(p[t]);
            }
        }
    }
    Ok(EvalReport::evaluate(&y, &y_hat)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    /// `None` when no task had a comparable pair.
    pub val_ci: Option<f64>,
    pub composite: f64,
    pub task_rmse: Vec<Option<f64>>,
    pub task_ci: Vec<Option<f64>>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_rmse,val_ci,composite";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let ci = r.val_ci.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_rmse, ci, r.composite
        ));
    }
    s
}

/// Tracks the best score and how many evaluations passed without
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a score; returns true if it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score < b) {
            self.best = Some(score);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Model at the best validation score.
    pub model: PadmeModel,
    /// Optimizer state matching `model`.
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
}

/// One pass over `train_idx` in seeded shuffled mini-batches. The last
/// partial batch is kept. Returns the mask-weighted mean batch loss.
pub fn train_epoch(
    model: &mut PadmeModel,
    adam: &mut Adam,
    data: &Featurized,
    train_idx: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut order = train_idx.to_vec();
    order.shuffle(rng);
    let (mut total, mut weight) = (0.0, 0.0);
    for chunk in order.chunks(batch_size) {
        let pairs = data.pair_refs(chunk);
        let values: Vec<&[f64]> = chunk.iter().map(|&i| data.samples[i].values.as_slice()).collect();
        let masks: Vec<&[f64]> = chunk.iter().map(|&i| data.samples[i].mask.as_slice()).collect();
        let (t, m) = model.targets(&pairs, &values, &masks)?;
        let w: f64 = m.data().iter().sum();
        let loss = model.train_step(&pairs, t, m, adam, rng)?;
        total += loss * w;
        weight += w;
    }
    Ok(if weight > 0.0 { total / weight } else { 0.0 })
}

pub fn train(
    mut model: PadmeModel,
    data: &Featurized,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if val_idx.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<(PadmeModel, Adam, usize)> = None;
    let mut warned_ci = false;

    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(&mut model, &mut adam, data, train_idx, cfg.batch_size, &mut rng)?;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        if epoch % cfg.eval_every != 0 && epoch != cfg.max_epochs {
            continue;
        }
        let report = evaluate(&model, data, val_idx)?;
        let val_rmse = report.mean_rmse().ok_or(TrainError::EmptyValidationSet)?;
        let val_ci = report.mean_ci();
        if val_ci.is_none() && !warned_ci {
            log::warn!("validation set has no comparable pair; early stopping on RMSE alone");
            warned_ci = true;
        }
        let composite = report.composite().ok_or(TrainError::EmptyValidationSet)?;
        log::debug!("epoch {epoch}: loss {train_loss:.5} val_rmse {val_rmse:.5} composite {composite:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_rmse,
            val_ci,
            composite,
            task_rmse: report.tasks.iter().map(|t| t.rmse).collect(),
            task_ci: report.tasks.iter().map(|t| t.ci).collect(),
        });
        if stopper.observe(composite) {
            best = Some((model.clone(), adam.clone(), epoch));
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (model, adam, best_epoch) = best.expect("at least one evaluation runs");
    Ok(TrainOutcome {
        model,
        adam,
        history,
        best_epoch,
        best_score: stopper.best().expect("at least one evaluation runs"),
    })
}

/// Wall time of one training epoch over `train_idx`.
pub fn time_epoch(
    model: &mut PadmeModel,
    data: &Featurized,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Duration, TrainError> {
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    train_epoch(model, &mut adam, data, train_idx, cfg.batch_size, &mut rng)?;
    Ok(start.elapsed())
}
