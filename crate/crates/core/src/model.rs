//! The regression network: compound vector (fingerprint or graph-conv
//! readout), optionally concatenated with the protein descriptor, followed
//! by `[dense → batchnorm → relu → dropout] × L` and a linear output layer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compound::{self, AtomFeatureConfig, CompoundError, Fingerprint};
use crate::graphconv::{self, GraphConvError, GraphFeatures, GraphStack, MolBatch, Readout};
use crate::protein::{ProteinDescriptor, PSC_LAYOUT_VERSION, PSC_LEN};
use crate::smiles::{parse_smiles, SmilesError};
use crate::tensor::{Adam, Graph, Mode, NodeId, ParamId, ParamStore, Tensor, TensorError};

/// Momentum of batchnorm running statistics: `running = 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

pub const COMPOUND_INPUT: &str = "compound";
pub const ATOM_INPUT: &str = "atoms";
pub const PROTEIN_INPUT: &str = "protein";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("featurization mismatch: {0}")]
    FeatureMismatch(String),
    #[error("unknown protein '{0}' for a compound-only model")]
    UnknownProtein(String),
    #[error("protein '{0}' has no descriptor")]
    MissingDescriptor(String),
    #[error("task {task} out of range for {n_tasks} tasks")]
    TaskOutOfRange { task: usize, n_tasks: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    GraphConv(#[from] GraphConvError),
    #[error(transparent)]
    Compound(#[from] CompoundError),
    #[error("SMILES '{smiles}': {source}")]
    Smiles { smiles: String, source: SmilesError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PadmeEcfp,
    PadmeGraphconv,
    CompoundOnlyEcfp,
    CompoundOnlyGraphconv,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PadmeEcfp,
        Variant::PadmeGraphconv,
        Variant::CompoundOnlyEcfp,
        Variant::CompoundOnlyGraphconv,
    ];

    pub fn uses_protein(self) -> bool {
        matches!(self, Variant::PadmeEcfp | Variant::PadmeGraphconv)
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, Variant::PadmeGraphconv | Variant::CompoundOnlyGraphconv)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::PadmeEcfp => "padme-ecfp",
            Variant::PadmeGraphconv => "padme-graphconv",
            Variant::CompoundOnlyEcfp => "compound-only-ecfp",
            Variant::CompoundOnlyGraphconv => "compound-only-graphconv",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_layers: Vec<usize>,
    /// One rate per hidden layer, or a single rate shared by all.
    pub dropout_rates: Vec<f64>,
    pub use_batchnorm: bool,
    /// Number of measurement tasks in the data.
    pub n_tasks: usize,
    pub ecfp_radius: usize,
    pub ecfp_bits: usize,
    pub graph_conv_widths: Vec<usize>,
    pub graph_dense_width: usize,
    pub readout: Readout,
    pub seed: u64,
    pub atom_features: AtomFeatureConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::PadmeEcfp,
            hidden_layers: vec![256, 128],
            dropout_rates: vec![0.2],
            use_batchnorm: true,
            n_tasks: 1,
            ecfp_radius: compound::DEFAULT_RADIUS,
            ecfp_bits: compound::DEFAULT_N_BITS,
            graph_conv_widths: vec![64, 64],
            graph_dense_width: 128,
            readout: Readout::Sum,
            seed: 0,
            atom_features: AtomFeatureConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(1..=5).contains(&self.hidden_layers.len()) {
            return bad(format!("{} hidden layers, expected 1..=5", self.hidden_layers.len()));
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer width 0".into());
        }
        if self.dropout_rates.len() != 1 && self.dropout_rates.len() != self.hidden_layers.len() {
            return bad(format!(
                "{} dropout rates for {} hidden layers",
                self.dropout_rates.len(),
                self.hidden_layers.len()
            ));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("dropout rate {r} outside [0, 1)"));
        }
        if self.n_tasks == 0 {
            return bad("n_tasks must be at least 1".into());
        }
        if !compound::ALLOWED_N_BITS.contains(&self.ecfp_bits) {
            return bad(format!(
                "ecfp_bits {} not in {:?}",
                self.ecfp_bits,
                compound::ALLOWED_N_BITS
            ));
        }
        if self.variant.uses_graph() && (self.graph_dense_width == 0 || self.graph_conv_widths.contains(&0)) {
            return bad("graph layer width 0".into());
        }
        Ok(())
    }

    pub fn dropout_for(&self, layer: usize) -> f64 {
        if self.dropout_rates.len() == 1 {
            self.dropout_rates[0]
        } else {
            self.dropout_rates[layer]
        }
    }

    pub fn compound_width(&self) -> usize {
        if self.variant.uses_graph() {
            self.graph_dense_width
        } else {
            self.ecfp_bits
        }
    }

    /// Width of the network input (compound vector, plus descriptor for
    /// the protein-aware variants).
    pub fn input_width(&self) -> usize {
        self.compound_width() + if self.variant.uses_protein() { PSC_LEN } else { 0 }
    }

    /// Stamp identifying how inputs must be featurized for this model.
    pub fn feature_signature(&self) -> String {
        let compound = if self.variant.uses_graph() {
            self.atom_features.signature()
        } else {
            format!("ecfp:v1:r{}:b{}", self.ecfp_radius, self.ecfp_bits)
        };
        if self.variant.uses_protein() {
            format!("{compound}|psc:v{PSC_LAYOUT_VERSION}")
        } else {
            compound
        }
    }

    pub fn featurize(&self, smiles: &str) -> Result<CompoundFeatures, ModelError> {
        let g = parse_smiles(smiles).map_err(|source| ModelError::Smiles {
            smiles: smiles.to_string(),
            source,
        })?;
        if self.variant.uses_graph() {
            Ok(CompoundFeatures::Graph(GraphFeatures {
                atoms: compound::atom_features(&g, &self.atom_features)?,
                adjacency: g.neighbor_lists(),
            }))
        } else {
            Ok(CompoundFeatures::Ecfp(compound::ecfp(
                &g,
                self.ecfp_radius,
                self.ecfp_bits,
            )?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompoundFeatures {
    Ecfp(Fingerprint),
    Graph(GraphFeatures),
}

impl CompoundFeatures {
    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        match (self, cfg.variant.uses_graph()) {
            (CompoundFeatures::Ecfp(fp), false) => {
                if fp.n_bits() != cfg.ecfp_bits || fp.radius() != cfg.ecfp_radius {
                    return Err(ModelError::FeatureMismatch(format!(
                        "fingerprint r{}/{} bits, model expects r{}/{} bits",
                        fp.radius(),
                        fp.n_bits(),
                        cfg.ecfp_radius,
                        cfg.ecfp_bits
                    )));
                }
                Ok(())
            }
            (CompoundFeatures::Graph(gf), true) => {
                if gf.atoms.width != cfg.atom_features.width() {
                    return Err(ModelError::FeatureMismatch(format!(
                        "atom feature width {}, model expects {}",
                        gf.atoms.width,
                        cfg.atom_features.width()
                    )));
                }
                Ok(())
            }
            (_, graph) => Err(ModelError::FeatureMismatch(format!(
                "{} features given to a {} model",
                if graph { "fingerprint" } else { "graph" },
                cfg.variant
            ))),
        }
    }
}

/// One (compound, protein) pair handed to the network.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub compound: &'a CompoundFeatures,
    pub protein_id: &'a str,
    pub descriptor: Option<&'a ProteinDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PadmeModel {
    config: ModelConfig,
    target_proteins: Vec<String>,
    target_index: HashMap<String, usize>,
    params: ParamStore,
    graph_stack: Option<GraphStack>,
    layers: Vec<DenseLayer>,
    output: (ParamId, ParamId),
    running: Vec<RunningStats>,
}

struct Built {
    graph: Graph,
    output: NodeId,
    inputs: HashMap<String, Tensor>,
    norms: Vec<NodeId>,
}

impl PadmeModel {
    /// `target_proteins` names the output columns of compound-only
    /// variants and is ignored by the protein-aware ones.
    pub fn new(config: ModelConfig, target_proteins: Vec<String>) -> Result<Self, ModelError> {
        config.validate()?;
        let target_proteins = if config.variant.uses_protein() {
            Vec::new()
        } else {
            if target_proteins.is_empty() {
                return Err(ModelError::InvalidConfig(
                    "compound-only variants need at least one target protein".into(),
                ));
            }
            target_proteins
        };
        let target_index = target_proteins
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let graph_stack = config.variant.uses_graph().then(|| {
            GraphStack::init(
                &mut params,
                config.atom_features.width(),
                &config.graph_conv_widths,
                config.graph_dense_width,
                config.atom_features.max_degree,
                config.readout,
                &mut rng,
            )
        });

        let mut width = config.input_width();
        let mut layers = Vec::new();
        let mut running = Vec::new();
        for (i, &h) in config.hidden_layers.iter().enumerate() {
            let weight = params.add(format!("dense{i}.weight"), graphconv::he_uniform(&mut rng, width, h));
            let bias = params.add(format!("dense{i}.bias"), Tensor::zeros(&[h]));
            let norm = config.use_batchnorm.then(|| {
                running.push(RunningStats {
                    mean: vec![0.0; h],
                    var: vec![1.0; h],
                });
                (
                    params.add(format!("bn{i}.gamma"), Tensor::filled(&[h], 1.0)),
                    params.add(format!("bn{i}.beta"), Tensor::zeros(&[h])),
                )
            });
            layers.push(DenseLayer { weight, bias, norm });
            width = h;
        }
        let n_out = if config.variant.uses_protein() {
            config.n_tasks
        } else {
            config.n_tasks * target_proteins.len()
        };
        let output = (
            params.add("out.weight", graphconv::he_uniform(&mut rng, width, n_out)),
            params.add("out.bias", Tensor::zeros(&[n_out])),
        );

        Ok(PadmeModel {
            config,
            target_proteins,
            target_index,
            params,
            graph_stack,
            layers,
            output,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn target_proteins(&self) -> &[String] {
        &self.target_proteins
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn output_width(&self) -> usize {
        self.params.get(self.output.1).len()
    }

    pub fn output_bias(&self) -> ParamId {
        self.output.1
    }

    /// Network output column holding `task` for the given protein.
    pub fn output_column(&self, protein_id: &str, task: usize) -> Result<usize, ModelError> {
        if task >= self.config.n_tasks {
            return Err(ModelError::TaskOutOfRange {
                task,
                n_tasks: self.config.n_tasks,
            });
        }
        if self.config.variant.uses_protein() {
            return Ok(task);
        }
        self.target_index
            .get(protein_id)
            .map(|&p| p * self.config.n_tasks + task)
            .ok_or_else(|| ModelError::UnknownProtein(protein_id.to_string()))
    }

    fn build(&self, mode: Mode, pairs: &[PairRef<'_>]) -> Result<Built, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let cfg = &self.config;
        for p in pairs {
            p.compound.check(cfg)?;
            if !cfg.variant.uses_protein() && !self.target_index.contains_key(p.protein_id) {
                return Err(ModelError::UnknownProtein(p.protein_id.to_string()));
            }
        }
        let mut g = Graph::new(mode);
        let mut inputs = HashMap::new();

        let compound = match &self.graph_stack {
            Some(stack) => {
                let mols: Vec<&GraphFeatures> = pairs
                    .iter()
                    .map(|p| match p.compound {
                        CompoundFeatures::Graph(gf) => gf,
                        CompoundFeatures::Ecfp(_) => unreachable!("checked above"),
                    })
                    .collect();
                let batch = MolBatch::new(&mols, cfg.atom_features.max_degree)?;
                let atoms = g.input(ATOM_INPUT);
                let vec = stack.build(&mut g, atoms, &batch);
                if stack.readout == Readout::Mean {
                    inputs.insert(
                        graphconv::MEAN_READOUT_INPUT.to_string(),
                        graphconv::mean_readout_weights(&batch, stack.out_width),
                    );
                }
                inputs.insert(ATOM_INPUT.to_string(), batch.features);
                vec
            }
            None => {
                let bits = cfg.ecfp_bits;
                let mut data = Vec::with_capacity(pairs.len() * bits);
                for p in pairs {
                    match p.compound {
                        CompoundFeatures::Ecfp(fp) => data.extend(fp.to_dense()),
                        CompoundFeatures::Graph(_) => unreachable!("checked above"),
                    }
                }
                inputs.insert(COMPOUND_INPUT.to_string(), Tensor::matrix(pairs.len(), bits, data)?);
                g.input(COMPOUND_INPUT)
            }
        };

        let mut h = if cfg.variant.uses_protein() {
            let mut data = Vec::with_capacity(pairs.len() * PSC_LEN);
            for p in pairs {
                let d = p
                    .descriptor
                    .ok_or_else(|| ModelError::MissingDescriptor(p.protein_id.to_string()))?;
                data.extend_from_slice(d.values());
            }
            inputs.insert(PROTEIN_INPUT.to_string(), Tensor::matrix(pairs.len(), PSC_LEN, data)?);
            let prot = g.input(PROTEIN_INPUT);
            g.concat(compound, prot)
        } else {
            compound
        };

        let mut norms = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            h = g.matmul(h, w);
            h = g.add_bias(h, b);
            if let Some((gamma, beta)) = layer.norm {
                let stats = &self.running[norms.len()];
                let (gn, bn) = (g.param(gamma), g.param(beta));
                h = g.batch_norm(h, gn, bn, stats.mean.clone(), stats.var.clone(), BN_EPS);
                norms.push(h);
            }
            h = g.relu(h);
            h = g.dropout(h, cfg.dropout_for(i));
        }
        let (w, b) = (g.param(self.output.0), g.param(self.output.1));
        let out = g.matmul(h, w);
        let out = g.add_bias(out, b);
        Ok(Built {
            graph: g,
            output: out,
            inputs,
            norms,
        })
    }

    /// Raw network output, `pairs.len() × output_width`.
    pub fn forward(&self, mode: Mode, pairs: &[PairRef<'_>], rng: &mut dyn RngCore) -> Result<Tensor, ModelError> {
        let Built {
            mut graph,
            output,
            inputs,
            ..
        } = self.build(mode, pairs)?;
        graph.forward(&self.params, inputs, rng)?;
        Ok(graph.output(output, &self.params)?.clone())
    }

    /// Eval-mode predictions, one row of `n_tasks` values per pair.
    pub fn predict(&self, pairs: &[PairRef<'_>]) -> Result<Vec<Vec<f64>>, ModelError> {
        // dropout is inactive in eval mode; the RNG is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(Mode::Eval, pairs, &mut rng)?;
        pairs
            .iter()
            .enumerate()
            .map(|(r, p)| {
                (0..self.config.n_tasks)
                    .map(|t| Ok(out.get(r, self.output_column(p.protein_id, t)?)))
                    .collect()
            })
            .collect()
    }

    /// Builds target and mask matrices in output-column layout.
    pub fn targets(
        &self,
        pairs: &[PairRef<'_>],
        values: &[&[f64]],
        masks: &[&[f64]],
    ) -> Result<(Tensor, Tensor), ModelError> {
        let w = self.output_width();
        let mut t = vec![0.0; pairs.len() * w];
        let mut m = vec![0.0; pairs.len() * w];
        for (r, p) in pairs.iter().enumerate() {
            for task in 0..self.config.n_tasks {
                let c = self.output_column(p.protein_id, task)?;
                t[r * w + c] = values[r][task];
                m[r * w + c] = masks[r][task];
            }
        }
        Ok((Tensor::matrix(pairs.len(), w, t)?, Tensor::matrix(pairs.len(), w, m)?))
    }

    /// Graph computing the masked training loss, forwarded in train mode.
    /// Returns the graph, the loss node, and the batchnorm nodes.
    pub fn loss_graph(
        &self,
        pairs: &[PairRef<'_>],
        targets: Tensor,
        mask: Tensor,
        rng: &mut dyn RngCore,
    ) -> Result<(Graph, NodeId, Vec<NodeId>), ModelError> {
        let Built {
            mut graph,
            output,
            mut inputs,
            norms,
        } = self.build(Mode::Train, pairs)?;
        let t = graph.input("targets");
        let w = graph.input("mask");
        let loss = graph.weighted_mse(output, t, w);
        inputs.insert("targets".into(), targets);
        inputs.insert("mask".into(), mask);
        graph.forward(&self.params, inputs, rng)?;
        Ok((graph, loss, norms))
    }

    /// One optimizer step on a mini-batch; returns the batch loss.
    pub fn train_step(
        &mut self,
        pairs: &[PairRef<'_>],
        targets: Tensor,
        mask: Tensor,
        adam: &mut Adam,
        rng: &mut dyn RngCore,
    ) -> Result<f64, ModelError> {
        let (graph, loss, norms) = self.loss_graph(pairs, targets, mask, rng)?;
        let value = graph.output(loss, &self.params)?.item();
        let grads = graph.backward(loss, &self.params)?;
        for (stats, node) in self.running.iter_mut().zip(&norms) {
            let (mean, var) = graph
                .batch_stats(*node)
                .expect("train-mode batchnorm records statistics");
            for (r, b) in stats.mean.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in stats.var.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        adam.step(&mut self.params, &grads)?;
        Ok(value)
    }

    pub(crate) fn restore(
        config: ModelConfig,
        target_proteins: Vec<String>,
        params: Vec<(String, Tensor)>,
        running: Vec<RunningStats>,
    ) -> Result<Self, String> {
        let mut model = PadmeModel::new(config, target_proteins).map_err(|e| e.to_string())?;
        if params.len() != model.params.len() {
            return Err(format!(
                "checkpoint has {} parameters, config implies {}",
                params.len(),
                model.params.len()
            ));
        }
        for (id, (name, value)) in model.params.ids().collect::<Vec<_>>().into_iter().zip(params) {
            if model.params.name(id) != name || model.params.get(id).shape() != value.shape() {
                return Err(format!(
                    "parameter '{name}' {:?} does not match '{}' {:?}",
                    value.shape(),
                    model.params.name(id),
                    model.params.get(id).shape()
                ));
            }
            *model.params.get_mut(id) = value;
        }
        if running.len() != model.running.len()
            || running
                .iter()
                .zip(&model.running)
                .any(|(a, b)| a.mean.len() != b.mean.len())
        {
            return Err("batchnorm statistics do not match the config".into());
        }
        model.running = running;
        Ok(model)
    }
}
