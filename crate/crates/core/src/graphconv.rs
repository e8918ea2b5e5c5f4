//! Molecular graph convolution layers.
//!
//! A batch of molecules is merged into one disjoint graph. Convolution uses
//! a separate weight pair and bias per atom degree:
//!
//! ```text
//! h'[v] = relu(W_self(deg v) · h[v] + W_nbr(deg v) · Σ_{u ∈ N(v)} h[u] + b(deg v))
//! ```
//!
//! Pooling takes the elementwise max over each atom's closed neighborhood
//! and the gather readout sums (or averages) atom rows per molecule.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compound::AtomFeatureMatrix;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphConvError {
    #[error("molecule {molecule} has no atoms")]
    EmptyMolecule { molecule: usize },
    #[error("atom {atom} of molecule {molecule} has degree {degree}, above max_degree {max}")]
    DegreeOutOfRange {
        molecule: usize,
        atom: usize,
        degree: usize,
        max: usize,
    },
    #[error("feature width {got} does not match expected {expected}")]
    Width { got: usize, expected: usize },
    #[error("adjacency lists cover {adjacency} atoms but features have {rows}")]
    AdjacencyMismatch { adjacency: usize, rows: usize },
}

/// Per-molecule input to the convolution stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    pub atoms: AtomFeatureMatrix,
    pub adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    #[default]
    Sum,
    Mean,
}

/// Several molecules flattened into one graph.
#[derive(Debug, Clone)]
pub struct MolBatch {
    pub features: Tensor,
    pub adjacency: Arc<Vec<Vec<usize>>>,
    /// Atom rows grouped by degree, index `d` for degree `d`.
    pub degree_rows: Vec<Arc<Vec<usize>>>,
    /// Molecule index of every atom row.
    pub segments: Arc<Vec<usize>>,
    pub atom_counts: Vec<usize>,
}

impl MolBatch {
    pub fn new(molecules: &[&GraphFeatures], max_degree: usize) -> Result<Self, GraphConvError> {
        let width = molecules.first().map_or(0, |m| m.atoms.width);
        let mut data = Vec::new();
        let mut adjacency = Vec::new();
        let mut degree_rows = vec![Vec::new(); max_degree + 1];
        let mut segments = Vec::new();
        let mut atom_counts = Vec::with_capacity(molecules.len());
        for (mi, mol) in molecules.iter().enumerate() {
            let n = mol.atoms.n_atoms();
            if n == 0 {
                return Err(GraphConvError::EmptyMolecule { molecule: mi });
            }
            if mol.atoms.width != width {
                return Err(GraphConvError::Width {
                    got: mol.atoms.width,
                    expected: width,
                });
            }
            if mol.adjacency.len() != n || mol.adjacency.iter().flatten().any(|&u| u >= n) {
                return Err(GraphConvError::AdjacencyMismatch {
                    adjacency: mol.adjacency.len(),
                    rows: n,
                });
            }
            let offset = segments.len();
            for (a, nbrs) in mol.adjacency.iter().enumerate() {
                if nbrs.len() > max_degree {
                    return Err(GraphConvError::DegreeOutOfRange {
                        molecule: mi,
                        atom: a,
                        degree: nbrs.len(),
                        max: max_degree,
                    });
                }
                degree_rows[nbrs.len()].push(offset + a);
                adjacency.push(nbrs.iter().map(|&u| u + offset).collect());
                segments.push(mi);
            }
            data.extend_from_slice(&mol.atoms.rows);
            atom_counts.push(n);
        }
        let n_atoms = segments.len();
        Ok(MolBatch {
            features: Tensor::matrix(n_atoms, width, data).expect("rows match atom count"),
            adjacency: Arc::new(adjacency),
            degree_rows: degree_rows.into_iter().map(Arc::new).collect(),
            segments: Arc::new(segments),
            atom_counts,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.segments.len()
    }

    pub fn n_molecules(&self) -> usize {
        self.atom_counts.len()
    }
}

/// He-uniform initialization: U(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

/// Per-degree parameters of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConvParams {
    pub self_weights: Vec<ParamId>,
    pub neighbor_weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl GraphConvParams {
    pub fn init(
        params: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        max_degree: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut self_weights = Vec::new();
        let mut neighbor_weights = Vec::new();
        let mut biases = Vec::new();
        for d in 0..=max_degree {
            self_weights.push(params.add(format!("{name}.self.{d}"), he_uniform(rng, in_width, out_width)));
            neighbor_weights.push(params.add(format!("{name}.nbr.{d}"), he_uniform(rng, in_width, out_width)));
            biases.push(params.add(format!("{name}.bias.{d}"), Tensor::zeros(&[out_width])));
        }
        GraphConvParams {
            self_weights,
            neighbor_weights,
            biases,
            in_width,
            out_width,
        }
    }

    pub fn max_degree(&self) -> usize {
        self.self_weights.len() - 1
    }
}

/// Adds one convolution layer (including its ReLU) to the graph.
pub fn graph_conv(g: &mut Graph, h: NodeId, batch: &MolBatch, p: &GraphConvParams) -> NodeId {
    let n = batch.n_atoms();
    let nbr_sum = g.neighbor_sum(h, batch.adjacency.clone());
    let mut total: Option<NodeId> = None;
    for (d, rows) in batch.degree_rows.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let own = g.gather_rows(h, rows.clone());
        let ws = g.param(p.self_weights[d]);
        let mut z = g.matmul(own, ws);
        if d > 0 {
            let nb = g.gather_rows(nbr_sum, rows.clone());
            let wn = g.param(p.neighbor_weights[d]);
            let zn = g.matmul(nb, wn);
            z = g.add(z, zn);
        }
        let b = g.param(p.biases[d]);
        let z = g.add_bias(z, b);
        let placed = g.scatter_rows(z, rows.clone(), n);
        total = Some(match total {
            Some(t) => g.add(t, placed),
            None => placed,
        });
    }
    let total = total.expect("batch has at least one atom");
    g.relu(total)
}

pub fn graph_pool(g: &mut Graph, h: NodeId, batch: &MolBatch) -> NodeId {
    g.neighbor_max(h, batch.adjacency.clone())
}

/// Molecule vectors from atom rows. With `Readout::Mean`, `inv_counts` must
/// be bound to an `n_molecules × width` tensor of reciprocal atom counts
/// (see [`mean_readout_weights`]).
pub fn graph_gather(g: &mut Graph, h: NodeId, batch: &MolBatch, readout: Readout) -> NodeId {
    let summed = g.segment_sum(h, batch.segments.clone(), batch.n_molecules());
    match readout {
        Readout::Sum => summed,
        Readout::Mean => {
            let w = g.input(MEAN_READOUT_INPUT);
            g.mul(summed, w)
        }
    }
}

pub const MEAN_READOUT_INPUT: &str = "readout_inv_counts";

pub fn mean_readout_weights(batch: &MolBatch, width: usize) -> Tensor {
    let data = batch
        .atom_counts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(1.0 / c as f64, width))
        .collect();
    Tensor::matrix(batch.n_molecules(), width, data).expect("shape")
}

/// Dense layer with ReLU applied per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AtomDense {
    pub fn init(params: &mut ParamStore, name: &str, in_width: usize, out_width: usize, rng: &mut impl Rng) -> Self {
        AtomDense {
            weight: params.add(format!("{name}.weight"), he_uniform(rng, in_width, out_width)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[out_width])),
        }
    }

    pub fn apply(&self, g: &mut Graph, h: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let z = g.matmul(h, w);
        let z = g.add_bias(z, b);
        g.relu(z)
    }
}

/// The compound branch: conv → pool repeated per width, a per-atom dense
/// layer, then the readout.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStack {
    pub convs: Vec<GraphConvParams>,
    pub dense: AtomDense,
    pub readout: Readout,
    pub out_width: usize,
}

impl GraphStack {
    pub fn init(
        params: &mut ParamStore,
        in_width: usize,
        conv_widths: &[usize],
        dense_width: usize,
        max_degree: usize,
        readout: Readout,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut width = in_width;
        for (i, &w) in conv_widths.iter().enumerate() {
            convs.push(GraphConvParams::init(
                params,
                &format!("gconv{i}"),
                width,
                w,
                max_degree,
                rng,
            ));
            width = w;
        }
        let dense = AtomDense::init(params, "gdense", width, dense_width, rng);
        GraphStack {
            convs,
            dense,
            readout,
            out_width: dense_width,
        }
    }

    /// Returns the molecule-vector node; atom features are read from input
    /// `atom_input`.
    pub fn build(&self, g: &mut Graph, atom_input: NodeId, batch: &MolBatch) -> NodeId {
        let mut h = atom_input;
        for conv in &self.convs {
            h = graph_conv(g, h, batch, conv);
            h = graph_pool(g, h, batch);
        }
        h = self.dense.apply(g, h);
        graph_gather(g, h, batch, self.readout)
    }
}
