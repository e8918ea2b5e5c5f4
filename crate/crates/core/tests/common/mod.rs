#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use padme::graphconv::{
    graph_conv, graph_gather, graph_pool, mean_readout_weights, GraphConvParams, MolBatch, Readout,
};
use padme::model::{ModelConfig, PadmeModel, PairRef, Variant};
use padme::protein::psc;
use padme::tensor::{Graph, Mode, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients that are zero on both sides compare by
/// absolute error.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct CheckStats {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

impl CheckStats {
    fn record(&mut self, what: String, a: f64, n: f64) {
        let e = rel_err(a, n);
        self.checked += 1;
        if e >= self.max_rel {
            self.max_rel = e;
            self.worst = format!("{what}: analytic {a:.6e} numeric {n:.6e}");
        }
    }

    pub fn merge(&mut self, other: &CheckStats) {
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

type Build = dyn Fn(&mut Graph) -> NodeId;

/// One differentiable computation. Every differentiated operand is a
/// parameter; bound inputs are constants.
pub struct OpCase {
    pub name: String,
    pub mode: Mode,
    pub params: ParamStore,
    pub inputs: HashMap<String, Tensor>,
    pub build: Box<Build>,
    pub seed: u64,
}

const PROJ: &str = "__projection";

impl OpCase {
    /// Scalar `Σ out ⊙ R` for a fixed random `R`.
    fn run(&self, params: &ParamStore, proj: &Tensor) -> (Graph, NodeId) {
        let mut g = Graph::new(self.mode);
        let out = (self.build)(&mut g);
        let r = g.input(PROJ);
        let m = g.mul(out, r);
        let loss = g.sum(m);
        let mut inputs = self.inputs.clone();
        inputs.insert(PROJ.into(), proj.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        g.forward(params, inputs, &mut rng).unwrap();
        (g, loss)
    }

    fn projection(&self) -> Tensor {
        let mut g = Graph::new(self.mode);
        let out = (self.build)(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        g.forward(&self.params, self.inputs.clone(), &mut rng).unwrap();
        let shape = g.output(out, &self.params).unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        let mut prng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xABCD);
        Tensor::new(shape, (0..n).map(|_| prng.gen_range(0.5..1.5)).collect()).unwrap()
    }

    pub fn check(&self) -> CheckStats {
        let proj = self.projection();
        let (g, loss) = self.run(&self.params, &proj);
        let grads = g.backward(loss, &self.params).unwrap();
        let value = |params: &ParamStore| {
            let (g, loss) = self.run(params, &proj);
            g.output(loss, params).unwrap().item()
        };
        let mut stats = CheckStats::default();
        let mut params = self.params.clone();
        for id in self.params.ids() {
            let zeros = Tensor::zeros(self.params.get(id).shape());
            let analytic = grads.param(id).unwrap_or(&zeros).clone();
            for j in 0..self.params.get(id).len() {
                let orig = params.get(id).data()[j];
                params.get_mut(id).data_mut()[j] = orig + H;
                let up = value(&params);
                params.get_mut(id).data_mut()[j] = orig - H;
                let down = value(&params);
                params.get_mut(id).data_mut()[j] = orig;
                let name = format!("{} {}[{j}]", self.name, self.params.name(id));
                stats.record(name, analytic.data()[j], (up - down) / (2.0 * H));
            }
        }
        stats
    }
}

fn case(name: &str, seed: u64, params: ParamStore, inputs: Vec<(&str, Tensor)>, build: Box<Build>) -> OpCase {
    OpCase {
        name: format!("{name}#{seed}"),
        mode: Mode::Train,
        params,
        inputs: inputs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        build,
        seed,
    }
}

/// Random undirected graph over `n` nodes as adjacency lists, degree ≤ 4.
fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for i in 1..n {
        let j = rng.gen_range(0..i);
        if adj[j].len() < 4 {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for _ in 0..n / 3 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !adj[a].contains(&b) && adj[a].len() < 4 && adj[b].len() < 4 {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    adj
}

/// Every primitive op on seeded random shapes.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, k, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let mut out = Vec::new();

    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, r, k));
    let w = p.add("w", random_matrix(&mut rng, k, c));
    out.push(case(
        "matmul",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let (x, w) = (g.param(x), g.param(w));
            g.matmul(x, w)
        }),
    ));

    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, r, c));
    let b = p.add("b", Tensor::vector((0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    out.push(case(
        "add_bias",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let (x, b) = (g.param(x), g.param(b));
            g.add_bias(x, b)
        }),
    ));

    for (name, which) in [("add", 0), ("mul", 1), ("concat", 2)] {
        let mut p = ParamStore::new();
        let a = p.add("a", random_matrix(&mut rng, r, c));
        let b = p.add("b", random_matrix(&mut rng, r, if which == 2 { k } else { c }));
        out.push(case(
            name,
            seed,
            p,
            vec![],
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                match which {
                    0 => g.add(a, b),
                    1 => g.mul(a, b),
                    _ => g.concat(a, b),
                }
            }),
        ));
    }

    // one operand constant: gradient must reach the parameter side only
    let mut p = ParamStore::new();
    let a = p.add("a", random_matrix(&mut rng, r, c));
    out.push(case(
        "mul_by_input",
        seed,
        p,
        vec![("b", random_matrix(&mut rng, r, c))],
        Box::new(move |g| {
            let a = g.param(a);
            let b = g.input("b");
            g.mul(b, a)
        }),
    ));

    let factor = rng.gen_range(-2.0..2.0);
    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, r, c));
    out.push(case(
        "scale",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let x = g.param(x);
            g.scale(x, factor)
        }),
    ));

    let mut p = ParamStore::new();
    let x = p.add("x", away_from_zero(&mut rng, r, c));
    out.push(case(
        "relu",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let x = g.param(x);
            g.relu(x)
        }),
    ));

    let rate = rng.gen_range(0.1..0.6);
    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, r + 1, c));
    out.push(case(
        "dropout",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let x = g.param(x);
            g.dropout(x, rate)
        }),
    ));

    let rows = r + 2;
    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, rows, c));
    let gamma = p.add(
        "gamma",
        Tensor::vector((0..c).map(|_| rng.gen_range(0.5..1.5)).collect()),
    );
    let beta = p.add(
        "beta",
        Tensor::vector((0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()),
    );
    out.push(case(
        "batch_norm",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let (x, gn, bn) = (g.param(x), g.param(gamma), g.param(beta));
            g.batch_norm(x, gn, bn, vec![0.0; c], vec![1.0; c], 1e-5)
        }),
    ));

    let weights = Tensor::matrix(r, c, (0..r * c).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect()).unwrap();
    let mut p = ParamStore::new();
    let pred = p.add("pred", random_matrix(&mut rng, r, c));
    out.push(case(
        "weighted_mse",
        seed,
        p,
        vec![("target", random_matrix(&mut rng, r, c)), ("w", weights)],
        Box::new(move |g| {
            let p = g.param(pred);
            let t = g.input("target");
            let w = g.input("w");
            g.weighted_mse(p, t, w)
        }),
    ));

    let n = rng.gen_range(2..8);
    let adj = Arc::new(random_adjacency(&mut rng, n));
    for (name, max) in [("neighbor_sum", false), ("neighbor_max", true)] {
        let adj = adj.clone();
        let mut p = ParamStore::new();
        let x = p.add("x", random_matrix(&mut rng, n, c));
        out.push(case(
            name,
            seed,
            p,
            vec![],
            Box::new(move |g| {
                let x = g.param(x);
                if max {
                    g.neighbor_max(x, adj.clone())
                } else {
                    g.neighbor_sum(x, adj.clone())
                }
            }),
        ));
    }

    let n_seg = rng.gen_range(1..4);
    let segments: Arc<Vec<usize>> = Arc::new((0..n).map(|i| i * n_seg / n).collect());
    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, n, c));
    out.push(case(
        "segment_sum",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let x = g.param(x);
            g.segment_sum(x, segments.clone(), n_seg)
        }),
    ));

    let picks: Arc<Vec<usize>> = Arc::new((0..n + 2).map(|_| rng.gen_range(0..n)).collect());
    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, n, c));
    out.push(case(
        "gather_rows",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let x = g.param(x);
            g.gather_rows(x, picks.clone())
        }),
    ));

    let mut targets: Vec<usize> = (0..n + 3).collect();
    for i in (1..targets.len()).rev() {
        targets.swap(i, rng.gen_range(0..=i));
    }
    targets.truncate(n);
    let targets = Arc::new(targets);
    let mut p = ParamStore::new();
    let x = p.add("x", random_matrix(&mut rng, n, c));
    out.push(case(
        "scatter_rows",
        seed,
        p,
        vec![],
        Box::new(move |g| {
            let x = g.param(x);
            g.scatter_rows(x, targets.clone(), n + 3)
        }),
    ));

    // the convolution stack on its own: conv, pool, gather
    let width = rng.gen_range(2..5);
    let n_mol = rng.gen_range(1..4);
    let mols: Vec<padme::graphconv::GraphFeatures> = (0..n_mol)
        .map(|_| {
            let atoms = rng.gen_range(1..6);
            let adjacency = random_adjacency(&mut rng, atoms);
            let mut degree_slices = vec![Vec::new(); 5];
            for (i, nb) in adjacency.iter().enumerate() {
                degree_slices[nb.len()].push(i);
            }
            padme::graphconv::GraphFeatures {
                atoms: padme::compound::AtomFeatureMatrix {
                    rows: away_from_zero(&mut rng, atoms, width).into_data(),
                    width,
                    degree_slices,
                },
                adjacency,
            }
        })
        .collect();
    let refs: Vec<&padme::graphconv::GraphFeatures> = mols.iter().collect();
    let batch = Arc::new(MolBatch::new(&refs, 4).unwrap());
    let mut p = ParamStore::new();
    let atoms = p.add("atoms", batch.features.clone());
    let conv = GraphConvParams::init(&mut p, "conv", width, 3, 4, &mut rng);
    for id in p.ids().collect::<Vec<_>>() {
        if p.name(id).contains("bias") {
            for v in p.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let readout = if seed.is_multiple_of(2) {
        Readout::Sum
    } else {
        Readout::Mean
    };
    let mut inputs = vec![];
    if readout == Readout::Mean {
        inputs.push((padme::graphconv::MEAN_READOUT_INPUT, mean_readout_weights(&batch, 3)));
    }
    out.push(case(
        "graph_conv_pool_gather",
        seed,
        p,
        inputs,
        Box::new(move |g| {
            let x = g.param(atoms);
            let h = graph_conv(g, x, &batch, &conv);
            let h = graph_pool(g, h, &batch);
            graph_gather(g, h, &batch, readout)
        }),
    ));
    out
}

const SMILES: [&str; 8] = [
    "CCO",
    "c1ccccc1O",
    "CC(=O)Nc1ccc(O)cc1",
    "CCN(CC)CC",
    "OCC(O)CO",
    "Clc1ccccc1",
    "CC#N",
    "C1CCNCC1",
];
const SEQS: [&str; 3] = ["MKTAYIAKQRQISFVKSHFSRQ", "MSWWDERKKLLPAGY", "MAAAGGHHKRRDDEYW"];

/// Full loss graph of a small model: featurization, (convolution stack,)
/// dense layers with batchnorm and dropout, masked MSE.
pub fn model_case(variant: Variant, seed: u64) -> (PadmeModel, Vec<usize>, Vec<usize>, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        variant,
        hidden_layers: vec![6, 4],
        dropout_rates: vec![0.25],
        use_batchnorm: true,
        n_tasks: 2,
        ecfp_bits: 512,
        graph_conv_widths: vec![5, 4],
        graph_dense_width: 6,
        readout: if seed.is_multiple_of(2) {
            Readout::Sum
        } else {
            Readout::Mean
        },
        seed,
        ..ModelConfig::default()
    };
    let mut model = PadmeModel::new(cfg, vec!["P0".into(), "P1".into(), "P2".into()]).unwrap();
    // nonzero biases so no pre-activation sits exactly at a kink
    for id in model.params().ids().collect::<Vec<_>>() {
        if model.params().name(id).contains("bias") || model.params().name(id).contains("beta") {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let n = rng.gen_range(3..6);
    let compounds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..SMILES.len())).collect();
    let proteins: Vec<usize> = (0..n).map(|_| rng.gen_range(0..SEQS.len())).collect();
    let targets = random_matrix(&mut rng, n, 2);
    let mask = Tensor::matrix(n, 2, (0..2 * n).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 }).collect()).unwrap();
    (model, compounds, proteins, targets, mask)
}

/// Checks every parameter of the model loss, sampling up to `per_tensor`
/// entries of each parameter tensor.
pub fn check_model(variant: Variant, seed: u64, per_tensor: usize) -> CheckStats {
    let (mut model, compounds, proteins, targets, mask) = model_case(variant, seed);
    let feats: Vec<_> = SMILES.iter().map(|s| model.config().featurize(s).unwrap()).collect();
    let descs: Vec<_> = SEQS.iter().map(|s| psc(s, false).unwrap()).collect();
    let ids = ["P0", "P1", "P2"];
    let loss_of = |model: &PadmeModel, grads: bool| {
        let pairs: Vec<PairRef> = compounds
            .iter()
            .zip(&proteins)
            .map(|(&c, &p)| PairRef {
                compound: &feats[c],
                protein_id: ids[p],
                descriptor: Some(&descs[p]),
            })
            .collect();
        let (t, m) = model
            .targets(
                &pairs,
                &(0..pairs.len())
                    .map(|i| &targets.data()[2 * i..2 * i + 2])
                    .collect::<Vec<_>>(),
                &(0..pairs.len())
                    .map(|i| &mask.data()[2 * i..2 * i + 2])
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0D0);
        let (g, loss, _) = model.loss_graph(&pairs, t, m, &mut rng).unwrap();
        let value = g.output(loss, model.params()).unwrap().item();
        let grads = grads.then(|| g.backward(loss, model.params()).unwrap());
        (value, grads)
    };
    let (_, grads) = loss_of(&model, true);
    let grads = grads.unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let mut stats = CheckStats::default();
    for id in model.params().ids().collect::<Vec<_>>() {
        let len = model.params().get(id).len();
        let zeros = Tensor::zeros(model.params().get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        let entries: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| pick.gen_range(0..len)).collect()
        };
        for j in entries {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + H;
            let up = loss_of(&model, false).0;
            model.params_mut().get_mut(id).data_mut()[j] = orig - H;
            let down = loss_of(&model, false).0;
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            let name = format!("{variant}#{seed} {}[{j}]", model.params().name(id));
            stats.record(name, analytic.data()[j], (up - down) / (2.0 * H));
        }
    }
    stats
}

/// The whole suite: every op over `op_seeds` seeds and every model variant
/// over `model_seeds` seeds. Returns (cases, combined stats, failures).
pub fn gradient_suite(op_seeds: u64, model_seeds: u64) -> (usize, CheckStats, Vec<String>) {
    let mut total = CheckStats::default();
    let mut failures = Vec::new();
    let mut cases = 0;
    for seed in 0..op_seeds {
        for c in op_cases(seed) {
            let s = c.check();
            cases += 1;
            if s.max_rel >= TOLERANCE {
                failures.push(format!("{} rel err {:.3e} ({})", c.name, s.max_rel, s.worst));
            }
            total.merge(&s);
        }
    }
    for seed in 0..model_seeds {
        for v in Variant::ALL {
            let s = check_model(v, seed, 12);
            cases += 1;
            if s.max_rel >= TOLERANCE {
                failures.push(format!("{v}#{seed} rel err {:.3e} ({})", s.max_rel, s.worst));
            }
            total.merge(&s);
        }
    }
    (cases, total, failures)
}
