//! Seeded synthetic interaction data with a planted structure–activity
//! signal, used for fixtures, tests and timing probes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionRecord, ProteinEntry, ProteinTable};
use crate::protein::AMINO_ACIDS;
use crate::smiles::parse_smiles;

/// Well-known small-molecule drugs written in the supported SMILES subset.
pub const DRUGS: &[&str] = &[
    "CC(=O)Oc1ccccc1C(=O)O",
    "CC(=O)Nc1ccc(O)cc1",
    "CC(C)Cc1ccc(C(C)C(=O)O)cc1",
    "CN1CCCC1c1cccnc1",
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "OC(=O)c1ccccc1O",
    "CC(C)NCC(O)COc1cccc2ccccc12",
    "COc1ccc2[nH]cc(CCNC(C)=O)c2c1",
    "NCCc1ccc(O)c(O)c1",
    "CN(C)CCCN1c2ccccc2CCc2ccccc21",
    "O=C(O)Cc1ccccc1Nc1c(Cl)cccc1Cl",
    "CC(=O)OCC",
    "c1ccc2ccccc2c1",
    "OCC(O)CO",
    "CCN(CC)CC",
    "Clc1ccc(cc1)C(c1ccccc1)N1CCNCC1",
    "CCOC(=O)c1ccccc1",
    "NC(=O)c1cccnc1",
    "CC1=CC(=O)CCC1",
    "O=C1NC(=O)C(N1)(c1ccccc1)c1ccccc1",
    "CS(=O)(=O)c1ccc(cc1)C(=O)O",
    "Nc1ccc(cc1)S(N)(=O)=O",
    "CC(C)(C)NCC(O)c1ccc(O)c(CO)c1",
    "COc1ccc(CCN)cc1OC",
    "FC(F)(F)c1ccc(Oc2ccccc2)cc1",
    "CCCCCCCC(=O)O",
    "Brc1ccc(cc1)C#N",
    "O=[N+]([O-])c1ccccc1",
    "C1CCNCC1",
    "Ic1ccccc1",
];

const FRAGMENTS: &[&str] = &[
    "C",
    "C",
    "CC",
    "N",
    "O",
    "C(=O)",
    "c1ccccc1",
    "C(F)",
    "C(Cl)",
    "S",
    "C(C)",
    "c1ccncc1",
    "C1CCCC1",
    "C(=O)N",
    "c1ccc(O)cc1",
    "C(Br)",
    "C#C",
    "N(C)",
    "C1CCNCC1",
    "c1ccsc1",
];

/// Random but valid SMILES strings assembled from fragments, distinct as
/// strings.
pub fn random_smiles(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(2..=8);
        let s: String = (0..len)
            .map(|_| *FRAGMENTS.choose(&mut rng).expect("non-empty"))
            .collect();
        if parse_smiles(&s).is_ok() && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Random protein sequences, lengths in `[60, 160]`.
pub fn random_proteins(n: usize, seed: u64) -> Vec<ProteinEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(60..=160);
            let sequence = (0..len)
                .map(|_| AMINO_ACIDS[rng.gen_range(0..20)] as char)
                .collect::<String>();
            ProteinEntry {
                id: format!("T{i:03}"),
                phosphorylated: i % 5 == 0,
                sequence: format!("M{sequence}"),
            }
        })
        .collect()
}

/// Planted activity on the transformed scale: a compound term from simple
/// composition counts, a protein term, and an interaction term.
fn planted_value(smiles: &str, protein: &ProteinEntry, rng: &mut ChaCha8Rng, noise: f64) -> f64 {
    let count = |c: char| smiles.chars().filter(|&x| x == c).count() as f64;
    let compound = 0.15 * count('c') + 0.3 * count('N') + 0.2 * count('O') - 0.1 * count('C');
    let seq = protein.sequence.as_bytes();
    let frac = |a: u8| seq.iter().filter(|&&x| x == a).count() as f64 / seq.len() as f64;
    let target = 8.0 * (frac(b'K') + frac(b'R')) - 6.0 * frac(b'D');
    let cross = 10.0 * frac(b'W') * count('c').min(6.0);
    let noise = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
    (1.5 + compound + target + cross + noise).clamp(-2.0, 9.0)
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub compounds: Vec<String>,
    pub proteins: Vec<ProteinEntry>,
    pub records: Vec<InteractionRecord>,
}

impl SyntheticData {
    /// `n_pairs` distinct (compound, protein) pairs with one task. Every
    /// compound and protein is observed at least twice when `n_pairs` is
    /// at least twice the entity counts.
    pub fn generate(
        compounds: Vec<String>,
        proteins: Vec<ProteinEntry>,
        n_pairs: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        assert!(n_pairs <= compounds.len() * proteins.len(), "not enough distinct pairs");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nc, np) = (compounds.len(), proteins.len());
        let mut chosen = BTreeSet::new();
        let mut order = Vec::new();
        let mut add = |c: usize, p: usize, order: &mut Vec<(usize, usize)>| {
            if chosen.insert((c, p)) {
                order.push((c, p));
            }
        };
        // two guaranteed observations per entity
        for i in 0..nc.max(np) * 2 {
            if order.len() >= n_pairs {
                break;
            }
            add(i % nc, (i / 2 + i % 2 * 7) % np, &mut order);
        }
        while order.len() < n_pairs {
            let (c, p) = (rng.gen_range(0..nc), rng.gen_range(0..np));
            add(c, p, &mut order);
        }
        let records = order
            .into_iter()
            .map(|(c, p)| {
                let value = planted_value(&compounds[c], &proteins[p], &mut rng, noise);
                InteractionRecord {
                    smiles: compounds[c].clone(),
                    protein_id: proteins[p].id.clone(),
                    task: 0,
                    raw: crate::dataset::inverse_transform(value),
                    value,
                }
            })
            .collect();
        SyntheticData {
            compounds,
            proteins,
            records,
        }
    }

    /// Random compounds and proteins sized for `n_pairs`.
    pub fn sized(n_pairs: usize, seed: u64) -> Self {
        let nc = (n_pairs / 10).clamp(8, 400);
        let np = (n_pairs / nc + 2).clamp(4, 60);
        let np = np.max(n_pairs.div_ceil(nc) + 1);
        SyntheticData::generate(
            random_smiles(nc, seed),
            random_proteins(np, seed ^ 1),
            n_pairs,
            0.1,
            seed,
        )
    }

    /// Like [`SyntheticData::sized`] but a quarter of the compounds are
    /// expanded into homologous series (alkyl chains of length 6 to 8), so
    /// similarity clustering forms multi-member clusters.
    pub fn clustered(n_pairs: usize, seed: u64) -> Self {
        let nc = (n_pairs / 10).clamp(8, 400);
        let base = random_smiles(nc, seed);
        let mut seen = BTreeSet::new();
        let mut compounds = Vec::new();
        for (i, b) in base.iter().enumerate() {
            let members = if i < nc / 4 {
                (6..9).map(|n| format!("{b}{}", "C".repeat(n))).collect()
            } else {
                vec![b.clone()]
            };
            for m in members {
                if seen.insert(m.clone()) {
                    compounds.push(m);
                }
            }
        }
        let nc = compounds.len();
        let np = (n_pairs / nc + 2).clamp(4, 60).max(n_pairs.div_ceil(nc) + 1);
        SyntheticData::generate(compounds, random_proteins(np, seed ^ 1), n_pairs, 0.1, seed)
    }

    pub fn protein_table(&self) -> ProteinTable {
        ProteinTable::new(self.proteins.clone()).expect("generated sequences are valid")
    }

    /// Interaction CSV with raw values rounded to 6 significant digits.
    pub fn interactions_csv(&self) -> String {
        let mut s = String::from("smiles,protein_id,task_id,value\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{:.6e}\n", r.smiles, r.protein_id, r.task, r.raw));
        }
        s
    }

    pub fn sequences_tsv(&self) -> String {
        let mut s = String::from("id\tphosphorylated\tsequence\n");
        for p in &self.proteins {
            s.push_str(&format!("{}\t{}\t{}\n", p.id, u8::from(p.phosphorylated), p.sequence));
        }
        s
    }
}
