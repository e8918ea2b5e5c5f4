//! Protein sequence composition descriptor: amino acid, dipeptide and
//! tripeptide frequencies followed by a phosphorylation flag.
//!
//! Layout (version [`PSC_LAYOUT_VERSION`]): residues are indexed in the
//! alphabetical order of [`AMINO_ACIDS`]; the dipeptide `xy` sits at
//! `20 + 20*i(x) + i(y)` and the tripeptide `xyz` at
//! `420 + 400*i(x) + 20*i(y) + i(z)`; the flag is the last entry. All
//! frequencies are fractions in `[0, 1]` (multiply by 100 for percentages).

use thiserror::Error;

pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const AAC_LEN: usize = 20;
pub const DC_LEN: usize = 400;
pub const TC_LEN: usize = 8000;
pub const PSC_LEN: usize = AAC_LEN + DC_LEN + TC_LEN + 1;
pub const PSC_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProteinError {
    #[error("unknown residue '{residue}' at position {position}")]
    UnknownResidue { residue: char, position: usize },
    #[error("sequence length {0} is below the minimum of 3")]
    TooShort(usize),
}

fn residue_index(c: u8) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinDescriptor {
    values: Vec<f64>,
}

impl ProteinDescriptor {
    /// Wraps a raw vector (e.g. read from a descriptor file).
    pub fn from_values(values: Vec<f64>) -> Option<Self> {
        (values.len() == PSC_LEN).then_some(ProteinDescriptor { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn aac(&self) -> &[f64] {
        &self.values[..AAC_LEN]
    }

    pub fn dc(&self) -> &[f64] {
        &self.values[AAC_LEN..AAC_LEN + DC_LEN]
    }

    pub fn tc(&self) -> &[f64] {
        &self.values[AAC_LEN + DC_LEN..PSC_LEN - 1]
    }

    pub fn phosphorylated(&self) -> bool {
        self.values[PSC_LEN - 1] == 1.0
    }
}

/// Checks a sequence and returns residue indices. Lowercase letters are
/// accepted; anything outside the 20 canonical residues is an error.
pub fn encode_sequence(sequence: &str) -> Result<Vec<usize>, ProteinError> {
    sequence
        .chars()
        .enumerate()
        .map(|(position, residue)| {
            u8::try_from(residue.to_ascii_uppercase())
                .ok()
                .and_then(residue_index)
                .ok_or(ProteinError::UnknownResidue { residue, position })
        })
        .collect()
}

pub fn psc(sequence: &str, phosphorylated: bool) -> Result<ProteinDescriptor, ProteinError> {
    let idx = encode_sequence(sequence.trim())?;
    let len = idx.len();
    if len < 3 {
        return Err(ProteinError::TooShort(len));
    }
    let mut values = vec![0.0; PSC_LEN];

    let mut aac = [0u32; AAC_LEN];
    for &i in &idx {
        aac[i] += 1;
    }
    let mut dc = vec![0u32; DC_LEN];
    for w in idx.windows(2) {
        dc[w[0] * 20 + w[1]] += 1;
    }
    let mut tc = vec![0u32; TC_LEN];
    for w in idx.windows(3) {
        tc[w[0] * 400 + w[1] * 20 + w[2]] += 1;
    }

    let fill = |out: &mut [f64], counts: &[u32], total: usize| {
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    };
    fill(&mut values[..AAC_LEN], &aac, len);
    fill(&mut values[AAC_LEN..AAC_LEN + DC_LEN], &dc, len - 1);
    fill(&mut values[AAC_LEN + DC_LEN..PSC_LEN - 1], &tc, len - 2);
    values[PSC_LEN - 1] = if phosphorylated { 1.0 } else { 0.0 };
    Ok(ProteinDescriptor { values })
}
