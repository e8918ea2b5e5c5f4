//! Compound featurization: circular (ECFP-style) fingerprints, Tanimoto
//! similarity, and per-atom feature matrices for graph convolution.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smiles::{Element, MolGraph};

/// Seed for the 32-bit identifier hash. Changing it changes every fingerprint.
const ECFP_HASH_SEED: u32 = 0x0ECF_0002;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_N_BITS: usize = 2048;
pub const ALLOWED_N_BITS: [usize; 4] = [512, 1024, 2048, 4096];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompoundError {
    #[error("fingerprint length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("fingerprint length {0} not one of 512, 1024, 2048, 4096")]
    InvalidBitCount(usize),
    #[error("atom {atom} ({element}) has degree {degree}, above max_degree {max}")]
    DegreeTooHigh {
        atom: usize,
        element: String,
        degree: usize,
        max: usize,
    },
    #[error("invalid hex fingerprint: {0}")]
    InvalidHex(String),
}

/// MurmurHash3 (x86, 32-bit).
pub fn murmur3_32(data: &[u8], seed: u32) -> u32 {
    const C1: u32 = 0xcc9e_2d51;
    const C2: u32 = 0x1b87_3593;
    let mut h = seed;
    let mut chunks = data.chunks_exact(4);
    for chunk in &mut chunks {
        let mut k = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
        h = h.rotate_left(13).wrapping_mul(5).wrapping_add(0xe654_6b64);
    }
    let tail = chunks.remainder();
    if !tail.is_empty() {
        let mut k = 0u32;
        for (i, &b) in tail.iter().enumerate() {
            k |= (b as u32) << (8 * i);
        }
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
    }
    h ^= data.len() as u32;
    h ^= h >> 16;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^= h >> 16;
    h
}

/// Fixed-length bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    n_bits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn empty(n_bits: usize, radius: usize) -> Self {
        Fingerprint {
            words: vec![0; n_bits.div_ceil(64)],
            n_bits,
            radius,
        }
    }

    pub fn from_bits(n_bits: usize, radius: usize, bits: impl IntoIterator<Item = usize>) -> Self {
        let mut fp = Fingerprint::empty(n_bits, radius);
        for b in bits {
            fp.set(b % n_bits);
        }
        fp
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn is_set(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_bits).filter(|&b| self.is_set(b))
    }

    /// Dense 0/1 vector, one entry per bit.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.n_bits)
            .map(|b| if self.is_set(b) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Lowercase hex, two characters per byte; byte `j` holds bits
    /// `8j..8j+8` with bit `8j` as its least significant bit.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.n_bits / 4);
        for byte in 0..self.n_bits.div_ceil(8) {
            let b = (self.words[byte / 8] >> ((byte % 8) * 8)) as u8;
            write!(s, "{b:02x}").expect("write to string");
        }
        s
    }

    pub fn from_hex(hex: &str, radius: usize) -> Result<Self, CompoundError> {
        if !hex.len().is_multiple_of(2) {
            return Err(CompoundError::InvalidHex("odd length".into()));
        }
        let n_bits = hex.len() * 4;
        let mut fp = Fingerprint::empty(n_bits, radius);
        for (byte, pair) in hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(pair).map_err(|e| CompoundError::InvalidHex(e.to_string()))?;
            let b = u8::from_str_radix(s, 16).map_err(|e| CompoundError::InvalidHex(e.to_string()))?;
            fp.words[byte / 8] |= (b as u64) << ((byte % 8) * 8);
        }
        Ok(fp)
    }
}

/// Identifiers surviving duplicate removal, in discovery order (radius
/// ascending, identifier ascending within a radius).
pub fn ecfp_identifiers(g: &MolGraph, radius: usize) -> Vec<u32> {
    let n = g.atom_count();
    let mut ids: Vec<u32> = g
        .atoms()
        .iter()
        .map(|a| {
            let bytes = [
                a.element.atomic_number(),
                a.degree.min(255) as u8,
                a.total_h(),
                a.formal_charge as u8,
                u8::from(a.aromatic),
                u8::from(a.ring_member),
            ];
            murmur3_32(&bytes, ECFP_HASH_SEED)
        })
        .collect();

    let words = n.div_ceil(64);
    let mut envs: Vec<Vec<u64>> = (0..n)
        .map(|v| {
            let mut e = vec![0u64; words];
            e[v / 64] |= 1 << (v % 64);
            e
        })
        .collect();

    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut out = Vec::new();
    let mut keep = |ids: &[u32], envs: &[Vec<u64>], out: &mut Vec<u32>| {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&v| ids[v]);
        for v in order {
            if seen.insert(envs[v].clone()) {
                out.push(ids[v]);
            }
        }
    };
    keep(&ids, &envs, &mut out);

    for r in 1..=radius {
        let mut next_ids = Vec::with_capacity(n);
        let mut next_envs = Vec::with_capacity(n);
        for v in 0..n {
            let mut nbrs: Vec<(u8, u32)> = g.neighbor_bonds(v).map(|(u, order)| (order.code(), ids[u])).collect();
            nbrs.sort_unstable();
            let mut bytes = Vec::with_capacity(8 + nbrs.len() * 5);
            bytes.extend_from_slice(&(r as u32).to_le_bytes());
            bytes.extend_from_slice(&ids[v].to_le_bytes());
            for (code, id) in &nbrs {
                bytes.push(*code);
                bytes.extend_from_slice(&id.to_le_bytes());
            }
            next_ids.push(murmur3_32(&bytes, ECFP_HASH_SEED));

            let mut env = envs[v].clone();
            for u in g.neighbors(v) {
                for (w, x) in env.iter_mut().zip(&envs[u]) {
                    *w |= x;
                }
            }
            next_envs.push(env);
        }
        ids = next_ids;
        envs = next_envs;
        keep(&ids, &envs, &mut out);
    }
    out
}

/// Circular fingerprint folded to `n_bits`.
pub fn ecfp(g: &MolGraph, radius: usize, n_bits: usize) -> Result<Fingerprint, CompoundError> {
    if !ALLOWED_N_BITS.contains(&n_bits) {
        return Err(CompoundError::InvalidBitCount(n_bits));
    }
    let ids = ecfp_identifiers(g, radius);
    Ok(Fingerprint::from_bits(
        n_bits,
        radius,
        ids.into_iter().map(|id| id as usize),
    ))
}

/// |a ∧ b| / |a ∨ b|, with two empty fingerprints defined as identical.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, CompoundError> {
    if a.n_bits != b.n_bits {
        return Err(CompoundError::LengthMismatch(a.n_bits, b.n_bits));
    }
    let (mut both, mut either) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        both += (x & y).count_ones();
        either += (x | y).count_ones();
    }
    Ok(if either == 0 { 1.0 } else { both as f64 / either as f64 })
}

/// Layout of the per-atom feature rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomFeatureConfig {
    pub vocabulary: Vec<String>,
    pub max_degree: usize,
}

/// Maximum hydrogen count with its own one-hot slot; higher counts share it.
const MAX_H_SLOT: usize = 4;

impl Default for AtomFeatureConfig {
    fn default() -> Self {
        let vocabulary = [
            "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg", "Na", "Ca", "Fe", "As", "Al", "I", "B", "K", "Se",
            "Zn",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        AtomFeatureConfig {
            vocabulary,
            max_degree: 6,
        }
    }
}

impl AtomFeatureConfig {
    /// element one-hot (+other) | degree one-hot | H one-hot | charge | aromatic | ring
    pub fn width(&self) -> usize {
        self.vocabulary.len() + 1 + (self.max_degree + 1) + (MAX_H_SLOT + 1) + 3
    }

    /// Text stamp recorded in checkpoints to detect featurization drift.
    pub fn signature(&self) -> String {
        format!(
            "atoms:v1:{}:deg{}:h{}",
            self.vocabulary.join(","),
            self.max_degree,
            MAX_H_SLOT
        )
    }
}

/// One feature row per atom plus atom indices grouped by degree.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomFeatureMatrix {
    pub rows: Vec<f64>,
    pub width: usize,
    pub degree_slices: Vec<Vec<usize>>,
}

impl AtomFeatureMatrix {
    pub fn n_atoms(&self) -> usize {
        self.rows.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn row(&self, atom: usize) -> &[f64] {
        &self.rows[atom * self.width..(atom + 1) * self.width]
    }
}

pub fn atom_features(g: &MolGraph, cfg: &AtomFeatureConfig) -> Result<AtomFeatureMatrix, CompoundError> {
    let width = cfg.width();
    let vocab: Vec<Option<Element>> = cfg.vocabulary.iter().map(|s| Element::from_symbol(s)).collect();
    let mut rows = vec![0.0; g.atom_count() * width];
    let mut degree_slices = vec![Vec::new(); cfg.max_degree + 1];
    for (i, atom) in g.atoms().iter().enumerate() {
        if atom.degree > cfg.max_degree {
            return Err(CompoundError::DegreeTooHigh {
                atom: i,
                element: atom.element.symbol().to_string(),
                degree: atom.degree,
                max: cfg.max_degree,
            });
        }
        degree_slices[atom.degree].push(i);
        let row = &mut rows[i * width..(i + 1) * width];
        let elem_slot = vocab
            .iter()
            .position(|e| *e == Some(atom.element))
            .unwrap_or(cfg.vocabulary.len());
        row[elem_slot] = 1.0;
        let mut off = cfg.vocabulary.len() + 1;
        row[off + atom.degree] = 1.0;
        off += cfg.max_degree + 1;
        row[off + (atom.total_h() as usize).min(MAX_H_SLOT)] = 1.0;
        off += MAX_H_SLOT + 1;
        row[off] = atom.formal_charge as f64;
        row[off + 1] = if atom.aromatic { 1.0 } else { 0.0 };
        row[off + 2] = if atom.ring_member { 1.0 } else { 0.0 };
    }
    Ok(AtomFeatureMatrix {
        rows,
        width,
        degree_slices,
    })
}
