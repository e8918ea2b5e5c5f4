//! SMILES parsing into a molecular graph.
//!
//! Supported subset: organic-subset atoms (`B C N O P S F Cl Br I` and the
//! aromatic `b c n o p s`), bracket atoms with isotope, element, hydrogen
//! count and charge, bond symbols `- = # :`, branches and ring closures
//! (single digits and `%nn`). Stereo markers (`/ \ @`), the wildcard `*`,
//! atom classes and multi-fragment `.` input are rejected with a diagnostic.
//!
//! Aromaticity is never perceived: the aromatic flag comes only from the
//! notation, so `C1=CC=CC=C1` and `c1ccccc1` parse to different bond orders.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

const SYMBOLS: [&str; 92] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",
    "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce",
    "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir",
    "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",
];

/// A chemical element identified by atomic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub const B: Element = Element(5);
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);
    pub const F: Element = Element(9);
    pub const P: Element = Element(15);
    pub const S: Element = Element(16);
    pub const CL: Element = Element(17);
    pub const BR: Element = Element(35);
    pub const I: Element = Element(53);

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        SYMBOLS.iter().position(|s| *s == symbol).map(|i| Element(i as u8 + 1))
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        (1..=SYMBOLS.len() as u8).contains(&z).then_some(Element(z))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        SYMBOLS[self.0 as usize - 1]
    }

    /// Allowed valences for implicit-hydrogen assignment, lowest first.
    /// `None` for elements outside the organic subset.
    fn default_valences(self) -> Option<&'static [u8]> {
        Some(match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3, 5],
            Element::O => &[2],
            Element::P => &[3, 5],
            Element::S => &[2, 4, 6],
            Element::F | Element::CL | Element::BR | Element::I => &[1],
            _ => return None,
        })
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Small integer code used in hashing and feature files.
    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    /// Contribution to an atom's bond-order sum. Aromatic bonds count as 1;
    /// the aromatic atom itself gives up one unit of valence instead.
    fn valence_units(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    /// Hydrogens written inside a bracket atom.
    pub explicit_h: u8,
    /// Hydrogens implied by standard valence (organic subset only).
    pub implicit_h: u8,
    pub isotope: Option<u16>,
    pub aromatic: bool,
    pub ring_member: bool,
    pub degree: usize,
    pub bracket: bool,
}

impl Atom {
    pub fn total_h(&self) -> u8 {
        self.explicit_h + self.implicit_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub endpoints: (usize, usize),
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.endpoints.0 == atom {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }
}

/// Parsed molecule. `adjacency[v]` lists `(neighbor, bond index)` pairs in
/// the order the bonds were created.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    pub fn neighbors(&self, atom: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[atom].iter().map(|&(n, _)| n)
    }

    /// Neighbor atoms paired with the order of the connecting bond.
    pub fn neighbor_bonds(&self, atom: usize) -> impl Iterator<Item = (usize, BondOrder)> + '_ {
        self.adjacency[atom].iter().map(|&(n, b)| (n, self.bonds[b].order))
    }

    /// Neighbor index lists, one per atom.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        (0..self.atoms.len()).map(|v| self.neighbors(v).collect()).collect()
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.atoms.len()];
        let mut components = 0;
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                for n in self.neighbors(v) {
                    if !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        components
    }

    /// Builds a molecule with atoms reordered so that new atom `i` is old
    /// atom `order[i]`. Bonds keep their relative order.
    pub fn permuted(&self, order: &[usize]) -> MolGraph {
        assert_eq!(order.len(), self.atoms.len(), "permutation length");
        let mut new_index = vec![usize::MAX; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let atoms = order.iter().map(|&old| self.atoms[old].clone()).collect();
        let bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| Bond {
                endpoints: (new_index[b.endpoints.0], new_index[b.endpoints.1]),
                order: b.order,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); order.len()];
        for (i, b) in bonds.iter().enumerate() {
            adjacency[b.endpoints.0].push((b.endpoints.1, i));
            adjacency[b.endpoints.1].push((b.endpoints.0, i));
        }
        MolGraph {
            atoms,
            bonds,
            adjacency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmilesErrorKind {
    Empty,
    UnmatchedParenthesis,
    UnmatchedRingClosure,
    UnknownElement(String),
    MalformedBracketAtom(String),
    Unsupported(char),
    UnexpectedCharacter(char),
    /// A bond symbol with no atom following it.
    DanglingBond,
    /// Ring closure or branch that would bond an atom to itself or
    /// duplicate an existing bond.
    InvalidBond,
    ConflictingRingBond,
}

impl fmt::Display for SmilesErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmilesErrorKind::Empty => write!(f, "empty SMILES"),
            SmilesErrorKind::UnmatchedParenthesis => write!(f, "unmatched parenthesis"),
            SmilesErrorKind::UnmatchedRingClosure => write!(f, "unmatched ring closure"),
            SmilesErrorKind::UnknownElement(s) => write!(f, "unknown element symbol '{s}'"),
            SmilesErrorKind::MalformedBracketAtom(s) => write!(f, "malformed bracket atom: {s}"),
            SmilesErrorKind::Unsupported(c) => write!(f, "unsupported SMILES feature '{c}'"),
            SmilesErrorKind::UnexpectedCharacter(c) => write!(f, "unexpected character '{c}'"),
            SmilesErrorKind::DanglingBond => write!(f, "bond symbol not followed by an atom"),
            SmilesErrorKind::InvalidBond => write!(f, "self-loop or duplicate bond"),
            SmilesErrorKind::ConflictingRingBond => {
                write!(f, "ring closure bond symbols disagree")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct SmilesError {
    pub kind: SmilesErrorKind,
    pub offset: usize,
}

fn err<T>(kind: SmilesErrorKind, offset: usize) -> Result<T, SmilesError> {
    Err(SmilesError { kind, offset })
}

struct OpenRing {
    atom: usize,
    order: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, offset: usize) -> Result<(), SmilesError> {
        if a == b || self.adjacency[a].iter().any(|&(n, _)| n == b) {
            return err(SmilesErrorKind::InvalidBond, offset);
        }
        let idx = self.bonds.len();
        self.bonds.push(Bond {
            endpoints: (a, b),
            order,
        });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
        Ok(())
    }

    fn default_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn push_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    fn organic_atom(&mut self) -> Result<Option<usize>, SmilesError> {
        let start = self.pos;
        let c = match self.peek() {
            Some(c) => c,
            None => return Ok(None),
        };
        let next = self.src.get(self.pos + 1).copied();
        let (element, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => (Element::CL, false, 2),
            (b'B', Some(b'r')) => (Element::BR, false, 2),
            (b'B', _) => (Element::B, false, 1),
            (b'C', _) => (Element::C, false, 1),
            (b'N', _) => (Element::N, false, 1),
            (b'O', _) => (Element::O, false, 1),
            (b'P', _) => (Element::P, false, 1),
            (b'S', _) => (Element::S, false, 1),
            (b'F', _) => (Element::F, false, 1),
            (b'I', _) => (Element::I, false, 1),
            (b'b', _) => (Element::B, true, 1),
            (b'c', _) => (Element::C, true, 1),
            (b'n', _) => (Element::N, true, 1),
            (b'o', _) => (Element::O, true, 1),
            (b'p', _) => (Element::P, true, 1),
            (b's', _) => (Element::S, true, 1),
            _ if c.is_ascii_alphabetic() => {
                let sym = String::from_utf8_lossy(&self.src[start..start + 1]).into_owned();
                return err(SmilesErrorKind::UnknownElement(sym), start);
            }
            _ => return Ok(None),
        };
        self.pos += len;
        Ok(Some(self.push_atom(Atom {
            element,
            formal_charge: 0,
            explicit_h: 0,
            implicit_h: 0,
            isotope: None,
            aromatic,
            ring_member: false,
            degree: 0,
            bracket: false,
        })))
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
    }

    fn bracket_atom(&mut self) -> Result<usize, SmilesError> {
        let open = self.pos;
        self.pos += 1;
        let malformed = |msg: &str, at: usize| err(SmilesErrorKind::MalformedBracketAtom(msg.to_owned()), at);

        let isotope = match self.read_number() {
            Some(n) if n <= u16::MAX as u32 => Some(n as u16),
            Some(_) => return malformed("isotope out of range", open),
            None => None,
        };

        let sym_start = self.pos;
        let first = match self.peek() {
            Some(c) if c.is_ascii_alphabetic() => c,
            _ => return malformed("missing element symbol", sym_start),
        };
        self.pos += 1;
        let (element, aromatic) = if first.is_ascii_lowercase() {
            // aromatic two-letter forms first
            let two = self.src.get(self.pos).copied();
            let (sym, extra) = match (first, two) {
                (b's', Some(b'e')) => ("Se", 1),
                (b'a', Some(b's')) => ("As", 1),
                (b'b', _) => ("B", 0),
                (b'c', _) => ("C", 0),
                (b'n', _) => ("N", 0),
                (b'o', _) => ("O", 0),
                (b'p', _) => ("P", 0),
                (b's', _) => ("S", 0),
                _ => {
                    let sym = (first as char).to_string();
                    return err(SmilesErrorKind::UnknownElement(sym), sym_start);
                }
            };
            self.pos += extra;
            (Element::from_symbol(sym).expect("aromatic symbol in table"), true)
        } else {
            // Prefer a two-letter symbol when the second letter is lowercase
            // and forms a known element.
            let second = self.peek().filter(|c| c.is_ascii_lowercase());
            let two = second.and_then(|s| {
                let sym = [first, s];
                Element::from_symbol(std::str::from_utf8(&sym).ok()?)
            });
            match two {
                Some(e) => {
                    self.pos += 1;
                    (e, false)
                }
                None => {
                    let sym = (first as char).to_string();
                    match Element::from_symbol(&sym) {
                        Some(e) => (e, false),
                        None => return err(SmilesErrorKind::UnknownElement(sym), sym_start),
                    }
                }
            }
        };

        if self.peek() == Some(b'@') {
            return err(SmilesErrorKind::Unsupported('@'), self.pos);
        }

        let mut explicit_h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            explicit_h = match self.read_number() {
                Some(n) if n <= 9 => n as u8,
                Some(_) => return malformed("hydrogen count out of range", self.pos),
                None => 1,
            };
        }

        let mut formal_charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.read_number() {
                if n > 15 {
                    return malformed("charge out of range", self.pos);
                }
                formal_charge = unit * n as i32;
            } else {
                formal_charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    formal_charge += unit;
                }
            }
        }

        match self.peek() {
            Some(b']') => self.pos += 1,
            Some(b':') => return err(SmilesErrorKind::Unsupported(':'), self.pos),
            Some(c) => return malformed(&format!("unexpected '{}' inside brackets", c as char), self.pos),
            None => return malformed("missing ']'", open),
        }

        Ok(self.push_atom(Atom {
            element,
            formal_charge: formal_charge as i8,
            explicit_h,
            implicit_h: 0,
            isotope,
            aromatic,
            ring_member: false,
            degree: 0,
            bracket: true,
        }))
    }

    fn parse(mut self) -> Result<MolGraph, SmilesError> {
        if self.src.is_empty() {
            return err(SmilesErrorKind::Empty, 0);
        }
        let mut prev: Option<usize> = None;
        let mut pending: Option<(BondOrder, usize)> = None;
        let mut branches: Vec<(usize, usize)> = Vec::new();
        let mut rings: HashMap<u32, OpenRing> = HashMap::new();

        while let Some(c) = self.peek() {
            let offset = self.pos;
            match c {
                b'-' | b'=' | b'#' | b':' => {
                    if pending.is_some() || prev.is_none() {
                        return err(SmilesErrorKind::UnexpectedCharacter(c as char), offset);
                    }
                    let order = match c {
                        b'-' => BondOrder::Single,
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        _ => BondOrder::Aromatic,
                    };
                    pending = Some((order, offset));
                    self.pos += 1;
                }
                b'(' => {
                    let Some(p) = prev else {
                        return err(SmilesErrorKind::UnexpectedCharacter('('), offset);
                    };
                    if pending.is_some() {
                        return err(SmilesErrorKind::DanglingBond, offset);
                    }
                    branches.push((p, offset));
                    self.pos += 1;
                }
                b')' => {
                    if pending.is_some() {
                        return err(SmilesErrorKind::DanglingBond, offset);
                    }
                    let Some((p, _)) = branches.pop() else {
                        return err(SmilesErrorKind::UnmatchedParenthesis, offset);
                    };
                    prev = Some(p);
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(p) = prev else {
                        return err(SmilesErrorKind::UnexpectedCharacter(c as char), offset);
                    };
                    let label = if c == b'%' {
                        let d = self.src.get(offset + 1..offset + 3);
                        match d {
                            Some(d) if d.iter().all(u8::is_ascii_digit) => {
                                self.pos += 3;
                                ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32
                            }
                            _ => return err(SmilesErrorKind::UnexpectedCharacter('%'), offset),
                        }
                    } else {
                        self.pos += 1;
                        (c - b'0') as u32
                    };
                    let order = pending.take().map(|(o, _)| o);
                    match rings.remove(&label) {
                        Some(open) => {
                            let order = match (open.order, order) {
                                (Some(a), Some(b)) if a != b => {
                                    return err(SmilesErrorKind::ConflictingRingBond, offset)
                                }
                                (Some(a), _) | (None, Some(a)) => a,
                                (None, None) => self.default_order(open.atom, p),
                            };
                            self.add_bond(open.atom, p, order, offset)?;
                        }
                        None => {
                            rings.insert(label, OpenRing { atom: p, order, offset });
                        }
                    }
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.connect(prev, atom, pending.take())?;
                    prev = Some(atom);
                }
                b'/' | b'\\' | b'@' | b'*' | b'.' | b'$' => {
                    return err(SmilesErrorKind::Unsupported(c as char), offset);
                }
                _ => match self.organic_atom()? {
                    Some(atom) => {
                        self.connect(prev, atom, pending.take())?;
                        prev = Some(atom);
                    }
                    None => {
                        let ch = std::str::from_utf8(&self.src[offset..])
                            .ok()
                            .and_then(|s| s.chars().next())
                            .unwrap_or('\u{FFFD}');
                        return err(SmilesErrorKind::UnexpectedCharacter(ch), offset);
                    }
                },
            }
        }

        if let Some((_, offset)) = pending {
            return err(SmilesErrorKind::DanglingBond, offset);
        }
        if let Some(&(_, offset)) = branches.last() {
            return err(SmilesErrorKind::UnmatchedParenthesis, offset);
        }
        if let Some(open) = rings.values().min_by_key(|r| r.offset) {
            return err(SmilesErrorKind::UnmatchedRingClosure, open.offset);
        }
        if self.atoms.is_empty() {
            return err(SmilesErrorKind::Empty, 0);
        }

        let mut graph = MolGraph {
            atoms: self.atoms,
            bonds: self.bonds,
            adjacency: self.adjacency,
        };
        finish_atoms(&mut graph);
        Ok(graph)
    }

    fn connect(
        &mut self,
        prev: Option<usize>,
        atom: usize,
        pending: Option<(BondOrder, usize)>,
    ) -> Result<(), SmilesError> {
        if let Some(p) = prev {
            let order = pending.map(|(o, _)| o).unwrap_or_else(|| self.default_order(p, atom));
            let offset = pending.map(|(_, o)| o).unwrap_or(self.pos);
            self.add_bond(p, atom, order, offset)?;
        }
        Ok(())
    }
}

/// Fills in degrees, ring membership and implicit hydrogens.
fn finish_atoms(g: &mut MolGraph) {
    let in_ring = ring_atoms(g);
    for (v, &ring) in in_ring.iter().enumerate() {
        let degree = g.adjacency[v].len();
        let bond_sum: u32 = g.adjacency[v]
            .iter()
            .map(|&(_, b)| g.bonds[b].order.valence_units() as u32)
            .sum();
        let atom = &mut g.atoms[v];
        atom.degree = degree;
        atom.ring_member = ring;
        if !atom.bracket {
            atom.implicit_h = implicit_hydrogens(atom.element, atom.aromatic, bond_sum);
        }
    }
}

fn implicit_hydrogens(element: Element, aromatic: bool, bond_sum: u32) -> u8 {
    let Some(valences) = element.default_valences() else {
        return 0;
    };
    let penalty = u32::from(aromatic);
    valences
        .iter()
        .map(|&v| (v as u32).saturating_sub(penalty))
        .find(|&v| v >= bond_sum)
        .map(|v| (v - bond_sum) as u8)
        .unwrap_or(0)
}

/// Atoms incident to at least one non-bridge bond lie on a cycle.
fn ring_atoms(g: &MolGraph) -> Vec<bool> {
    let n = g.atoms.len();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut is_bridge = vec![false; g.bonds.len()];
    let mut timer = 0;

    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // frames: (vertex, bond used to enter, next adjacency slot)
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(frame) = stack.last_mut() {
            let (v, via, slot) = *frame;
            if slot < g.adjacency[v].len() {
                frame.2 += 1;
                let (u, b) = g.adjacency[v][slot];
                if Some(b) == via {
                    continue;
                }
                if disc[u] == usize::MAX {
                    disc[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    stack.push((u, Some(b), 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let (Some(&(parent, _, _)), Some(b)) = (stack.last(), via) {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        is_bridge[b] = true;
                    }
                }
            }
        }
    }

    let mut ring = vec![false; n];
    for (i, b) in g.bonds.iter().enumerate() {
        if !is_bridge[i] {
            ring[b.endpoints.0] = true;
            ring[b.endpoints.1] = true;
        }
    }
    ring
}

/// Parses a SMILES string into a [`MolGraph`].
pub fn parse_smiles(input: &str) -> Result<MolGraph, SmilesError> {
    Parser {
        src: input.trim().as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        adjacency: Vec::new(),
    }
    .parse()
}

/// Deterministic atom ordering: Morgan-style refinement of an initial
/// (degree, element, charge, hydrogen count) invariant by sorted neighbor
/// classes until the class count stops growing, then ties broken by parse
/// order. Returns `order` with `order[i]` the original index of the atom at
/// position `i`.
pub fn canonical_atom_order(g: &MolGraph) -> Vec<usize> {
    let n = g.atom_count();
    let initial: Vec<(usize, u8, i8, u8)> = g
        .atoms
        .iter()
        .map(|a| (a.degree, a.element.atomic_number(), a.formal_charge, a.total_h()))
        .collect();
    let mut classes = rank(&initial);
    let mut n_classes = count_distinct(&classes);
    loop {
        let keys: Vec<(usize, Vec<usize>)> = (0..n)
            .map(|v| {
                let mut nbr: Vec<usize> = g.neighbors(v).map(|u| classes[u]).collect();
                nbr.sort_unstable();
                (classes[v], nbr)
            })
            .collect();
        let refined = rank(&keys);
        let refined_count = count_distinct(&refined);
        if refined_count <= n_classes {
            break;
        }
        classes = refined;
        n_classes = refined_count;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (classes[v], v));
    order
}

fn rank<K: Ord>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<&K> = keys.iter().collect();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(&k).expect("key present"))
        .collect()
}

fn count_distinct(classes: &[usize]) -> usize {
    let mut c = classes.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}
