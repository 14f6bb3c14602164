//! Heavy-atom molecular graphs and the SMILES subset used throughout the crate.
//!
//! Supported input: organic-subset atoms (`B C N O P S F Cl Br I`), aromatic
//! `b c n o s p`, bracket atoms with an explicit H count and formal charge,
//! bonds `- = # :`, branches and ring closures (`1`..`9`, `%nn`). Stereo,
//! isotopes, atom classes, wildcards and multi-fragment input are rejected.
//!
//! Aromaticity comes from the notation (lowercase atoms) and must lie on a
//! perceived ring; there is no Hückel perception. Implicit hydrogens follow
//! the usual default valences:
//!
//! | element | valences |
//! |---|---|
//! | B | 3 |
//! | C | 4 |
//! | N, P | 3, 5 |
//! | O | 2 |
//! | S | 2, 4, 6 |
//! | F, Cl, Br, I | 1 |
//!
//! An aromatic carbon written without brackets gets `3 - (bond sum)` hydrogens
//! (aromatic bonds counted as 1), so a ring CH with two ring neighbours gets
//! one H. Other aromatic atoms written without brackets carry no hydrogen;
//! pyrrole-type nitrogen must be written `[nH]`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MolError {
    #[error("empty SMILES")]
    EmptyInput,
    #[error("syntax error at position {position}: {message}")]
    SyntaxError { position: usize, message: String },
    #[error("unclosed ring bond {0}")]
    UnclosedRing(u32),
    #[error("unclosed branch")]
    UnclosedBranch,
    #[error("valence exceeded at atom {0}")]
    ValenceError(usize),
    #[error("molecule is disconnected")]
    DisconnectedMolecule,
    #[error("unsupported SMILES feature `{0}`")]
    UnsupportedFeature(String),
    #[error("aromatic atom {0} is not in a ring")]
    AromaticOutsideRing(usize),
}

fn syntax(position: usize, message: impl Into<String>) -> MolError {
    MolError::SyntaxError {
        position,
        message: message.into(),
    }
}

/// Chemical element. Elements outside the organic subset are kept by atomic
/// number; they are only reachable through bracket atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    B,
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
    Other(u8),
}

const OTHER_ELEMENTS: &[(&str, u8)] = &[
    ("Li", 3),
    ("Na", 11),
    ("Mg", 12),
    ("Al", 13),
    ("Si", 14),
    ("K", 19),
    ("Ca", 20),
    ("Fe", 26),
    ("Cu", 29),
    ("Zn", 30),
    ("As", 33),
    ("Se", 34),
    ("Sn", 50),
];

impl Element {
    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
            Element::P => 15,
            Element::S => 16,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
            Element::Other(z) => z,
        }
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        let el = match z {
            5 => Element::B,
            6 => Element::C,
            7 => Element::N,
            8 => Element::O,
            9 => Element::F,
            15 => Element::P,
            16 => Element::S,
            17 => Element::Cl,
            35 => Element::Br,
            53 => Element::I,
            _ => return OTHER_ELEMENTS
                .iter()
                .find(|(_, n)| *n == z)
                .map(|(_, n)| Element::Other(*n)),
        };
        Some(el)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::Other(z) => OTHER_ELEMENTS
                .iter()
                .find(|(_, n)| *n == z)
                .map(|(s, _)| *s)
                .unwrap_or("?"),
        }
    }

    /// Parses a capitalised element symbol (`"C"`, `"Cl"`, `"Na"`).
    pub fn from_symbol(sym: &str) -> Option<Element> {
        let el = match sym {
            "B" => Element::B,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "F" => Element::F,
            "P" => Element::P,
            "S" => Element::S,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            _ => return OTHER_ELEMENTS
                .iter()
                .find(|(s, _)| *s == sym)
                .map(|(_, z)| Element::Other(*z)),
        };
        Some(el)
    }

    /// Elements that may be written without brackets.
    pub fn is_organic_subset(self) -> bool {
        !matches!(self, Element::Other(_))
    }

    /// Elements that may carry the aromatic (lowercase) form.
    pub fn can_be_aromatic(self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        ) || self == Element::Other(34)
            || self == Element::Other(33)
    }

    pub fn default_valences(self) -> &'static [u8] {
        match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N | Element::P => &[3, 5],
            Element::O => &[2],
            Element::S => &[2, 4, 6],
            Element::F | Element::Cl | Element::Br | Element::I => &[1],
            Element::Other(_) => &[],
        }
    }

    /// Maximum valence for a charged atom, or `None` when unconstrained.
    fn max_valence(self, charge: i8) -> Option<u8> {
        let base = *self.default_valences().last()? as i16;
        let q = charge as i16;
        let v = match self {
            Element::C => 4 - q.abs(),
            Element::B => 3 - q,
            _ => base + q,
        };
        Some(v.max(0) as u8)
    }
}

impl Serialize for Element {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Element {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let sym = String::deserialize(d)?;
        Element::from_symbol(&sym).ok_or_else(|| serde::de::Error::custom(format!("unknown element `{sym}`")))
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the valence sum; aromatic bonds count as 1.
    fn valence(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    /// Total attached hydrogens (there are no explicit hydrogen atoms).
    pub implicit_h: u8,
    /// Hydrogen count was fixed by a bracket atom rather than derived.
    pub fixed_h: bool,
    pub in_ring: bool,
    /// Number of smallest-set-of-smallest-rings members containing this atom.
    pub ring_count: u8,
    pub explicit_degree: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub in_ring: bool,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.begin == atom {
            self.end
        } else {
            self.begin
        }
    }
}

/// A connected heavy-atom molecular graph.
#[derive(Debug, Clone)]
pub struct Molecule {
    id: String,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    source_smiles: String,
    rings: Vec<Vec<usize>>,
    // (neighbour, bond index), sorted by neighbour index.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Molecule {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom(&self, index: usize) -> &Atom {
        &self.atoms[index]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn source_smiles(&self) -> &str {
        &self.source_smiles
    }

    /// SSSR rings as atom cycles.
    pub fn rings(&self) -> &[Vec<usize>] {
        &self.rings
    }

    /// `(neighbour, bond index)` pairs in ascending neighbour order.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .find(|(n, _)| *n == b)
            .map(|&(_, bi)| &self.bonds[bi])
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Atom description before hydrogens and ring flags are derived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomSpec {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    /// `Some` for bracket atoms, whose hydrogen count is given explicitly.
    pub fixed_h: Option<u8>,
}

impl AtomSpec {
    pub fn organic(element: Element, aromatic: bool) -> Self {
        AtomSpec {
            element,
            aromatic,
            formal_charge: 0,
            fixed_h: None,
        }
    }
}

/// Mutable graph that validates into a [`Molecule`].
#[derive(Debug, Clone, Default)]
pub struct MoleculeBuilder {
    pub atoms: Vec<AtomSpec>,
    pub bonds: Vec<(usize, usize, BondOrder)>,
}

impl MoleculeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_molecule(mol: &Molecule) -> Self {
        MoleculeBuilder {
            atoms: mol
                .atoms
                .iter()
                .map(|a| AtomSpec {
                    element: a.element,
                    aromatic: a.aromatic,
                    formal_charge: a.formal_charge,
                    fixed_h: a.fixed_h.then_some(a.implicit_h),
                })
                .collect(),
            bonds: mol.bonds.iter().map(|b| (b.begin, b.end, b.order)).collect(),
        }
    }

    pub fn add_atom(&mut self, spec: AtomSpec) -> usize {
        self.atoms.push(spec);
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> usize {
        self.bonds.push((a, b, order));
        self.bonds.len() - 1
    }

    pub fn bond_index(&self, a: usize, b: usize) -> Option<usize> {
        self.bonds
            .iter()
            .position(|&(x, y, _)| (x == a && y == b) || (x == b && y == a))
    }

    /// Removes an atom and its bonds, shifting higher indices down by one.
    pub fn remove_atom(&mut self, atom: usize) {
        self.atoms.remove(atom);
        self.bonds.retain(|&(a, b, _)| a != atom && b != atom);
        for (a, b, _) in &mut self.bonds {
            if *a > atom {
                *a -= 1;
            }
            if *b > atom {
                *b -= 1;
            }
        }
    }

    /// Validates the graph, perceives rings and assigns hydrogens. The
    /// resulting `source_smiles` is `source`, or a written SMILES when `None`.
    pub fn build(self, id: &str, source: Option<&str>) -> Result<Molecule, MolError> {
        let n = self.atoms.len();
        if n == 0 {
            return Err(MolError::EmptyInput);
        }
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (bi, &(a, b, _)) in self.bonds.iter().enumerate() {
            if a == b || a >= n || b >= n {
                return Err(syntax(0, format!("invalid bond {a}-{b}")));
            }
            if adjacency[a].iter().any(|&(x, _)| x == b) {
                return Err(syntax(0, format!("duplicate bond {a}-{b}")));
            }
            adjacency[a].push((b, bi));
            adjacency[b].push((a, bi));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        if !is_connected(&adjacency) {
            return Err(MolError::DisconnectedMolecule);
        }

        let edges: Vec<(usize, usize)> = self.bonds.iter().map(|&(a, b, _)| (a, b)).collect();
        let rings = smallest_set_of_smallest_rings(n, &edges, &adjacency);
        let mut bond_in_ring = vec![false; edges.len()];
        let mut ring_count = vec![0u8; n];
        for ring in &rings {
            for (k, &a) in ring.iter().enumerate() {
                let b = ring[(k + 1) % ring.len()];
                let bi = adjacency[a].iter().find(|(x, _)| *x == b).map(|&(_, bi)| bi);
                if let Some(bi) = bi {
                    bond_in_ring[bi] = true;
                }
                ring_count[a] = ring_count[a].saturating_add(1);
            }
        }

        let mut bonds: Vec<Bond> = Vec::with_capacity(self.bonds.len());
        for (bi, &(a, b, order)) in self.bonds.iter().enumerate() {
            let (begin, end) = if a < b { (a, b) } else { (b, a) };
            let mut order = order;
            if order == BondOrder::Aromatic {
                if !(self.atoms[a].aromatic && self.atoms[b].aromatic) {
                    return Err(syntax(0, format!("aromatic bond {a}-{b} between non-aromatic atoms")));
                }
                if !bond_in_ring[bi] {
                    order = BondOrder::Single;
                }
            }
            bonds.push(Bond {
                begin,
                end,
                order,
                in_ring: bond_in_ring[bi],
            });
        }

        let mut atoms = Vec::with_capacity(n);
        for (i, spec) in self.atoms.iter().enumerate() {
            if spec.aromatic && ring_count[i] == 0 {
                return Err(MolError::AromaticOutsideRing(i));
            }
            let incident: Vec<BondOrder> = adjacency[i].iter().map(|&(_, bi)| bonds[bi].order).collect();
            let implicit_h = match spec.fixed_h {
                Some(h) => {
                    let total = bond_valence_sum(&incident) + h;
                    if let Some(max) = spec.element.max_valence(spec.formal_charge) {
                        if total > max {
                            return Err(MolError::ValenceError(i));
                        }
                    }
                    h
                }
                None => default_hydrogens(spec.element, spec.aromatic, &incident)
                    .ok_or(MolError::ValenceError(i))?,
            };
            atoms.push(Atom {
                element: spec.element,
                aromatic: spec.aromatic,
                formal_charge: spec.formal_charge,
                implicit_h,
                fixed_h: spec.fixed_h.is_some(),
                in_ring: ring_count[i] > 0,
                ring_count: ring_count[i],
                explicit_degree: adjacency[i].len() as u8,
            });
        }

        let mut mol = Molecule {
            id: id.to_string(),
            atoms,
            bonds,
            source_smiles: String::new(),
            rings,
            adjacency,
        };
        mol.source_smiles = match source {
            Some(s) => s.to_string(),
            None => write_smiles(&mol),
        };
        Ok(mol)
    }
}

fn bond_valence_sum(orders: &[BondOrder]) -> u8 {
    orders.iter().map(|o| o.valence()).sum()
}

/// Hydrogen count for an atom written without brackets, or `None` when the
/// bonds exceed every allowed valence.
fn default_hydrogens(element: Element, aromatic: bool, orders: &[BondOrder]) -> Option<u8> {
    let sum = bond_valence_sum(orders);
    if aromatic {
        let max = element.max_valence(0)?;
        if sum > max {
            return None;
        }
        return Some(if element == Element::C { 3u8.saturating_sub(sum) } else { 0 });
    }
    if orders.contains(&BondOrder::Aromatic) {
        return None;
    }
    element
        .default_valences()
        .iter()
        .find(|&&v| v >= sum)
        .map(|&v| v - sum)
}

fn is_connected(adjacency: &[Vec<(usize, usize)>]) -> bool {
    let mut seen = vec![false; adjacency.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(w, _) in &adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Smallest set of smallest rings for a connected graph.
///
/// Candidate cycles are built from shortest-path pairs rooted at every vertex
/// (Horton's construction), sorted by length and then by sorted atom list, and
/// accepted greedily while they stay independent over GF(2) edge vectors.
pub(crate) fn smallest_set_of_smallest_rings(
    n: usize,
    edges: &[(usize, usize)],
    adjacency: &[Vec<(usize, usize)>],
) -> Vec<Vec<usize>> {
    let cyclomatic = (edges.len() + 1).saturating_sub(n);
    if cyclomatic == 0 {
        return Vec::new();
    }
    let words = edges.len().div_ceil(64);
    let mut candidates: Vec<(Vec<usize>, Vec<u64>)> = Vec::new();
    let mut seen_sets: std::collections::HashSet<Vec<u64>> = Default::default();

    for root in 0..n {
        let mut parent = vec![usize::MAX; n];
        let mut parent_bond = vec![usize::MAX; n];
        let mut dist = vec![usize::MAX; n];
        dist[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &(w, bi) in &adjacency[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    parent[w] = v;
                    parent_bond[w] = bi;
                    queue.push_back(w);
                }
            }
        }
        let path = |mut v: usize| {
            let mut atoms = vec![v];
            let mut bonds = Vec::new();
            while v != root {
                bonds.push(parent_bond[v]);
                v = parent[v];
                atoms.push(v);
            }
            (atoms, bonds)
        };
        for (bi, &(x, y)) in edges.iter().enumerate() {
            if parent_bond[x] == bi || parent_bond[y] == bi {
                continue;
            }
            let (px, bx) = path(x);
            let (py, by) = path(y);
            // The two paths may share only the root.
            let shared = px.iter().filter(|a| py.contains(a)).count();
            if shared != 1 {
                continue;
            }
            let mut bits = vec![0u64; words];
            for &b in bx.iter().chain(by.iter()).chain(std::iter::once(&bi)) {
                bits[b / 64] |= 1 << (b % 64);
            }
            if !seen_sets.insert(bits.clone()) {
                continue;
            }
            let mut cycle: Vec<usize> = px.iter().rev().copied().collect();
            cycle.extend(py.iter().take(py.len() - 1));
            candidates.push((cycle, bits));
        }
    }

    candidates.sort_by(|a, b| {
        a.0.len().cmp(&b.0.len()).then_with(|| {
            let mut sa = a.0.clone();
            let mut sb = b.0.clone();
            sa.sort_unstable();
            sb.sort_unstable();
            sa.cmp(&sb)
        })
    });

    // Incremental GF(2) elimination keyed by pivot bit.
    let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut rings = Vec::new();
    for (cycle, bits) in candidates {
        let mut v = bits.clone();
        for (pivot, row) in &basis {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for (w, r) in v.iter_mut().zip(row) {
                    *w ^= r;
                }
            }
        }
        let pivot = v
            .iter()
            .enumerate()
            .find(|(_, w)| **w != 0)
            .map(|(i, w)| i * 64 + w.trailing_zeros() as usize);
        if let Some(pivot) = pivot {
            // Keep rows reduced at the new pivot so later lookups stay valid.
            for (_, row) in basis.iter_mut() {
                if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                    for (r, w) in row.iter_mut().zip(&v) {
                        *r ^= w;
                    }
                }
            }
            basis.push((pivot, v));
            rings.push(cycle);
            if rings.len() == cyclomatic {
                break;
            }
        }
    }
    rings
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondSymbol {
    fn order(self) -> BondOrder {
        match self {
            BondSymbol::Single => BondOrder::Single,
            BondSymbol::Double => BondOrder::Double,
            BondSymbol::Triple => BondOrder::Triple,
            BondSymbol::Aromatic => BondOrder::Aromatic,
        }
    }
}

struct SmilesParser<'a> {
    text: &'a [u8],
    pos: usize,
    builder: MoleculeBuilder,
    prev: Option<usize>,
    pending: Option<(BondSymbol, usize)>,
    branches: Vec<usize>,
    rings: BTreeMap<u32, (usize, Option<BondSymbol>)>,
}

impl<'a> SmilesParser<'a> {
    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn default_order(&self, a: usize, b: usize) -> BondOrder {
        if self.builder.atoms[a].aromatic && self.builder.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn push_atom(&mut self, spec: AtomSpec) -> Result<(), MolError> {
        let idx = self.builder.add_atom(spec);
        if let Some(prev) = self.prev {
            let order = match self.pending.take() {
                Some((sym, _)) => sym.order(),
                None => self.default_order(prev, idx),
            };
            self.builder.add_bond(prev, idx, order);
        } else if let Some((_, p)) = self.pending {
            return Err(syntax(p, "bond without preceding atom"));
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self, number: u32, start: usize) -> Result<(), MolError> {
        let cur = self.prev.ok_or_else(|| syntax(start, "ring closure without atom"))?;
        let sym = self.pending.take().map(|(s, _)| s);
        match self.rings.remove(&number) {
            Some((open, open_sym)) => {
                if open == cur {
                    return Err(syntax(start, "ring closure to the same atom"));
                }
                let sym = match (open_sym, sym) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(syntax(start, "conflicting ring-closure bond symbols"))
                    }
                    (a, b) => a.or(b),
                };
                if self.builder.bond_index(open, cur).is_some() {
                    return Err(syntax(start, "ring closure duplicates an existing bond"));
                }
                let order = sym.map(BondSymbol::order).unwrap_or_else(|| self.default_order(open, cur));
                self.builder.add_bond(open, cur, order);
            }
            None => {
                self.rings.insert(number, (cur, sym));
            }
        }
        Ok(())
    }

    fn bracket_atom(&mut self) -> Result<AtomSpec, MolError> {
        let start = self.pos;
        self.pos += 1; // '['
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            return Err(MolError::UnsupportedFeature("isotope".into()));
        }
        let (element, aromatic) = self.bracket_symbol(start)?;
        let mut fixed_h = 0u8;
        let mut charge: i8 = 0;
        loop {
            match self.peek() {
                Some(b'@') => return Err(MolError::UnsupportedFeature("@".into())),
                Some(b'H') => {
                    self.pos += 1;
                    fixed_h = self.read_number().unwrap_or(1) as u8;
                }
                Some(c @ (b'+' | b'-')) => {
                    self.pos += 1;
                    let sign: i8 = if c == b'+' { 1 } else { -1 };
                    let mut magnitude = 1i8;
                    if let Some(n) = self.read_number() {
                        magnitude = n as i8;
                    } else {
                        while self.peek() == Some(c) {
                            self.pos += 1;
                            magnitude += 1;
                        }
                    }
                    charge = sign * magnitude;
                }
                Some(b':') => return Err(MolError::UnsupportedFeature("atom class".into())),
                Some(b']') => {
                    self.pos += 1;
                    break;
                }
                Some(_) => return Err(syntax(self.pos, "unexpected character in bracket atom")),
                None => return Err(syntax(start, "unterminated bracket atom")),
            }
        }
        Ok(AtomSpec {
            element,
            aromatic,
            formal_charge: charge,
            fixed_h: Some(fixed_h),
        })
    }

    fn bracket_symbol(&mut self, start: usize) -> Result<(Element, bool), MolError> {
        let rest = &self.text[self.pos..];
        let Some(&first) = rest.first() else {
            return Err(syntax(start, "unterminated bracket atom"));
        };
        if first == b'*' {
            return Err(MolError::UnsupportedFeature("*".into()));
        }
        if first.is_ascii_lowercase() {
            for (sym, el) in [("se", Element::Other(34)), ("as", Element::Other(33))] {
                if rest.starts_with(sym.as_bytes()) {
                    self.pos += 2;
                    return Ok((el, true));
                }
            }
            let el = match first {
                b'b' => Element::B,
                b'c' => Element::C,
                b'n' => Element::N,
                b'o' => Element::O,
                b'p' => Element::P,
                b's' => Element::S,
                _ => return Err(syntax(self.pos, "unknown aromatic symbol")),
            };
            self.pos += 1;
            return Ok((el, true));
        }
        if first.is_ascii_uppercase() {
            if rest.len() >= 2 && rest[1].is_ascii_lowercase() {
                let two = std::str::from_utf8(&rest[..2]).unwrap_or("");
                if let Some(el) = Element::from_symbol(two) {
                    self.pos += 2;
                    return Ok((el, false));
                }
            }
            let one = (first as char).to_string();
            if one == "H" {
                return Err(MolError::UnsupportedFeature("[H]".into()));
            }
            if let Some(el) = Element::from_symbol(&one) {
                self.pos += 1;
                return Ok((el, false));
            }
            let end = (self.pos + 2).min(self.text.len());
            let token = String::from_utf8_lossy(&self.text[self.pos..end]).to_string();
            return Err(MolError::UnsupportedFeature(token));
        }
        Err(syntax(self.pos, "expected element symbol"))
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.text[start..self.pos]).ok()?.parse().ok()
    }

    fn parse(mut self) -> Result<MoleculeBuilder, MolError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let prev = self.prev.ok_or_else(|| syntax(start, "branch without atom"))?;
                    if self.pending.is_some() {
                        return Err(syntax(start, "bond before branch"));
                    }
                    self.branches.push(prev);
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return Err(syntax(start, "dangling bond"));
                    }
                    self.prev = Some(self.branches.pop().ok_or_else(|| syntax(start, "unmatched ')'"))?);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if self.pending.is_some() {
                        return Err(syntax(start, "consecutive bond symbols"));
                    }
                    let sym = match c {
                        b'-' => BondSymbol::Single,
                        b'=' => BondSymbol::Double,
                        b'#' => BondSymbol::Triple,
                        _ => BondSymbol::Aromatic,
                    };
                    self.pending = Some((sym, start));
                    self.pos += 1;
                }
                b'/' | b'\\' | b'$' | b'*' | b'@' => {
                    return Err(MolError::UnsupportedFeature((c as char).to_string()))
                }
                b'.' => return Err(MolError::DisconnectedMolecule),
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure((c - b'0') as u32, start)?;
                }
                b'%' => {
                    self.pos += 1;
                    let digits = self.text.get(self.pos..self.pos + 2);
                    let number = digits
                        .filter(|d| d.iter().all(u8::is_ascii_digit))
                        .and_then(|d| std::str::from_utf8(d).ok()?.parse::<u32>().ok())
                        .ok_or_else(|| syntax(start, "expected two digits after '%'"))?;
                    self.pos += 2;
                    self.ring_closure(number, start)?;
                }
                b'[' => {
                    let spec = self.bracket_atom()?;
                    self.push_atom(spec)?;
                }
                _ => {
                    let rest = &self.text[self.pos..];
                    let (spec, len) = if rest.starts_with(b"Cl") {
                        (AtomSpec::organic(Element::Cl, false), 2)
                    } else if rest.starts_with(b"Br") {
                        (AtomSpec::organic(Element::Br, false), 2)
                    } else {
                        let spec = match c {
                            b'B' => AtomSpec::organic(Element::B, false),
                            b'C' => AtomSpec::organic(Element::C, false),
                            b'N' => AtomSpec::organic(Element::N, false),
                            b'O' => AtomSpec::organic(Element::O, false),
                            b'P' => AtomSpec::organic(Element::P, false),
                            b'S' => AtomSpec::organic(Element::S, false),
                            b'F' => AtomSpec::organic(Element::F, false),
                            b'I' => AtomSpec::organic(Element::I, false),
                            b'b' => AtomSpec::organic(Element::B, true),
                            b'c' => AtomSpec::organic(Element::C, true),
                            b'n' => AtomSpec::organic(Element::N, true),
                            b'o' => AtomSpec::organic(Element::O, true),
                            b'p' => AtomSpec::organic(Element::P, true),
                            b's' => AtomSpec::organic(Element::S, true),
                            _ => return Err(syntax(start, format!("unexpected character '{}'", c as char))),
                        };
                        (spec, 1)
                    };
                    self.pos += len;
                    self.push_atom(spec)?;
                }
            }
        }
        if let Some((_, p)) = self.pending {
            return Err(syntax(p, "dangling bond"));
        }
        if !self.branches.is_empty() {
            return Err(MolError::UnclosedBranch);
        }
        if let Some((&number, _)) = self.rings.iter().next() {
            return Err(MolError::UnclosedRing(number));
        }
        Ok(self.builder)
    }
}

/// Parses a SMILES string in the supported subset. Atom indices follow the
/// order in which atoms appear in the text.
pub fn parse_smiles(text: &str, id: &str) -> Result<Molecule, MolError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(MolError::EmptyInput);
    }
    if !text.is_ascii() {
        let pos = text.char_indices().find(|(_, c)| !c.is_ascii()).map_or(0, |(i, _)| i);
        return Err(syntax(pos, "non-ASCII character"));
    }
    let parser = SmilesParser {
        text: text.as_bytes(),
        pos: 0,
        builder: MoleculeBuilder::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: BTreeMap::new(),
    };
    parser.parse()?.build(id, Some(text))
}

fn atom_token(mol: &Molecule, index: usize) -> String {
    let atom = &mol.atoms[index];
    let symbol = if atom.aromatic {
        atom.element.symbol().to_ascii_lowercase()
    } else {
        atom.element.symbol().to_string()
    };
    let bare = atom.element.is_organic_subset() && atom.formal_charge == 0 && {
        let orders: Vec<BondOrder> = mol.adjacency[index].iter().map(|&(_, b)| mol.bonds[b].order).collect();
        default_hydrogens(atom.element, atom.aromatic, &orders) == Some(atom.implicit_h)
    };
    if bare {
        return symbol;
    }
    let mut out = format!("[{symbol}");
    match atom.implicit_h {
        0 => {}
        1 => out.push('H'),
        h => out.push_str(&format!("H{h}")),
    }
    match atom.formal_charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        q if q > 0 => out.push_str(&format!("+{q}")),
        q => out.push_str(&format!("-{}", -q)),
    }
    out.push(']');
    out
}

fn bond_token(mol: &Molecule, bond: &Bond) -> &'static str {
    match bond.order {
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic => "",
        BondOrder::Single => {
            if mol.atoms[bond.begin].aromatic && mol.atoms[bond.end].aromatic {
                "-"
            } else {
                ""
            }
        }
    }
}

/// Writes a SMILES string that re-parses to an isomorphic molecule.
/// Traversal is depth-first from atom 0 in ascending neighbour order.
pub fn write_smiles(mol: &Molecule) -> String {
    let n = mol.atoms.len();
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut ring_bonds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut is_ring_bond = vec![false; mol.bonds.len()];

    fn discover(
        mol: &Molecule,
        v: usize,
        parent_bond: Option<usize>,
        visited: &mut [bool],
        children: &mut [Vec<(usize, usize)>],
        ring_bonds: &mut [Vec<usize>],
        is_ring_bond: &mut [bool],
    ) {
        visited[v] = true;
        for &(w, b) in &mol.adjacency[v] {
            if Some(b) == parent_bond || is_ring_bond[b] {
                continue;
            }
            if visited[w] {
                is_ring_bond[b] = true;
                ring_bonds[w].push(b);
                ring_bonds[v].push(b);
            } else {
                children[v].push((w, b));
                discover(mol, w, Some(b), visited, children, ring_bonds, is_ring_bond);
            }
        }
    }
    discover(mol, 0, None, &mut visited, &mut children, &mut ring_bonds, &mut is_ring_bond);

    let mut open_digits: HashMap<usize, u32> = HashMap::new();
    let mut in_use: Vec<u32> = Vec::new();
    let mut out = String::new();

    fn emit(
        mol: &Molecule,
        v: usize,
        children: &[Vec<(usize, usize)>],
        ring_bonds: &[Vec<usize>],
        open_digits: &mut HashMap<usize, u32>,
        in_use: &mut Vec<u32>,
        out: &mut String,
    ) {
        out.push_str(&atom_token(mol, v));
        for &b in &ring_bonds[v] {
            let digit = match open_digits.remove(&b) {
                Some(d) => {
                    in_use.retain(|&x| x != d);
                    d
                }
                None => {
                    let d = (1..).find(|d| !in_use.contains(d)).unwrap();
                    in_use.push(d);
                    open_digits.insert(b, d);
                    out.push_str(bond_token(mol, &mol.bonds[b]));
                    d
                }
            };
            if digit < 10 {
                out.push_str(&digit.to_string());
            } else {
                out.push_str(&format!("%{digit:02}"));
            }
        }
        let kids = &children[v];
        for (k, &(w, b)) in kids.iter().enumerate() {
            let last = k + 1 == kids.len();
            if !last {
                out.push('(');
            }
            out.push_str(bond_token(mol, &mol.bonds[b]));
            emit(mol, w, children, ring_bonds, open_digits, in_use, out);
            if !last {
                out.push(')');
            }
        }
    }
    emit(mol, 0, &children, &ring_bonds, &mut open_digits, &mut in_use, &mut out);
    out
}

fn atom_label(atom: &Atom) -> (Element, bool, i8, u8, u8) {
    (
        atom.element,
        atom.aromatic,
        atom.formal_charge,
        atom.implicit_h,
        atom.explicit_degree,
    )
}

/// Graph isomorphism respecting element, aromaticity, charge, hydrogen count
/// and bond order. Backtracking over a breadth-first ordering of `a`.
pub fn is_isomorphic(a: &Molecule, b: &Molecule) -> bool {
    if a.atoms.len() != b.atoms.len() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    let mut la: Vec<_> = a.atoms.iter().map(atom_label).collect();
    let mut lb: Vec<_> = b.atoms.iter().map(atom_label).collect();
    la.sort();
    lb.sort();
    if la != lb {
        return false;
    }
    let mut order = Vec::with_capacity(a.atoms.len());
    let mut seen = vec![false; a.atoms.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &(w, _) in &a.adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    let mut map = vec![usize::MAX; a.atoms.len()];
    let mut used = vec![false; b.atoms.len()];

    fn extend(
        a: &Molecule,
        b: &Molecule,
        order: &[usize],
        k: usize,
        map: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if k == order.len() {
            return true;
        }
        let v = order[k];
        let label = atom_label(&a.atoms[v]);
        for cand in 0..b.atoms.len() {
            if used[cand] || atom_label(&b.atoms[cand]) != label {
                continue;
            }
            let consistent = a.adjacency[v].iter().all(|&(w, bi)| {
                if map[w] == usize::MAX {
                    return true;
                }
                b.bond_between(cand, map[w])
                    .is_some_and(|bb| bb.order == a.bonds[bi].order)
            });
            if !consistent {
                continue;
            }
            map[v] = cand;
            used[cand] = true;
            if extend(a, b, order, k + 1, map, used) {
                return true;
            }
            map[v] = usize::MAX;
            used[cand] = false;
        }
        false
    }
    extend(a, b, &order, 0, &mut map, &mut used)
}

/// A malformed record in a molecule library file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Malformed(LineError),
}

/// Molecules read from a library, plus the records skipped in lenient mode.
#[derive(Debug, Clone, Default)]
pub struct Library {
    pub molecules: Vec<Molecule>,
    pub skipped: Vec<LineError>,
}

/// Parses `SMILES<TAB>ID` records. `#` lines and blank lines are ignored.
/// A malformed record is fatal unless `lenient`, in which case it is skipped
/// and reported.
pub fn parse_library(text: &str, lenient: bool) -> Result<Library, LibraryError> {
    let mut library = Library::default();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed = match trimmed.split_once('\t') {
            None => Err("expected SMILES<TAB>ID".to_string()),
            Some((smiles, id)) if id.trim().is_empty() => {
                let _ = smiles;
                Err("empty id".to_string())
            }
            Some((smiles, id)) => parse_smiles(smiles, id.trim()).map_err(|e| e.to_string()),
        };
        match parsed {
            Ok(mol) => library.molecules.push(mol),
            Err(message) => {
                let err = LineError { line: line_no, message };
                if lenient {
                    log::warn!("skipping library {err}");
                    library.skipped.push(err);
                } else {
                    return Err(LibraryError::Malformed(err));
                }
            }
        }
    }
    Ok(library)
}

pub fn read_library(path: &Path, lenient: bool) -> Result<Library, LibraryError> {
    let text = std::fs::read_to_string(path)?;
    parse_library(&text, lenient)
}
