//! SMARTS subset parser and backtracking substructure matcher.
//!
//! Atom primitives: element symbols (uppercase aliphatic, lowercase aromatic),
//! `#n`, `*`, `a`, `A`, `X<n>` total connections (heavy neighbours plus
//! hydrogens), `D<n>` heavy-atom degree, `H<n>` total hydrogens, `R`/`R<n>`
//! ring membership counted over SSSR rings, and charges. Inside brackets `!`
//! negates, `&` and adjacency are high-precedence AND, `,` is OR and `;` is
//! low-precedence AND, so `[R0;D2,D1]` reads `R0 AND (D2 OR D1)`.
//!
//! Bonds: `-` single, `=` double, `#` triple, `:` aromatic, `~` any; an
//! unwritten bond matches single or aromatic.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::molgraph::{Atom, BondOrder, Element, Molecule};

/// Embeddings beyond this count abort a match.
pub const EMBEDDING_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmartsError {
    #[error("SMARTS syntax error at position {position}: {message}")]
    SyntaxError { position: usize, message: String },
    #[error("unsupported SMARTS primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("unclosed SMARTS ring bond {0}")]
    UnclosedRing(u32),
    #[error("more than {cap} embeddings of `{pattern}`")]
    TooManyEmbeddings { pattern: String, cap: usize },
}

fn syntax(position: usize, message: impl Into<String>) -> SmartsError {
    SmartsError::SyntaxError {
        position,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtomPrimitive {
    Any,
    /// `aromatic: None` for `#n`, which matches either form.
    Element { element: Element, aromatic: Option<bool> },
    Aromatic,
    Aliphatic,
    TotalConnections(u8),
    Degree(u8),
    TotalHydrogens(u8),
    /// `None` for bare `R` (in any ring).
    RingCount(Option<u8>),
    Charge(i8),
}

impl AtomPrimitive {
    pub fn matches(&self, atom: &Atom) -> bool {
        match *self {
            AtomPrimitive::Any => true,
            AtomPrimitive::Element { element, aromatic } => {
                atom.element == element && aromatic.is_none_or(|a| a == atom.aromatic)
            }
            AtomPrimitive::Aromatic => atom.aromatic,
            AtomPrimitive::Aliphatic => !atom.aromatic,
            AtomPrimitive::TotalConnections(n) => atom.explicit_degree + atom.implicit_h == n,
            AtomPrimitive::Degree(n) => atom.explicit_degree == n,
            AtomPrimitive::TotalHydrogens(n) => atom.implicit_h == n,
            AtomPrimitive::RingCount(None) => atom.in_ring,
            AtomPrimitive::RingCount(Some(n)) => atom.ring_count == n,
            AtomPrimitive::Charge(q) => atom.formal_charge == q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtomExpr {
    Primitive(AtomPrimitive),
    Not(Box<AtomExpr>),
    And(Vec<AtomExpr>),
    Or(Vec<AtomExpr>),
}

impl AtomExpr {
    pub fn matches(&self, atom: &Atom) -> bool {
        match self {
            AtomExpr::Primitive(p) => p.matches(atom),
            AtomExpr::Not(e) => !e.matches(atom),
            AtomExpr::And(es) => es.iter().all(|e| e.matches(atom)),
            AtomExpr::Or(es) => es.iter().any(|e| e.matches(atom)),
        }
    }

    fn and(mut parts: Vec<AtomExpr>) -> AtomExpr {
        if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            AtomExpr::And(parts)
        }
    }

    fn or(mut parts: Vec<AtomExpr>) -> AtomExpr {
        if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            AtomExpr::Or(parts)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondExpr {
    Single,
    Double,
    Triple,
    Aromatic,
    Any,
    /// Unwritten bond: single or aromatic.
    SingleOrAromatic,
}

impl BondExpr {
    pub fn matches(self, order: BondOrder) -> bool {
        match self {
            BondExpr::Single => order == BondOrder::Single,
            BondExpr::Double => order == BondOrder::Double,
            BondExpr::Triple => order == BondOrder::Triple,
            BondExpr::Aromatic => order == BondOrder::Aromatic,
            BondExpr::Any => true,
            BondExpr::SingleOrAromatic => matches!(order, BondOrder::Single | BondOrder::Aromatic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternBond {
    pub begin: usize,
    pub end: usize,
    pub expr: BondExpr,
}

/// A parsed, connected SMARTS query graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmartsPattern {
    source: String,
    atoms: Vec<AtomExpr>,
    bonds: Vec<PatternBond>,
    // For atom k > 0: an earlier atom bonded to k.
    anchor: Vec<usize>,
    // For atom k: (earlier atom j, bond expr) for every bond between k and j < k.
    back_bonds: Vec<Vec<(usize, BondExpr)>>,
}

impl SmartsPattern {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn atoms(&self) -> &[AtomExpr] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[PatternBond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }
}

impl fmt::Display for SmartsPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    atoms: Vec<AtomExpr>,
    bonds: Vec<PatternBond>,
    prev: Option<usize>,
    pending: Option<BondExpr>,
    branches: Vec<usize>,
    rings: std::collections::BTreeMap<u32, (usize, Option<BondExpr>)>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.text[start..self.pos]).ok()?.parse().ok()
    }

    fn push_atom(&mut self, expr: AtomExpr, at: usize) -> Result<(), SmartsError> {
        self.atoms.push(expr);
        let idx = self.atoms.len() - 1;
        match self.prev {
            Some(prev) => {
                let expr = self.pending.take().unwrap_or(BondExpr::SingleOrAromatic);
                self.bonds.push(PatternBond { begin: prev, end: idx, expr });
            }
            None if self.pending.is_some() => return Err(syntax(at, "bond without preceding atom")),
            None => {}
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self, number: u32, at: usize) -> Result<(), SmartsError> {
        let cur = self.prev.ok_or_else(|| syntax(at, "ring closure without atom"))?;
        let sym = self.pending.take();
        match self.rings.remove(&number) {
            Some((open, open_sym)) => {
                if open == cur {
                    return Err(syntax(at, "ring closure to the same atom"));
                }
                let expr = match (open_sym, sym) {
                    (Some(a), Some(b)) if a != b => return Err(syntax(at, "conflicting ring bond")),
                    (a, b) => a.or(b).unwrap_or(BondExpr::SingleOrAromatic),
                };
                self.bonds.push(PatternBond { begin: open, end: cur, expr });
            }
            None => {
                self.rings.insert(number, (cur, sym));
            }
        }
        Ok(())
    }

    fn parse(mut self, source: &str) -> Result<SmartsPattern, SmartsError> {
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    let prev = self.prev.ok_or_else(|| syntax(at, "branch without atom"))?;
                    self.branches.push(prev);
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return Err(syntax(at, "dangling bond"));
                    }
                    self.prev = Some(self.branches.pop().ok_or_else(|| syntax(at, "unmatched ')'"))?);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'~' => {
                    if self.pending.is_some() {
                        return Err(SmartsError::UnsupportedPrimitive("compound bond expression".into()));
                    }
                    self.pending = Some(match c {
                        b'-' => BondExpr::Single,
                        b'=' => BondExpr::Double,
                        b'#' => BondExpr::Triple,
                        b':' => BondExpr::Aromatic,
                        _ => BondExpr::Any,
                    });
                    self.pos += 1;
                }
                b'@' | b'/' | b'\\' | b'!' | b'&' | b',' | b';' => {
                    return Err(SmartsError::UnsupportedPrimitive((c as char).to_string()))
                }
                b'.' => return Err(SmartsError::UnsupportedPrimitive(".".into())),
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure((c - b'0') as u32, at)?;
                }
                b'%' => {
                    self.pos += 1;
                    let number = self
                        .text
                        .get(self.pos..self.pos + 2)
                        .filter(|d| d.iter().all(u8::is_ascii_digit))
                        .and_then(|d| std::str::from_utf8(d).ok()?.parse().ok())
                        .ok_or_else(|| syntax(at, "expected two digits after '%'"))?;
                    self.pos += 2;
                    self.ring_closure(number, at)?;
                }
                b'[' => {
                    self.pos += 1;
                    let expr = self.low_and()?;
                    if self.peek() != Some(b']') {
                        return Err(syntax(self.pos, "expected ']'"));
                    }
                    self.pos += 1;
                    self.push_atom(expr, at)?;
                }
                _ => {
                    let expr = self.bare_atom()?;
                    self.push_atom(expr, at)?;
                }
            }
        }
        if self.pending.is_some() {
            return Err(syntax(self.text.len(), "dangling bond"));
        }
        if !self.branches.is_empty() {
            return Err(syntax(self.text.len(), "unclosed branch"));
        }
        if let Some((&n, _)) = self.rings.iter().next() {
            return Err(SmartsError::UnclosedRing(n));
        }
        if self.atoms.is_empty() {
            return Err(syntax(0, "empty pattern"));
        }
        Ok(finish(source, self.atoms, self.bonds))
    }

    fn bare_atom(&mut self) -> Result<AtomExpr, SmartsError> {
        let at = self.pos;
        let rest = &self.text[self.pos..];
        let (prim, len) = if rest.starts_with(b"Cl") {
            (element(Element::Cl, Some(false)), 2)
        } else if rest.starts_with(b"Br") {
            (element(Element::Br, Some(false)), 2)
        } else {
            let p = match rest[0] {
                b'*' => AtomPrimitive::Any,
                b'a' => AtomPrimitive::Aromatic,
                b'A' => AtomPrimitive::Aliphatic,
                b'B' => element(Element::B, Some(false)),
                b'C' => element(Element::C, Some(false)),
                b'N' => element(Element::N, Some(false)),
                b'O' => element(Element::O, Some(false)),
                b'P' => element(Element::P, Some(false)),
                b'S' => element(Element::S, Some(false)),
                b'F' => element(Element::F, Some(false)),
                b'I' => element(Element::I, Some(false)),
                b'b' => element(Element::B, Some(true)),
                b'c' => element(Element::C, Some(true)),
                b'n' => element(Element::N, Some(true)),
                b'o' => element(Element::O, Some(true)),
                b'p' => element(Element::P, Some(true)),
                b's' => element(Element::S, Some(true)),
                b'$' => return Err(SmartsError::UnsupportedPrimitive("$( recursive SMARTS".into())),
                c => return Err(syntax(at, format!("unexpected character '{}'", c as char))),
            };
            (p, 1)
        };
        self.pos += len;
        Ok(AtomExpr::Primitive(prim))
    }

    fn low_and(&mut self) -> Result<AtomExpr, SmartsError> {
        let mut parts = vec![self.or()?];
        while self.peek() == Some(b';') {
            self.pos += 1;
            parts.push(self.or()?);
        }
        Ok(AtomExpr::and(parts))
    }

    fn or(&mut self) -> Result<AtomExpr, SmartsError> {
        let mut parts = vec![self.high_and()?];
        while self.peek() == Some(b',') {
            self.pos += 1;
            parts.push(self.high_and()?);
        }
        Ok(AtomExpr::or(parts))
    }

    fn high_and(&mut self) -> Result<AtomExpr, SmartsError> {
        let mut parts = vec![self.unary()?];
        loop {
            match self.peek() {
                Some(b'&') => {
                    self.pos += 1;
                    parts.push(self.unary()?);
                }
                Some(b';' | b',' | b']') | None => break,
                Some(_) => parts.push(self.unary()?),
            }
        }
        Ok(AtomExpr::and(parts))
    }

    fn unary(&mut self) -> Result<AtomExpr, SmartsError> {
        if self.peek() == Some(b'!') {
            self.pos += 1;
            return Ok(AtomExpr::Not(Box::new(self.unary()?)));
        }
        self.primitive().map(AtomExpr::Primitive)
    }

    fn primitive(&mut self) -> Result<AtomPrimitive, SmartsError> {
        let at = self.pos;
        let Some(c) = self.peek() else {
            return Err(syntax(at, "unterminated bracket"));
        };
        let rest = &self.text[self.pos..];
        if c.is_ascii_uppercase() && rest.len() >= 2 && rest[1].is_ascii_lowercase() {
            let two = std::str::from_utf8(&rest[..2]).unwrap_or("");
            if let Some(el) = Element::from_symbol(two) {
                self.pos += 2;
                return Ok(element(el, Some(false)));
            }
        }
        self.pos += 1;
        let count = |p: &mut Self, default: u32| -> Result<u8, SmartsError> {
            let n = p.number().unwrap_or(default);
            u8::try_from(n).map_err(|_| syntax(at, "count out of range"))
        };
        let prim = match c {
            b'*' => AtomPrimitive::Any,
            b'a' => AtomPrimitive::Aromatic,
            b'A' => AtomPrimitive::Aliphatic,
            b'#' => {
                let z = self.number().ok_or_else(|| syntax(at, "expected atomic number"))?;
                let el = u8::try_from(z)
                    .ok()
                    .and_then(Element::from_atomic_number)
                    .ok_or_else(|| SmartsError::UnsupportedPrimitive(format!("#{z}")))?;
                element(el, None)
            }
            b'X' => AtomPrimitive::TotalConnections(count(self, 1)?),
            b'D' => AtomPrimitive::Degree(count(self, 1)?),
            b'H' => AtomPrimitive::TotalHydrogens(count(self, 1)?),
            b'R' => match self.number() {
                Some(n) => AtomPrimitive::RingCount(Some(
                    u8::try_from(n).map_err(|_| syntax(at, "count out of range"))?,
                )),
                None => AtomPrimitive::RingCount(None),
            },
            b'+' | b'-' => {
                let sign: i8 = if c == b'+' { 1 } else { -1 };
                let magnitude = match self.number() {
                    Some(n) => i8::try_from(n).map_err(|_| syntax(at, "charge out of range"))?,
                    None => {
                        let mut m = 1i8;
                        while self.peek() == Some(c) {
                            self.pos += 1;
                            m += 1;
                        }
                        m
                    }
                };
                AtomPrimitive::Charge(sign * magnitude)
            }
            b'c' => element(Element::C, Some(true)),
            b'n' => element(Element::N, Some(true)),
            b'o' => element(Element::O, Some(true)),
            b's' => element(Element::S, Some(true)),
            b'p' => element(Element::P, Some(true)),
            b'b' => element(Element::B, Some(true)),
            b'$' | b'r' | b'x' | b'v' | b'@' | b'^' | b'h' | b'%' | b'z' | b'Z' => {
                return Err(SmartsError::UnsupportedPrimitive((c as char).to_string()))
            }
            c if c.is_ascii_uppercase() => {
                let sym = (c as char).to_string();
                let el = Element::from_symbol(&sym)
                    .ok_or_else(|| SmartsError::UnsupportedPrimitive(sym.clone()))?;
                element(el, Some(false))
            }
            c => return Err(syntax(at, format!("unexpected character '{}'", c as char))),
        };
        Ok(prim)
    }
}

fn element(element: Element, aromatic: Option<bool>) -> AtomPrimitive {
    AtomPrimitive::Element { element, aromatic }
}

fn finish(source: &str, atoms: Vec<AtomExpr>, bonds: Vec<PatternBond>) -> SmartsPattern {
    let n = atoms.len();
    let mut anchor = vec![0; n];
    let mut back_bonds: Vec<Vec<(usize, BondExpr)>> = vec![Vec::new(); n];
    let mut anchored = vec![false; n];
    for b in &bonds {
        let (lo, hi) = if b.begin < b.end { (b.begin, b.end) } else { (b.end, b.begin) };
        back_bonds[hi].push((lo, b.expr));
        if !anchored[hi] {
            anchored[hi] = true;
            anchor[hi] = lo;
        }
    }
    SmartsPattern {
        source: source.to_string(),
        atoms,
        bonds,
        anchor,
        back_bonds,
    }
}

/// Parses a SMARTS pattern in the supported subset.
pub fn parse_smarts(text: &str) -> Result<SmartsPattern, SmartsError> {
    let text = text.trim();
    if !text.is_ascii() {
        return Err(syntax(0, "non-ASCII character"));
    }
    Parser {
        text: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: Default::default(),
    }
    .parse(text)
}

/// All embeddings of a pattern in a molecule.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    /// One tuple per embedding; entry `k` is the molecule atom matched by
    /// pattern atom `k`. Symmetric duplicates are kept.
    pub matches: Vec<Vec<usize>>,
    pub atom_union: BTreeSet<usize>,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Distinct embedding atom sets, in order of first occurrence.
    pub fn instances(&self) -> Vec<BTreeSet<usize>> {
        let mut out: Vec<BTreeSet<usize>> = Vec::new();
        for m in &self.matches {
            let set: BTreeSet<usize> = m.iter().copied().collect();
            if !out.contains(&set) {
                out.push(set);
            }
        }
        out
    }
}

struct Search<'p, 'm> {
    pattern: &'p SmartsPattern,
    mol: &'m Molecule,
    mapping: Vec<usize>,
    used: Vec<bool>,
    first_only: bool,
    found: Vec<Vec<usize>>,
    overflow: bool,
}

impl Search<'_, '_> {
    // Returns true when the search should stop.
    fn extend(&mut self, k: usize) -> bool {
        if k == self.pattern.atoms.len() {
            if self.found.len() == EMBEDDING_CAP {
                self.overflow = true;
                return true;
            }
            self.found.push(self.mapping.clone());
            return self.first_only;
        }
        let candidates: Vec<usize> = if k == 0 {
            (0..self.mol.atom_count()).collect()
        } else {
            let anchor_atom = self.mapping[self.pattern.anchor[k]];
            self.mol.neighbors(anchor_atom).iter().map(|&(n, _)| n).collect()
        };
        for cand in candidates {
            if self.used[cand] || !self.pattern.atoms[k].matches(self.mol.atom(cand)) {
                continue;
            }
            let bonds_ok = self.pattern.back_bonds[k].iter().all(|&(j, expr)| {
                self.mol
                    .bond_between(cand, self.mapping[j])
                    .is_some_and(|b| expr.matches(b.order))
            });
            if !bonds_ok {
                continue;
            }
            self.mapping[k] = cand;
            self.used[cand] = true;
            let stop = self.extend(k + 1);
            self.used[cand] = false;
            if stop {
                return true;
            }
        }
        false
    }
}

fn search<'a, 'b>(pattern: &'a SmartsPattern, mol: &'b Molecule, first_only: bool) -> Search<'a, 'b> {
    let mut s = Search {
        pattern,
        mol,
        mapping: vec![usize::MAX; pattern.atoms.len()],
        used: vec![false; mol.atom_count()],
        first_only,
        found: Vec::new(),
        overflow: false,
    };
    if pattern.atoms.len() <= mol.atom_count() {
        s.extend(0);
    }
    s
}

/// Enumerates every embedding, seeds in ascending molecule atom order and
/// extensions in ascending neighbour order.
pub fn find_matches(pattern: &SmartsPattern, mol: &Molecule) -> Result<MatchSet, SmartsError> {
    let s = search(pattern, mol, false);
    if s.overflow {
        return Err(SmartsError::TooManyEmbeddings {
            pattern: pattern.source.clone(),
            cap: EMBEDDING_CAP,
        });
    }
    let atom_union = s.found.iter().flatten().copied().collect();
    Ok(MatchSet {
        matches: s.found,
        atom_union,
    })
}

/// True when at least one embedding exists; stops at the first one.
pub fn has_match(pattern: &SmartsPattern, mol: &Molecule) -> bool {
    !search(pattern, mol, true).found.is_empty()
}

/// A named fragment from a `NAME<TAB>SMARTS` library.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub name: String,
    pub pattern: SmartsPattern,
}

#[derive(Debug, Error)]
pub enum FragmentFileError {
    #[error("line {line}: expected NAME<TAB>SMARTS")]
    Malformed { line: usize },
    #[error("line {line}: {source}")]
    Pattern { line: usize, source: SmartsError },
}

pub fn parse_fragments(text: &str) -> Result<Vec<Fragment>, FragmentFileError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, smarts) = line
            .split_once('\t')
            .ok_or(FragmentFileError::Malformed { line: i + 1 })?;
        let pattern = parse_smarts(smarts).map_err(|source| FragmentFileError::Pattern { line: i + 1, source })?;
        out.push(Fragment {
            name: name.trim().to_string(),
            pattern,
        });
    }
    Ok(out)
}

/// The shipped functional-group library.
pub fn default_fragments() -> Vec<Fragment> {
    parse_fragments(crate::FRAGMENTS_TSV).expect("shipped fragments parse")
}
