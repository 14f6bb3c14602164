//! Binding-logic expressions: `{A}&{B}`, `{A}|{B}`, `~{A}` with arbitrary
//! nesting, where the innermost braces hold SMARTS. A string without braces is
//! a single fragment.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::Molecule;
use crate::smarts::{find_matches, has_match, parse_smarts, Fragment, SmartsError, SmartsPattern};

/// Default cap on the number of labelings one polarity may expand into.
pub const DEFAULT_LABELING_CAP: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogicError {
    #[error("logic syntax error at position {position}: {message}")]
    SyntaxError { position: usize, message: String },
    #[error("fragment `{smarts}` at position {position}: {source}")]
    Leaf {
        position: usize,
        smarts: String,
        source: SmartsError,
    },
    #[error("{count} labeling combinations exceed the cap of {cap}")]
    CombinatorialLimit { count: u128, cap: usize },
    #[error(transparent)]
    Match(#[from] SmartsError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogicNode {
    /// Index into [`LogicExpr::leaves`].
    Leaf(usize),
    Not(Box<LogicNode>),
    And(Box<LogicNode>, Box<LogicNode>),
    Or(Box<LogicNode>, Box<LogicNode>),
}

#[derive(Debug, Clone)]
pub struct Leaf {
    pub smarts: String,
    pub name: Option<String>,
    pub pattern: SmartsPattern,
}

/// A parsed binding logic. Leaves are deduplicated by SMARTS text and kept in
/// order of first appearance, which is also the stratum bit order.
#[derive(Debug, Clone)]
pub struct LogicExpr {
    root: LogicNode,
    leaves: Vec<Leaf>,
}

impl LogicExpr {
    pub fn root(&self) -> &LogicNode {
        &self.root
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    /// Attaches fragment names from a library where the SMARTS text matches.
    pub fn with_fragment_names(mut self, fragments: &[Fragment]) -> Self {
        for leaf in &mut self.leaves {
            leaf.name = fragments
                .iter()
                .find(|f| f.pattern.source() == leaf.smarts)
                .map(|f| f.name.clone());
        }
        self
    }

    /// Human-readable form using fragment names where known.
    pub fn describe(&self) -> String {
        fn go(expr: &LogicExpr, node: &LogicNode, out: &mut String) {
            match node {
                LogicNode::Leaf(i) => {
                    let leaf = &expr.leaves[*i];
                    out.push_str(leaf.name.as_deref().unwrap_or(&leaf.smarts));
                }
                LogicNode::Not(c) => {
                    out.push_str("no ");
                    go(expr, c, out);
                }
                LogicNode::And(a, b) | LogicNode::Or(a, b) => {
                    let op = if matches!(node, LogicNode::And(..)) { " and " } else { " or " };
                    for (k, child) in [a, b].into_iter().enumerate() {
                        if k == 1 {
                            out.push_str(op);
                        }
                        let nested = matches!(**child, LogicNode::And(..) | LogicNode::Or(..));
                        if nested {
                            out.push('(');
                        }
                        go(expr, child, out);
                        if nested {
                            out.push(')');
                        }
                    }
                }
            }
        }
        let mut s = String::new();
        go(self, &self.root, &mut s);
        s
    }

    /// Per-leaf `has_match` values in leaf order.
    pub fn leaf_values(&self, mol: &Molecule) -> Vec<bool> {
        self.leaves.iter().map(|l| has_match(&l.pattern, mol)).collect()
    }

    /// Evaluates the tree given precomputed leaf values.
    pub fn evaluate_with(&self, values: &[bool]) -> bool {
        fn go(node: &LogicNode, values: &[bool]) -> bool {
            match node {
                LogicNode::Leaf(i) => values[*i],
                LogicNode::Not(c) => !go(c, values),
                LogicNode::And(a, b) => go(a, values) && go(b, values),
                LogicNode::Or(a, b) => go(a, values) || go(b, values),
            }
        }
        go(&self.root, values)
    }
}

impl fmt::Display for LogicExpr {
    /// Canonical string; parses back to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(expr: &LogicExpr, node: &LogicNode, out: &mut String) {
            match node {
                LogicNode::Leaf(i) => out.push_str(&expr.leaves[*i].smarts),
                LogicNode::Not(c) => {
                    out.push_str("~{");
                    go(expr, c, out);
                    out.push('}');
                }
                LogicNode::And(a, b) | LogicNode::Or(a, b) => {
                    out.push('{');
                    go(expr, a, out);
                    out.push_str(if matches!(node, LogicNode::And(..)) { "}&{" } else { "}|{" });
                    go(expr, b, out);
                    out.push('}');
                }
            }
        }
        let mut s = String::new();
        go(self, &self.root, &mut s);
        f.write_str(&s)
    }
}

struct LogicParser<'a> {
    text: &'a str,
    pos: usize,
    leaves: Vec<Leaf>,
}

impl LogicParser<'_> {
    fn error(&self, message: impl Into<String>) -> LogicError {
        LogicError::SyntaxError {
            position: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), LogicError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected '{}'", c as char)))
        }
    }

    fn leaf(&mut self, smarts: &str, position: usize) -> Result<LogicNode, LogicError> {
        let smarts = smarts.trim();
        if let Some(i) = self.leaves.iter().position(|l| l.smarts == smarts) {
            return Ok(LogicNode::Leaf(i));
        }
        let pattern = parse_smarts(smarts).map_err(|source| LogicError::Leaf {
            position,
            smarts: smarts.to_string(),
            source,
        })?;
        self.leaves.push(Leaf {
            smarts: smarts.to_string(),
            name: None,
            pattern,
        });
        Ok(LogicNode::Leaf(self.leaves.len() - 1))
    }

    fn expr(&mut self) -> Result<LogicNode, LogicError> {
        let mut node = self.operand()?;
        let mut op: Option<u8> = None;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(c @ (b'&' | b'|')) => {
                    if op.is_some_and(|o| o != c) {
                        return Err(self.error("mixed '&' and '|' need braces"));
                    }
                    op = Some(c);
                    self.pos += 1;
                    let rhs = self.operand()?;
                    node = if c == b'&' {
                        LogicNode::And(Box::new(node), Box::new(rhs))
                    } else {
                        LogicNode::Or(Box::new(node), Box::new(rhs))
                    };
                }
                _ => return Ok(node),
            }
        }
    }

    fn operand(&mut self) -> Result<LogicNode, LogicError> {
        self.skip_ws();
        match self.peek() {
            Some(b'~') => {
                self.pos += 1;
                self.expect(b'{')?;
                let inner = self.group()?;
                Ok(LogicNode::Not(Box::new(inner)))
            }
            Some(b'{') => {
                self.pos += 1;
                self.group()
            }
            _ => Err(self.error("expected '{' or '~'")),
        }
    }

    // After an opening brace: a nested expression or a SMARTS leaf, then '}'.
    fn group(&mut self) -> Result<LogicNode, LogicError> {
        self.skip_ws();
        let node = match self.peek() {
            Some(b'{' | b'~') => self.expr()?,
            Some(_) => {
                let start = self.pos;
                let len = self.text[start..]
                    .find(['}', '{'])
                    .ok_or_else(|| self.error("unclosed '{'"))?;
                self.pos = start + len;
                if self.peek() == Some(b'{') {
                    return Err(self.error("unexpected '{' inside fragment"));
                }
                let smarts = &self.text[start..start + len];
                if smarts.trim().is_empty() {
                    return Err(self.error("empty fragment"));
                }
                self.leaf(smarts, start)?
            }
            None => return Err(self.error("unclosed '{'")),
        };
        self.expect(b'}')?;
        Ok(node)
    }
}

/// Parses a binding-logic string.
pub fn parse_logic(text: &str) -> Result<LogicExpr, LogicError> {
    let trimmed = text.trim();
    let mut p = LogicParser {
        text: trimmed,
        pos: 0,
        leaves: Vec::new(),
    };
    if trimmed.is_empty() {
        return Err(p.error("empty logic"));
    }
    let root = if trimmed.starts_with('{') || trimmed.starts_with('~') {
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != trimmed.len() {
            return Err(p.error("trailing characters"));
        }
        root
    } else {
        p.leaf(trimmed, 0)?
    };
    Ok(LogicExpr {
        root,
        leaves: p.leaves,
    })
}

impl FromStr for LogicExpr {
    type Err = LogicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_logic(s)
    }
}

/// Boolean value of the logic on a molecule; leaves use `has_match`.
pub fn evaluate(expr: &LogicExpr, mol: &Molecule) -> bool {
    fn go(expr: &LogicExpr, node: &LogicNode, mol: &Molecule) -> bool {
        match node {
            LogicNode::Leaf(i) => has_match(&expr.leaves[*i].pattern, mol),
            LogicNode::Not(c) => !go(expr, c, mol),
            LogicNode::And(a, b) => go(expr, a, mol) && go(expr, b, mol),
            LogicNode::Or(a, b) => go(expr, a, mol) || go(expr, b, mol),
        }
    }
    go(expr, &expr.root, mol)
}

/// Bit `k` set when leaf `k` matches.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StratumSignature(pub Vec<bool>);

impl StratumSignature {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All `2^k` signatures in ascending bit-string order.
    pub fn all(k: usize) -> Vec<StratumSignature> {
        (0..1usize << k)
            .map(|v| StratumSignature((0..k).map(|bit| v >> (k - 1 - bit) & 1 == 1).collect()))
            .collect()
    }
}

impl fmt::Display for StratumSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for StratumSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("invalid stratum bit '{other}'")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(StratumSignature)
    }
}

impl Serialize for StratumSignature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StratumSignature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn stratum(expr: &LogicExpr, mol: &Molecule) -> StratumSignature {
    StratumSignature(expr.leaf_values(mol))
}

/// Which atoms should carry attribution for a molecule under a logic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: bool,
    /// Candidate label-1 atom sets for fragments required to be present.
    pub present_labelings: Vec<BTreeSet<usize>>,
    /// Candidate label-1 atom sets for fragments required to be absent.
    pub absent_labelings: Vec<BTreeSet<usize>>,
}

impl GroundTruth {
    /// Atoms appearing in any labeling of either polarity.
    pub fn labeled_atoms(&self) -> BTreeSet<usize> {
        self.present_labelings
            .iter()
            .chain(&self.absent_labelings)
            .flatten()
            .copied()
            .collect()
    }
}

/// Leaf indices occurring under an even (present) or odd (absent) number of
/// `Not` nodes. A leaf can have both polarities.
pub fn leaf_polarities(expr: &LogicExpr) -> (BTreeSet<usize>, BTreeSet<usize>) {
    fn go(node: &LogicNode, negated: bool, present: &mut BTreeSet<usize>, absent: &mut BTreeSet<usize>) {
        match node {
            LogicNode::Leaf(i) => {
                if negated {
                    absent.insert(*i);
                } else {
                    present.insert(*i);
                }
            }
            LogicNode::Not(c) => go(c, !negated, present, absent),
            LogicNode::And(a, b) | LogicNode::Or(a, b) => {
                go(a, negated, present, absent);
                go(b, negated, present, absent);
            }
        }
    }
    let mut present = BTreeSet::new();
    let mut absent = BTreeSet::new();
    go(&expr.root, false, &mut present, &mut absent);
    (present, absent)
}

fn expand_labelings(
    alternatives: &[BTreeSet<usize>],
    cap: usize,
) -> Result<Vec<BTreeSet<usize>>, LogicError> {
    let n = alternatives.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let count: u128 = if n >= 127 { u128::MAX } else { (1u128 << n) - 1 };
    if count > cap as u128 {
        return Err(LogicError::CombinatorialLimit { count, cap });
    }
    let mut out: Vec<BTreeSet<usize>> = Vec::new();
    for mask in 1u64..(1u64 << n) {
        let set: BTreeSet<usize> = alternatives
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        if !out.contains(&set) {
            out.push(set);
        }
    }
    Ok(out)
}

/// Ground-truth labelings: leaf polarity is the parity of its `Not`
/// ancestors, independent of the molecule's label. Each matched leaf
/// instance (distinct embedding atom set) of a polarity is one alternative;
/// the labelings are the unions over every nonempty subset of alternatives.
pub fn ground_truth(expr: &LogicExpr, mol: &Molecule, cap: usize) -> Result<GroundTruth, LogicError> {
    let (present, absent) = leaf_polarities(expr);
    let mut instances = Vec::with_capacity(expr.leaves.len());
    for leaf in &expr.leaves {
        instances.push(find_matches(&leaf.pattern, mol)?.instances());
    }
    let collect = |leaves: &BTreeSet<usize>| -> Vec<BTreeSet<usize>> {
        leaves.iter().flat_map(|&i| instances[i].iter().cloned()).collect()
    };
    let leaf_values: Vec<bool> = instances.iter().map(|i| !i.is_empty()).collect();
    Ok(GroundTruth {
        label: expr.evaluate_with(&leaf_values),
        present_labelings: expand_labelings(&collect(&present), cap)?,
        absent_labelings: expand_labelings(&collect(&absent), cap)?,
    })
}

#[derive(Debug, Error)]
pub enum LogicFileError {
    #[error("line {line}: expected ID<TAB>LOGIC")]
    Malformed { line: usize },
    #[error("line {line}: {source}")]
    Logic { line: usize, source: LogicError },
    #[error("duplicate logic id `{0}`")]
    DuplicateId(String),
}

/// A row of a logic file.
#[derive(Debug, Clone)]
pub struct NamedLogic {
    pub id: String,
    pub text: String,
    pub expr: LogicExpr,
}

pub fn parse_logic_file(text: &str) -> Result<Vec<NamedLogic>, LogicFileError> {
    let mut out: Vec<NamedLogic> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, logic) = line.split_once('\t').ok_or(LogicFileError::Malformed { line: i + 1 })?;
        let id = id.trim().to_string();
        if out.iter().any(|l| l.id == id) {
            return Err(LogicFileError::DuplicateId(id));
        }
        let expr = parse_logic(logic).map_err(|source| LogicFileError::Logic { line: i + 1, source })?;
        out.push(NamedLogic {
            id,
            text: logic.trim().to_string(),
            expr,
        });
    }
    Ok(out)
}

/// The shipped logics, with fragment names attached.
pub fn default_logics() -> Vec<NamedLogic> {
    let fragments = crate::smarts::default_fragments();
    parse_logic_file(crate::LOGICS_TSV)
        .expect("shipped logics parse")
        .into_iter()
        .map(|mut l| {
            l.expr = l.expr.with_fragment_names(&fragments);
            l
        })
        .collect()
}
