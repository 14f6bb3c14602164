#![allow(dead_code)]

use bindlogic::molgraph::{parse_library, Molecule};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct GoldenAtom {
    pub symbol: String,
    pub aromatic: bool,
    pub total_h: u8,
    pub degree: u8,
    pub charge: i8,
    pub in_ring: bool,
}

#[derive(Debug, Deserialize)]
pub struct GoldenMolecule {
    pub id: String,
    pub smiles: String,
    pub atoms: Vec<GoldenAtom>,
    pub ring_sizes: Vec<usize>,
}

#[derive(Debug, Deserialize)]
pub struct GoldenMatch {
    pub id: String,
    pub has_match: bool,
    pub atom_union: Vec<usize>,
}

#[derive(Debug, Deserialize)]
pub struct GoldenPattern {
    pub name: String,
    pub smarts: String,
    pub matches: Vec<GoldenMatch>,
}

#[derive(Debug, Deserialize)]
pub struct GoldenLeaf {
    pub smarts: String,
    pub has_match: Vec<bool>,
}

/// Reference-toolkit output for the 100-molecule corpus (see tools/golden.py).
#[derive(Debug, Deserialize)]
pub struct Golden {
    pub rdkit_version: String,
    pub molecules: Vec<GoldenMolecule>,
    pub patterns: Vec<GoldenPattern>,
    pub leaves: Vec<GoldenLeaf>,
}

pub fn golden() -> Golden {
    serde_json::from_str(include_str!("../data/golden_rdkit.json")).expect("golden file parses")
}

pub fn corpus() -> Vec<Molecule> {
    parse_library(include_str!("../data/golden_corpus.smi"), false)
        .expect("corpus parses")
        .molecules
}
