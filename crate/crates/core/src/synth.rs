//! Synthetic molecule libraries: an acyclic carbon backbone decorated with
//! functional-group motifs and decoy substituents drawn at configurable
//! (optionally conditional) rates.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{parse_smiles, MolError, Molecule};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("motif `{name}` does not parse: {source}")]
    BadMotif { name: String, source: MolError },
    #[error("draw {index} is conditioned on later draw {condition}")]
    BadCondition { index: usize, condition: usize },
    #[error("only {made} distinct molecules after {attempts} attempts")]
    Exhausted { made: usize, attempts: usize },
}

/// A substituent written as SMILES; its first atom bonds to the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub name: String,
    pub smiles: String,
}

impl Motif {
    pub fn new(name: &str, smiles: &str) -> Self {
        Motif {
            name: name.to_string(),
            smiles: smiles.to_string(),
        }
    }
}

/// Include `motif` with probability `p`, or, when `condition` names an
/// earlier draw, with `p` if that draw was included and `p_otherwise` if not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifDraw {
    pub motif: Motif,
    pub p: f64,
    pub condition: Option<usize>,
    pub p_otherwise: f64,
}

impl MotifDraw {
    pub fn independent(motif: Motif, p: f64) -> Self {
        MotifDraw {
            motif,
            p,
            condition: None,
            p_otherwise: p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_molecules: usize,
    pub seed: u64,
    pub id_prefix: String,
    pub min_backbone: usize,
    pub max_backbone: usize,
    pub draws: Vec<MotifDraw>,
    pub decoys: Vec<Motif>,
    /// Decoy count per molecule is uniform on `0..=max_decoys`.
    pub max_decoys: usize,
}

/// Substituent forms of the shipped functional groups.
pub fn group_motifs() -> Vec<Motif> {
    vec![
        Motif::new("alkene", "C=C"),
        Motif::new("alkyne", "C#C"),
        Motif::new("primary_amine", "N"),
        Motif::new("alcohol", "O"),
        Motif::new("ether", "OC"),
        Motif::new("carbonyl", "C(=O)C"),
        Motif::new("fluoride", "F"),
        Motif::new("naphthalene", "c1ccc2ccccc2c1"),
        Motif::new("phenyl", "c1ccccc1"),
    ]
}

/// Substituents that match none of the shipped functional groups.
pub fn decoy_motifs() -> Vec<Motif> {
    vec![
        Motif::new("methyl", "C"),
        Motif::new("ethyl", "CC"),
        Motif::new("chloride", "Cl"),
        Motif::new("bromide", "Br"),
        Motif::new("cyclohexyl", "C1CCCCC1"),
        Motif::new("pyridyl", "c1ccncc1"),
        Motif::new("dimethylamino", "N(C)C"),
        Motif::new("methylthio", "SC"),
        Motif::new("isopropyl", "C(C)C"),
    ]
}

pub fn motif(name: &str) -> Option<Motif> {
    group_motifs().into_iter().chain(decoy_motifs()).find(|m| m.name == name)
}

impl SynthConfig {
    /// Every functional group drawn independently with probability `p`.
    pub fn standard(n_molecules: usize, seed: u64, p: f64) -> Self {
        SynthConfig {
            n_molecules,
            seed,
            id_prefix: "SYN".to_string(),
            min_backbone: 3,
            max_backbone: 8,
            draws: group_motifs().into_iter().map(|m| MotifDraw::independent(m, p)).collect(),
            decoys: decoy_motifs(),
            max_decoys: 2,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        for (i, d) in self.draws.iter().enumerate() {
            if let Some(c) = d.condition {
                if c >= i {
                    return Err(SynthError::BadCondition { index: i, condition: c });
                }
            }
        }
        for m in self.draws.iter().map(|d| &d.motif).chain(&self.decoys) {
            parse_smiles(&m.smiles, &m.name).map_err(|source| SynthError::BadMotif {
                name: m.name.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Which draws were included, plus the molecule's SMILES.
#[derive(Debug, Clone)]
pub struct SynthMolecule {
    pub molecule: Molecule,
    pub included: Vec<bool>,
}

fn assemble(rng: &mut ChaCha8Rng, config: &SynthConfig, subs: &mut [&Motif]) -> String {
    subs.shuffle(rng);
    let lo = config.min_backbone.max(subs.len().div_ceil(2)).max(1);
    let hi = config.max_backbone.max(lo);
    let n = rng.gen_range(lo..=hi);
    let mut slots: Vec<Vec<&str>> = vec![Vec::new(); n];
    for s in subs.iter() {
        let open: Vec<usize> = (0..n).filter(|&i| slots[i].len() < 2).collect();
        let at = open[rng.gen_range(0..open.len())];
        slots[at].push(&s.smiles);
    }
    // Ring-closure digits inside motifs are local, so each branch reuses them.
    let mut out = String::new();
    for branches in &slots {
        out.push('C');
        for b in branches {
            out.push('(');
            out.push_str(b);
            out.push(')');
        }
    }
    out
}

/// Generates `n_molecules` distinct molecules with ids `<prefix><index>`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthMolecule>, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.n_molecules);
    let max_attempts = config.n_molecules * 50 + 1000;
    let mut attempts = 0;
    let width = config.n_molecules.max(1).to_string().len().max(6);
    while out.len() < config.n_molecules {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::Exhausted {
                made: out.len(),
                attempts: max_attempts,
            });
        }
        let mut included: Vec<bool> = Vec::with_capacity(config.draws.len());
        for d in &config.draws {
            let p = match d.condition {
                Some(c) if !included[c] => d.p_otherwise,
                _ => d.p,
            };
            included.push(rng.gen_bool(p.clamp(0.0, 1.0)));
        }
        let mut subs: Vec<&Motif> = config
            .draws
            .iter()
            .zip(&included)
            .filter(|(_, &inc)| inc)
            .map(|(d, _)| &d.motif)
            .collect();
        if !config.decoys.is_empty() {
            for _ in 0..rng.gen_range(0..=config.max_decoys) {
                subs.push(&config.decoys[rng.gen_range(0..config.decoys.len())]);
            }
        }
        let smiles = assemble(&mut rng, config, &mut subs);
        if !seen.insert(smiles.clone()) {
            continue;
        }
        let id = format!("{}{:0width$}", config.id_prefix, out.len() + 1);
        let molecule = parse_smiles(&smiles, &id).expect("assembled SMILES is valid");
        out.push(SynthMolecule { molecule, included });
    }
    Ok(out)
}

/// `SMILES<TAB>ID` lines.
pub fn library_text(molecules: &[SynthMolecule]) -> String {
    let mut s = String::new();
    for m in molecules {
        s.push_str(m.molecule.source_smiles());
        s.push('\t');
        s.push_str(m.molecule.id());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smarts::{default_fragments, has_match};

    #[test]
    fn motifs_match_their_fragment() {
        let frags = default_fragments();
        for m in group_motifs() {
            let mol = parse_smiles(&format!("CC({})C", m.smiles), "t").unwrap();
            let frag = frags.iter().find(|f| f.name == m.name).unwrap();
            assert!(has_match(&frag.pattern, &mol), "{}", m.name);
        }
        for d in decoy_motifs() {
            let mol = parse_smiles(&format!("C(C)({})C", d.smiles), "t").unwrap();
            for f in frags.iter().filter(|f| f.name != "unbranched_alkane") {
                assert!(!has_match(&f.pattern, &mol), "decoy {} matches {}", d.name, f.name);
            }
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let cfg = SynthConfig::standard(300, 4, 0.3);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(library_text(&a), library_text(&b));
        let smiles: HashSet<_> = a.iter().map(|m| m.molecule.source_smiles().to_string()).collect();
        assert_eq!(smiles.len(), 300);
        assert_eq!(a[0].molecule.id(), "SYN000001");
    }

    #[test]
    fn inclusion_implies_match() {
        let frags = default_fragments();
        let cfg = SynthConfig::standard(200, 9, 0.4);
        for m in generate(&cfg).unwrap() {
            for (d, &inc) in cfg.draws.iter().zip(&m.included) {
                let frag = frags.iter().find(|f| f.name == d.motif.name).unwrap();
                if inc {
                    assert!(has_match(&frag.pattern, &m.molecule), "{} in {}", d.motif.name, m.molecule.source_smiles());
                }
            }
        }
    }

    #[test]
    fn conditional_draws() {
        let mut cfg = SynthConfig::standard(400, 1, 0.0);
        cfg.draws = vec![
            MotifDraw::independent(motif("alcohol").unwrap(), 0.5),
            MotifDraw {
                motif: motif("fluoride").unwrap(),
                p: 1.0,
                condition: Some(0),
                p_otherwise: 0.0,
            },
        ];
        for m in generate(&cfg).unwrap() {
            assert_eq!(m.included[0], m.included[1]);
        }
        cfg.draws[1].condition = Some(1);
        assert!(matches!(generate(&cfg), Err(SynthError::BadCondition { .. })));
    }
}
