//! Attribution-guided search for logic-preserving edits that flip the model.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{integrated_gradients, normalize, IgConfig};
use crate::dataset::featurize;
use crate::logic::{evaluate, ground_truth, LogicExpr, DEFAULT_LABELING_CAP};
use crate::molgraph::{parse_smiles, write_smiles, AtomSpec, BondOrder, Element, MolError, Molecule, MoleculeBuilder};
use crate::nnet::{forward, ModelParams, NnetError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("molecule {id} is not classified correctly (label {label}, prediction {prediction:.4})")]
    NotCorrectlyClassified { id: String, label: bool, prediction: f64 },
    #[error("{0} attribution scores for a molecule of {1} atoms")]
    ScoreLength(usize, usize),
    #[error(transparent)]
    Model(#[from] NnetError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditKind {
    BondOrderChange { begin: usize, end: usize, from: BondOrder, to: BondOrder },
    InsertMethylene { begin: usize, end: usize },
    DeleteTerminalAtom { atom: usize },
    ElementSwap { atom: usize, from: Element, to: Element },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditMove {
    #[serde(flatten)]
    pub kind: EditKind,
    pub description: String,
}

impl EditMove {
    /// Atoms of the input molecule the move changes.
    pub fn touched(&self) -> Vec<usize> {
        match self.kind {
            EditKind::BondOrderChange { begin, end, .. } | EditKind::InsertMethylene { begin, end } => vec![begin, end],
            EditKind::DeleteTerminalAtom { atom } | EditKind::ElementSwap { atom, .. } => vec![atom],
        }
    }
}

fn order_name(o: BondOrder) -> &'static str {
    match o {
        BondOrder::Single => "single",
        BondOrder::Double => "double",
        BondOrder::Triple => "triple",
        BondOrder::Aromatic => "aromatic",
    }
}

fn bond_sum(mol: &Molecule, atom: usize) -> u8 {
    mol.neighbors(atom)
        .iter()
        .map(|&(_, b)| match mol.bonds()[b].order {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        })
        .sum()
}

fn lowest_valence(e: Element) -> u8 {
    e.default_valences().first().copied().unwrap_or(0)
}

/// Applies a move, returning the new molecule and, for each new atom, the
/// input atom it came from (`None` for an inserted carbon).
pub fn apply_edit(mol: &Molecule, mv: &EditMove) -> Result<(Molecule, Vec<Option<usize>>), MolError> {
    let mut b = MoleculeBuilder::from_molecule(mol);
    let mut origin: Vec<Option<usize>> = (0..mol.atom_count()).map(Some).collect();
    match mv.kind {
        EditKind::BondOrderChange { begin, end, to, .. } => {
            let k = b.bond_index(begin, end).ok_or(MolError::UnsupportedFeature("no such bond".into()))?;
            b.bonds[k].2 = to;
        }
        EditKind::InsertMethylene { begin, end } => {
            let k = b.bond_index(begin, end).ok_or(MolError::UnsupportedFeature("no such bond".into()))?;
            b.bonds.remove(k);
            let c = b.add_atom(AtomSpec::organic(Element::C, false));
            origin.push(None);
            b.add_bond(begin, c, BondOrder::Single);
            b.add_bond(c, end, BondOrder::Single);
        }
        EditKind::DeleteTerminalAtom { atom } => {
            b.remove_atom(atom);
            origin.remove(atom);
        }
        EditKind::ElementSwap { atom, to, .. } => {
            b.atoms[atom].element = to;
        }
    }
    Ok((b.build(mol.id(), None)?, origin))
}

/// Every valid single move in a fixed order: bond-order changes, methylene
/// insertions, terminal deletions, element swaps. Atoms with bracket-fixed
/// hydrogens are never touched, and no atom is pushed above its lowest
/// default valence unless it already was.
pub fn enumerate_edits(mol: &Molecule) -> Vec<EditMove> {
    let atoms = mol.atoms();
    let mut candidates = Vec::new();
    let plain = |i: usize| !atoms[i].fixed_h;

    for bond in mol.bonds() {
        let (a, b) = (bond.begin, bond.end);
        if bond.order == BondOrder::Aromatic || atoms[a].aromatic || atoms[b].aromatic || !plain(a) || !plain(b) {
            continue;
        }
        for to in [BondOrder::Single, BondOrder::Double, BondOrder::Triple] {
            if to == bond.order {
                continue;
            }
            let delta = to as i16 - bond.order as i16;
            let fits = |i: usize| {
                let now = bond_sum(mol, i);
                let next = (now as i16 + delta) as u8;
                delta < 0 || next <= lowest_valence(atoms[i].element).max(now)
            };
            if !fits(a) || !fits(b) {
                continue;
            }
            candidates.push(EditMove {
                kind: EditKind::BondOrderChange { begin: a, end: b, from: bond.order, to },
                description: format!(
                    "change bond {a}-{b} ({}{}) from {} to {}",
                    atoms[a].element,
                    atoms[b].element,
                    order_name(bond.order),
                    order_name(to)
                ),
            });
        }
    }
    for bond in mol.bonds() {
        let (a, b) = (bond.begin, bond.end);
        if bond.order != BondOrder::Single || !plain(a) || !plain(b) {
            continue;
        }
        candidates.push(EditMove {
            kind: EditKind::InsertMethylene { begin: a, end: b },
            description: format!("insert CH2 into bond {a}-{b} ({}{})", atoms[a].element, atoms[b].element),
        });
    }
    if mol.atom_count() > 1 {
        for (i, atom) in atoms.iter().enumerate() {
            let nbrs = mol.neighbors(i);
            if nbrs.len() != 1 || !plain(i) {
                continue;
            }
            let j = nbrs[0].0;
            // Stripping a substituent from an aromatic heteroatom would need
            // an explicit hydrogen to stay the same ring system.
            if !plain(j) || (atoms[j].aromatic && atoms[j].element != Element::C) {
                continue;
            }
            candidates.push(EditMove {
                kind: EditKind::DeleteTerminalAtom { atom: i },
                description: format!("delete terminal {} atom {i}", atom.element),
            });
        }
    }
    for (i, atom) in atoms.iter().enumerate() {
        if atom.aromatic || atom.formal_charge != 0 || !plain(i) {
            continue;
        }
        let targets: &[Element] = match atom.element {
            Element::C => &[Element::N, Element::O],
            Element::N | Element::O => &[Element::C],
            _ => &[],
        };
        for &to in targets {
            if bond_sum(mol, i) > lowest_valence(to) {
                continue;
            }
            candidates.push(EditMove {
                kind: EditKind::ElementSwap { atom: i, from: atom.element, to },
                description: format!("swap atom {i} from {} to {to}", atom.element),
            });
        }
    }
    candidates.retain(|mv| apply_edit(mol, mv).is_ok());
    candidates
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Guidance {
    /// Rank moves by attribution mass on atoms outside every labeling.
    Attribution,
    /// Seeded uniform ranking; the control for the guided search.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub max_edits: usize,
    pub beam: usize,
    pub result_cap: usize,
    /// Recompute attributions for every state kept in the beam.
    pub reattribute: bool,
    pub ig: IgConfig,
    pub guidance: Guidance,
    pub labeling_cap: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_edits: 3,
            beam: 8,
            result_cap: 20,
            reattribute: true,
            ig: IgConfig::default(),
            guidance: Guidance::Attribution,
            labeling_cap: DEFAULT_LABELING_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialFinding {
    pub original_id: String,
    pub original_smiles: String,
    pub perturbed_smiles: String,
    pub edits: Vec<EditMove>,
    pub original_prediction: f64,
    pub perturbed_prediction: f64,
    /// Logic label, the same for both molecules.
    pub label: bool,
    /// Sum over the trace of each move's guidance score.
    pub guidance_score: f64,
    pub machine_generated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub findings: Vec<AdversarialFinding>,
    /// Candidate molecules scored by the model.
    pub expansions: usize,
}

#[derive(Clone)]
struct State {
    mol: Molecule,
    scores: Vec<f64>,
    trace: Vec<EditMove>,
    guidance: f64,
}

/// Guidance for a move: attribution magnitude on touched atoms that lie
/// outside every ground-truth labeling.
pub fn guidance_score(mv: &EditMove, scores: &[f64], labeled: &BTreeSet<usize>) -> f64 {
    mv.touched()
        .into_iter()
        .filter(|a| !labeled.contains(a))
        .map(|a| scores.get(a).map_or(0.0, |s| s.abs()))
        .sum()
}

fn attribution_scores<T: Scalar>(params: &ModelParams<T>, mol: &Molecule, ig: &IgConfig) -> Option<Vec<f64>> {
    let x = featurize::<T>(mol);
    let raw = integrated_gradients(params, &x, &x.zeros_like(), ig).ok()?;
    let r = normalize(&raw).unwrap_or(raw);
    Some(r.aggregated.iter().map(|v| v.as_f64()).collect())
}

fn crosses(original: f64, p: f64) -> bool {
    (original >= 0.5) != (p >= 0.5)
}

/// Beam search over edit sequences. Each state ranks its moves (by guidance
/// or at random), scores the top `beam` children with the model, and the
/// `beam` children closest to 0.5 form the next level. A child whose
/// prediction crosses 0.5 with the logic label unchanged is a finding.
pub fn search<T: Scalar>(
    params: &ModelParams<T>,
    mol: &Molecule,
    logic: &LogicExpr,
    scores: &[f64],
    config: &AttackConfig,
) -> Result<SearchOutcome, AttackError> {
    if scores.len() != mol.atom_count() {
        return Err(AttackError::ScoreLength(scores.len(), mol.atom_count()));
    }
    let label = evaluate(logic, mol);
    let p0 = forward(params, &featurize::<T>(mol))?.probability.as_f64();
    if (p0 >= 0.5) != label {
        return Err(AttackError::NotCorrectlyClassified {
            id: mol.id().to_string(),
            label,
            prediction: p0,
        });
    }
    let mut rng = match config.guidance {
        Guidance::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Guidance::Attribution => None,
    };
    let mut seen: HashSet<String> = HashSet::from([write_smiles(mol)]);
    let mut beam = vec![State {
        mol: mol.clone(),
        scores: scores.to_vec(),
        trace: Vec::new(),
        guidance: 0.0,
    }];
    let mut outcome = SearchOutcome::default();
    let mut found: Vec<AdversarialFinding> = Vec::new();

    for _depth in 0..config.max_edits {
        let mut children: Vec<(State, f64)> = Vec::new();
        for state in &beam {
            let labeled = ground_truth(logic, &state.mol, config.labeling_cap)
                .map(|gt| gt.labeled_atoms())
                .unwrap_or_default();
            let mut moves: Vec<(EditMove, f64)> = enumerate_edits(&state.mol)
                .into_iter()
                .map(|mv| {
                    let g = guidance_score(&mv, &state.scores, &labeled);
                    (mv, g)
                })
                .collect();
            match rng.as_mut() {
                Some(r) => moves.shuffle(r),
                None => moves.sort_by(|a, b| b.1.total_cmp(&a.1)),
            }
            let mut picked = Vec::new();
            for (mv, g) in moves {
                if picked.len() == config.beam {
                    break;
                }
                let Ok((next, origin)) = apply_edit(&state.mol, &mv) else { continue };
                if evaluate(logic, &next) != label || !seen.insert(write_smiles(&next)) {
                    continue;
                }
                let inherited: Vec<f64> = origin.iter().map(|o| o.map_or(0.0, |k| state.scores[k])).collect();
                let mut trace = state.trace.clone();
                trace.push(mv);
                picked.push(State {
                    mol: next,
                    scores: inherited,
                    trace,
                    guidance: state.guidance + g,
                });
            }
            let preds: Vec<Result<f64, NnetError>> = picked
                .par_iter()
                .map(|s| forward(params, &featurize::<T>(&s.mol)).map(|p| p.probability.as_f64()))
                .collect();
            outcome.expansions += picked.len();
            for (s, p) in picked.into_iter().zip(preds) {
                let p = p?;
                if crosses(p0, p) {
                    found.push(AdversarialFinding {
                        original_id: mol.id().to_string(),
                        original_smiles: mol.source_smiles().to_string(),
                        perturbed_smiles: write_smiles(&s.mol),
                        edits: s.trace.clone(),
                        original_prediction: p0,
                        perturbed_prediction: p,
                        label,
                        guidance_score: s.guidance,
                        machine_generated: true,
                    });
                } else {
                    children.push((s, p));
                }
            }
        }
        if found.len() >= config.result_cap || children.is_empty() {
            break;
        }
        children.sort_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()));
        children.truncate(config.beam);
        beam = children.into_iter().map(|(s, _)| s).collect();
        if config.reattribute {
            let fresh: Vec<Option<Vec<f64>>> = beam
                .par_iter()
                .map(|s| attribution_scores(params, &s.mol, &config.ig))
                .collect();
            for (s, f) in beam.iter_mut().zip(fresh) {
                if let Some(f) = f {
                    s.scores = f;
                }
            }
        }
    }

    // Independent re-check from the written SMILES.
    found.retain(|f| match parse_smiles(&f.perturbed_smiles, &f.original_id) {
        Ok(m) => {
            let p = forward(params, &featurize::<T>(&m)).map(|p| p.probability.as_f64());
            evaluate(logic, &m) == label && p.is_ok_and(|p| crosses(p0, p))
        }
        Err(_) => false,
    });
    found.sort_by(|a, b| (b.perturbed_prediction - 0.5).abs().total_cmp(&(a.perturbed_prediction - 0.5).abs()));
    found.truncate(config.result_cap);
    outcome.findings = found;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::is_isomorphic;

    fn mol(s: &str) -> Molecule {
        parse_smiles(s, "t").unwrap()
    }

    #[test]
    fn ketone_edits() {
        let m = mol("CC(=O)C");
        let edits = enumerate_edits(&m);
        let to_single = edits
            .iter()
            .find(|e| matches!(e.kind, EditKind::BondOrderChange { begin: 1, end: 2, to: BondOrder::Single, .. }))
            .expect("C=O to C-O is valid");
        let (alcohol, _) = apply_edit(&m, to_single).unwrap();
        assert_eq!(alcohol.atom(2).implicit_h, 1);
        assert_eq!(alcohol.atom(1).implicit_h, 1);
        // C=O cannot become a triple bond on oxygen.
        assert!(!edits.iter().any(|e| matches!(e.kind, EditKind::BondOrderChange { to: BondOrder::Triple, begin: 1, end: 2, .. })));
    }

    #[test]
    fn ethane_deletion_leaves_methane() {
        let edits = enumerate_edits(&mol("CC"));
        let del: Vec<_> = edits.iter().filter(|e| matches!(e.kind, EditKind::DeleteTerminalAtom { .. })).collect();
        assert_eq!(del.len(), 2);
        let (m, origin) = apply_edit(&mol("CC"), del[0]).unwrap();
        assert_eq!(m.atom_count(), 1);
        assert_eq!(m.atom(0).implicit_h, 4);
        assert_eq!(origin, vec![Some(1)]);
        assert!(enumerate_edits(&mol("C")).iter().all(|e| !matches!(e.kind, EditKind::DeleteTerminalAtom { .. })));
    }

    #[test]
    fn benzene_has_no_bond_order_moves() {
        let edits = enumerate_edits(&mol("c1ccccc1"));
        assert!(edits.iter().all(|e| !matches!(e.kind, EditKind::BondOrderChange { .. })));
        assert!(edits.is_empty());
    }

    #[test]
    fn element_swaps_respect_valence() {
        let edits = enumerate_edits(&mol("CC(C)(C)C"));
        // The quaternary carbon cannot become N or O.
        assert!(!edits.iter().any(|e| matches!(e.kind, EditKind::ElementSwap { atom: 1, .. })));
        assert!(edits.iter().any(|e| matches!(e.kind, EditKind::ElementSwap { atom: 0, to: Element::O, .. })));
        // Charged and bracket atoms are left alone.
        let edits = enumerate_edits(&mol("CC[NH3+]"));
        assert!(!edits.iter().any(|e| e.touched().contains(&2)));
    }

    #[test]
    fn methylene_insertion_separates_amine() {
        let m = mol("NCc1ccccc1");
        let mv = enumerate_edits(&m)
            .into_iter()
            .find(|e| matches!(e.kind, EditKind::InsertMethylene { begin: 0, end: 1 }))
            .unwrap();
        let (out, origin) = apply_edit(&m, &mv).unwrap();
        assert!(is_isomorphic(&out, &mol("NCCc1ccccc1")));
        assert_eq!(origin.last(), Some(&None));
    }

    #[test]
    fn bond_order_reversal_is_isomorphic() {
        let m = mol("CC=CCO");
        for mv in enumerate_edits(&m) {
            if let EditKind::BondOrderChange { begin, end, from, to } = mv.kind {
                let (next, _) = apply_edit(&m, &mv).unwrap();
                let back = EditMove {
                    kind: EditKind::BondOrderChange { begin, end, from: to, to: from },
                    description: String::new(),
                };
                let (restored, _) = apply_edit(&next, &back).unwrap();
                assert!(is_isomorphic(&restored, &m));
            }
        }
    }

    #[test]
    fn guidance_ignores_labeled_atoms() {
        let mv = EditMove {
            kind: EditKind::InsertMethylene { begin: 0, end: 1 },
            description: String::new(),
        };
        let scores = [0.4, -0.3];
        assert_eq!(guidance_score(&mv, &scores, &BTreeSet::new()), 0.7);
        assert_eq!(guidance_score(&mv, &scores, &BTreeSet::from([0])), 0.3);
    }
}
