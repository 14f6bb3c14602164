//! Invariants checked over generated inputs.

mod common;

use std::collections::BTreeSet;

use bindlogic::attribution::{integrated_gradients, normalize, IgConfig, LinearReadout, PathRule};
use bindlogic::dataset::{assign_split, build_dataset, featurize, BuildConfig, Split, D_ATOM, D_PAIR};
use bindlogic::logic::{evaluate, ground_truth, parse_logic, stratum};
use bindlogic::metrics::{attribution_auc_molecule, roc_auc};
use bindlogic::molgraph::{is_isomorphic, parse_smiles, write_smiles, Molecule, MoleculeBuilder};
use bindlogic::nnet::{forward, input_gradients, Hyperparams, ModelParams};
use bindlogic::smarts::{default_fragments, find_matches, has_match, parse_smarts};
use bindlogic::synth::{generate, SynthConfig};
use proptest::prelude::*;
use std::sync::OnceLock;

fn corpus() -> &'static [Molecule] {
    static C: OnceLock<Vec<Molecule>> = OnceLock::new();
    C.get_or_init(common::corpus)
}

fn permuted(mol: &Molecule, perm: &[usize]) -> Molecule {
    // New atom k is old atom perm[k].
    let b = MoleculeBuilder::from_molecule(mol);
    let mut inv = vec![0; perm.len()];
    for (k, &old) in perm.iter().enumerate() {
        inv[old] = k;
    }
    let shuffled = MoleculeBuilder {
        atoms: perm.iter().map(|&old| b.atoms[old].clone()).collect(),
        bonds: b.bonds.iter().map(|&(x, y, o)| (inv[x], inv[y], o)).collect(),
    };
    shuffled.build(mol.id(), None).unwrap()
}

fn molecule_and_perm() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (0..100usize).prop_flat_map(|i| {
        let n = corpus()[i].atom_count();
        (Just(i), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

fn small_model(seed: u64) -> ModelParams<f64> {
    ModelParams::init(
        Hyperparams {
            hidden: 8,
            message_steps: 2,
            ..Hyperparams::default()
        },
        seed,
    )
}

const LEAVES: [&str; 6] = ["[OX2H]", "[FX1]", "[CX3]=O", "[NX3;H2]", "c1ccccc1", "[R0;D2,D1][R0;D2][R0;D2,D1]"];

#[derive(Debug, Clone)]
enum Expr {
    Leaf(usize),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    fn text(&self) -> String {
        match self {
            Expr::Leaf(i) => LEAVES[*i].to_string(),
            Expr::Not(a) => format!("~{{{}}}", a.text()),
            Expr::And(a, b) => format!("{{{}}}&{{{}}}", a.text(), b.text()),
            Expr::Or(a, b) => format!("{{{}}}|{{{}}}", a.text(), b.text()),
        }
    }

    fn truth(&self, v: &[bool]) -> bool {
        match self {
            Expr::Leaf(i) => v[*i],
            Expr::Not(a) => !a.truth(v),
            Expr::And(a, b) => a.truth(v) && b.truth(v),
            Expr::Or(a, b) => a.truth(v) || b.truth(v),
        }
    }
}

fn expr() -> impl Strategy<Value = Expr> {
    (0..LEAVES.len()).prop_map(Expr::Leaf).prop_recursive(4, 16, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::Not(Box::new(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Expr::Or(Box::new(a), Box::new(b))),
        ]
    })
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..14usize)
        .prop_flat_map(|n| (prop::collection::vec(0..6i32, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 4.0).collect(), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logic_matches_truth_table(e in expr(), i in 0..100usize) {
        let mol = &corpus()[i];
        let logic = parse_logic(&e.text()).unwrap();
        let values: Vec<bool> = LEAVES.iter().map(|s| has_match(&parse_smarts(s).unwrap(), mol)).collect();
        prop_assert_eq!(evaluate(&logic, mol), e.truth(&values));
    }

    #[test]
    fn de_morgan(a in expr(), b in expr(), i in 0..100usize) {
        let mol = &corpus()[i];
        let lhs = parse_logic(&Expr::Not(Box::new(Expr::And(Box::new(a.clone()), Box::new(b.clone())))).text()).unwrap();
        let rhs = parse_logic(&Expr::Or(Box::new(Expr::Not(Box::new(a.clone()))), Box::new(Expr::Not(Box::new(b.clone())))).text()).unwrap();
        prop_assert_eq!(evaluate(&lhs, mol), evaluate(&rhs, mol));
        let twice = parse_logic(&Expr::Not(Box::new(Expr::Not(Box::new(a.clone())))).text()).unwrap();
        prop_assert_eq!(evaluate(&twice, mol), evaluate(&parse_logic(&a.text()).unwrap(), mol));
    }

    #[test]
    fn canonical_text_reparses(e in expr()) {
        let logic = parse_logic(&e.text()).unwrap();
        let again = parse_logic(&logic.to_string()).unwrap();
        prop_assert_eq!(again.to_string(), logic.to_string());
        for mol in corpus().iter().step_by(7) {
            prop_assert_eq!(evaluate(&again, mol), evaluate(&logic, mol));
        }
    }

    #[test]
    fn smiles_round_trip(i in 0..100usize) {
        let mol = &corpus()[i];
        let written = write_smiles(mol);
        let again = parse_smiles(&written, "rt").unwrap();
        prop_assert!(is_isomorphic(mol, &again), "{} -> {}", mol.source_smiles(), written);
    }

    #[test]
    fn matching_is_permutation_equivariant((i, perm) in molecule_and_perm()) {
        let mol = &corpus()[i];
        let p = permuted(mol, &perm);
        let mut inv = vec![0; perm.len()];
        for (k, &old) in perm.iter().enumerate() {
            inv[old] = k;
        }
        for f in default_fragments() {
            let a = find_matches(&f.pattern, mol).unwrap().atom_union;
            let b = find_matches(&f.pattern, &p).unwrap().atom_union;
            let mapped: BTreeSet<usize> = a.iter().map(|&x| inv[x]).collect();
            prop_assert_eq!(mapped, b, "{}", f.name);
        }
    }

    #[test]
    fn network_and_ig_are_permutation_equivariant((i, perm) in molecule_and_perm(), seed in 0..1000u64) {
        let mol = &corpus()[i];
        let p = permuted(mol, &perm);
        let params = small_model(seed);
        let (x, xp) = (featurize::<f64>(mol), featurize::<f64>(&p));
        for (k, &old) in perm.iter().enumerate() {
            prop_assert_eq!(xp.atom_row(k), x.atom_row(old));
        }
        let fa = forward(&params, &x).unwrap().logit;
        let fb = forward(&params, &xp).unwrap().logit;
        prop_assert!((fa - fb).abs() <= 1e-9 * (1.0 + fa.abs()));
        let cfg = IgConfig { steps: 8, rule: PathRule::RightRiemann };
        let ra = integrated_gradients(&params, &x, &x.zeros_like(), &cfg).unwrap();
        let rb = integrated_gradients(&params, &xp, &xp.zeros_like(), &cfg).unwrap();
        for (k, &old) in perm.iter().enumerate() {
            prop_assert!((rb.aggregated[k] - ra.aggregated[old]).abs() <= 1e-9);
        }
    }

    #[test]
    fn aggregation_conserves_totals(i in 0..100usize, seed in 0..1000u64, steps in 1..20usize) {
        let mol = &corpus()[i];
        let params = small_model(seed);
        let x = featurize::<f64>(mol);
        let r = integrated_gradients(&params, &x, &x.zeros_like(), &IgConfig { steps, rule: PathRule::Midpoint }).unwrap();
        let totals: f64 = r.atom_totals.iter().chain(&r.pair_totals).sum();
        let agg: f64 = r.aggregated.iter().sum();
        prop_assert!((totals - agg).abs() <= 1e-12 * (1.0 + totals.abs()));
        let raw: f64 = r.raw_atom.iter().chain(&r.raw_pair).sum();
        prop_assert!((raw - agg).abs() <= 1e-12 * (1.0 + raw.abs()));
        if let Ok(n) = normalize(&r) {
            if !n.negative_sum {
                prop_assert!((n.aggregated.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_readout_ig_is_exact(i in 0..100usize, m in 1..100usize, w in prop::collection::vec(-2.0..2.0f64, D_ATOM + D_PAIR)) {
        let mol = &corpus()[i];
        let model = LinearReadout { atom_weights: w[..D_ATOM].to_vec(), pair_weights: w[D_ATOM..].to_vec() };
        let x = featurize::<f64>(mol);
        let r = integrated_gradients(&model, &x, &x.zeros_like(), &IgConfig { steps: m, rule: PathRule::RightRiemann }).unwrap();
        for (k, v) in r.raw_atom.iter().enumerate() {
            prop_assert!((v - w[k % D_ATOM] * x.atom_features[k]).abs() <= 1e-10);
        }
        for (k, v) in r.raw_pair.iter().enumerate() {
            prop_assert!((v - w[D_ATOM + k % D_PAIR] * x.pair_features[k]).abs() <= 1e-10);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences(i in 0..100usize, seed in 0..1000u64, pick in any::<prop::sample::Index>()) {
        let mol = &corpus()[i];
        let params = small_model(seed);
        let x = featurize::<f64>(mol);
        let (_, g) = input_gradients(&params, &x).unwrap();
        // Perturb one atom-feature entry.
        let k = pick.index(x.atom_features.len());
        let h = 1e-5;
        let mut plus = x.clone();
        plus.atom_features[k] += h;
        let mut minus = x.clone();
        minus.atom_features[k] -= h;
        let fd = (forward(&params, &plus).unwrap().probability - forward(&params, &minus).unwrap().probability) / (2.0 * h);
        prop_assert!((fd - g.atom_features[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "fd {} analytic {}", fd, g.atom_features[k]);
    }

    #[test]
    fn roc_matches_pairwise_oracle((s, l) in scores_and_labels()) {
        let auc = roc_auc(&s, &l).unwrap();
        prop_assert!((auc - pairwise_auc(&s, &l)).abs() <= 1e-12);
        // Swapping classes mirrors the curve.
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        prop_assert!((auc + roc_auc(&s, &flipped).unwrap() - 1.0).abs() <= 1e-12);
        // Invariant under strictly increasing transforms.
        let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert!((auc - roc_auc(&warped, &l).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn attribution_auc_is_max_over_labelings(i in 0..100usize, seed in 0..1000u64, e in expr()) {
        let mol = &corpus()[i];
        let logic = parse_logic(&e.text()).unwrap();
        let Ok(gt) = ground_truth(&logic, mol, 256) else { return Ok(()); };
        let params = small_model(seed);
        let x = featurize::<f64>(mol);
        let r = integrated_gradients(&params, &x, &x.zeros_like(), &IgConfig { steps: 4, rule: PathRule::RightRiemann }).unwrap();
        let auc = attribution_auc_molecule(&r.aggregated, &gt);
        let n = mol.atom_count();
        let best = |sets: &[BTreeSet<usize>], sign: f64| -> Option<f64> {
            sets.iter()
                .filter(|s| !s.is_empty() && s.len() < n)
                .map(|s| {
                    let labels: Vec<bool> = (0..n).map(|a| s.contains(&a)).collect();
                    let scores: Vec<f64> = r.aggregated.iter().map(|v| sign * v).collect();
                    pairwise_auc(&scores, &labels)
                })
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        };
        let p = best(&gt.present_labelings, 1.0);
        let a = best(&gt.absent_labelings, -1.0);
        prop_assert_eq!(auc.present_auc.is_some(), p.is_some());
        prop_assert_eq!(auc.absent_auc.is_some(), a.is_some());
        if let (Some(x), Some(y)) = (auc.present_auc, p) { prop_assert!((x - y).abs() <= 1e-12); }
        if let (Some(x), Some(y)) = (auc.absent_auc, a) { prop_assert!((x - y).abs() <= 1e-12); }
    }

    #[test]
    fn split_depends_only_on_id(id in "[A-Z]{3}[0-9]{1,8}") {
        prop_assert_eq!(assign_split(&id).unwrap(), assign_split(&id.clone()).unwrap());
    }
}

#[test]
fn dataset_labels_strata_and_splits_are_consistent() {
    let lib: Vec<Molecule> = generate(&SynthConfig::standard(2000, 3, 0.4))
        .unwrap()
        .into_iter()
        .map(|m| m.molecule)
        .collect();
    let logic = parse_logic("{{[OX2H]}&{~{[FX1]}}}|{[CX3]=O}").unwrap();
    let ds = build_dataset(&lib, "t", &logic, &BuildConfig { per_stratum: 40, seed: 1, allow_short: false }).unwrap();
    assert_eq!(ds.examples.len(), 8 * 40);
    let by_id: std::collections::HashMap<&str, &Molecule> = lib.iter().map(|m| (m.id(), m)).collect();
    let mut seen = BTreeSet::new();
    for e in &ds.examples {
        let mol = by_id[e.id.as_str()];
        assert!(seen.insert(e.id.clone()), "duplicate {}", e.id);
        assert_eq!(e.label, evaluate(&logic, mol));
        assert_eq!(e.stratum, stratum(&logic, mol));
        assert_eq!(e.split, assign_split(&e.id).unwrap());
    }
    let train: BTreeSet<_> = ds.split(Split::Train).map(|e| &e.id).collect();
    let held: BTreeSet<_> = ds.split(Split::Heldout).map(|e| &e.id).collect();
    assert!(train.is_disjoint(&held));
    assert_eq!(train.len() + held.len(), ds.examples.len());
}
