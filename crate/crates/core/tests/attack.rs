//! Attack search on hand-built toy models with known behaviour.

use bindlogic::attack::{search, AttackConfig, Guidance};
use bindlogic::attribution::{attribute_example, IgConfig};
use bindlogic::dataset::{LabeledExample, Split};
use bindlogic::logic::{evaluate, parse_logic, LogicExpr};
use bindlogic::molgraph::{parse_smiles, Molecule};
use bindlogic::nnet::{forward, Hyperparams, ModelParams};
use bindlogic::synth::{generate, motif, MotifDraw, SynthConfig};

const F_SLOT: usize = 3;

/// logit = 10 * (number of atoms with feature `slot`) - 5: positive exactly
/// when such an atom is present.
fn counting_model(slot: usize) -> ModelParams<f64> {
    let hyper = Hyperparams {
        hidden: 2,
        message_steps: 1,
        ..Hyperparams::default()
    };
    let mut p = ModelParams::zeros(hyper);
    p.w_in.data[slot] = 1.0;
    p.w_self[0].data[0] = 1.0;
    p.w_r1.data[0] = 1.0;
    p.w_r2[0] = 10.0;
    p.b_r2 = -5.0;
    p
}

fn scores(params: &ModelParams<f64>, mol: &Molecule) -> Vec<f64> {
    let e = LabeledExample {
        id: mol.id().to_string(),
        smiles: mol.source_smiles().to_string(),
        label: true,
        stratum: bindlogic::logic::StratumSignature(Vec::new()),
        split: Split::Heldout,
        extra: Default::default(),
    };
    let (raw, norm) = attribute_example(params, &e, &IgConfig::default()).unwrap();
    norm.unwrap_or(raw).aggregated
}

fn correctly_classified(params: &ModelParams<f64>, logic: &LogicExpr, mols: &[Molecule]) -> Vec<Molecule> {
    mols.iter()
        .filter(|m| {
            let p = forward(params, &bindlogic::dataset::featurize(m)).unwrap().probability;
            (p >= 0.5) == evaluate(logic, m)
        })
        .cloned()
        .collect()
}

fn biased_library() -> Vec<Molecule> {
    let mut cfg = SynthConfig::standard(120, 2, 0.2);
    cfg.draws.retain(|d| d.motif.name != "alcohol" && d.motif.name != "fluoride");
    cfg.draws.insert(0, MotifDraw::independent(motif("alcohol").unwrap(), 0.5));
    cfg.draws.insert(
        1,
        MotifDraw {
            motif: motif("fluoride").unwrap(),
            p: 0.95,
            condition: Some(0),
            p_otherwise: 0.0,
        },
    );
    generate(&cfg).unwrap().into_iter().map(|m| m.molecule).collect()
}

#[test]
fn shortcut_model_is_flipped_by_deleting_the_shortcut() {
    let model = counting_model(F_SLOT);
    let logic = parse_logic("[OX2H]").unwrap();
    let mol = parse_smiles("OCCC(F)CC", "t").unwrap();
    let out = search(&model, &mol, &logic, &scores(&model, &mol), &AttackConfig::default()).unwrap();
    assert!(!out.findings.is_empty());
    let f = &out.findings[0];
    assert!(f.label);
    assert!(f.original_prediction > 0.5 && f.perturbed_prediction < 0.5);
    let perturbed = parse_smiles(&f.perturbed_smiles, "p").unwrap();
    assert!(evaluate(&logic, &perturbed));
    assert!(f.edits.iter().any(|e| e.description.contains("delete terminal F")));
}

#[test]
fn faithful_model_yields_no_findings() {
    let model = counting_model(F_SLOT);
    let logic = parse_logic("[FX1]").unwrap();
    let lib = biased_library();
    let targets = correctly_classified(&model, &logic, &lib);
    assert!(targets.len() > 100);
    for mol in targets.iter().take(40) {
        let out = search(&model, mol, &logic, &scores(&model, mol), &AttackConfig::default()).unwrap();
        assert!(out.findings.is_empty(), "{}: {:?}", mol.source_smiles(), out.findings);
    }
}

#[test]
fn guidance_is_at_least_as_efficient_as_random() {
    let model = counting_model(F_SLOT);
    let logic = parse_logic("[OX2H]").unwrap();
    let targets: Vec<Molecule> = correctly_classified(&model, &logic, &biased_library())
        .into_iter()
        .filter(|m| evaluate(&logic, m))
        .take(12)
        .collect();
    assert!(targets.len() >= 10);
    let base = AttackConfig {
        max_edits: 2,
        beam: 3,
        reattribute: false,
        ..AttackConfig::default()
    };
    let rate = |guidance: Guidance| -> f64 {
        let cfg = AttackConfig { guidance, ..base.clone() };
        let (mut found, mut expanded) = (0usize, 0usize);
        for m in &targets {
            let out = search(&model, m, &logic, &scores(&model, m), &cfg).unwrap();
            found += out.findings.len();
            expanded += out.expansions;
        }
        found as f64 / expanded.max(1) as f64
    };
    let guided = rate(Guidance::Attribution);
    let random: Vec<f64> = (0..20).map(|seed| rate(Guidance::Random { seed })).collect();
    let mean = random.iter().sum::<f64>() / random.len() as f64;
    assert!(guided >= mean, "guided {guided} vs random mean {mean}");
}
