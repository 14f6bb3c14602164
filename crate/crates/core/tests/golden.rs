//! Parser, ring perception and SMARTS matching against reference-toolkit
//! output on the golden corpus.

mod common;

use std::collections::BTreeSet;

use bindlogic::smarts::{default_fragments, find_matches, has_match, parse_smarts};

#[test]
fn atoms_agree_with_reference() {
    let golden = common::golden();
    let corpus = common::corpus();
    assert_eq!(corpus.len(), 100);
    for (mol, g) in corpus.iter().zip(&golden.molecules) {
        assert_eq!(mol.id(), g.id);
        assert_eq!(mol.atom_count(), g.atoms.len(), "{}", g.smiles);
        for (i, (a, ga)) in mol.atoms().iter().zip(&g.atoms).enumerate() {
            let ctx = format!("{} atom {i}", g.smiles);
            assert_eq!(a.element.symbol(), ga.symbol, "{ctx}");
            assert_eq!(a.aromatic, ga.aromatic, "{ctx}");
            assert_eq!(a.implicit_h, ga.total_h, "{ctx}");
            assert_eq!(a.explicit_degree, ga.degree, "{ctx}");
            assert_eq!(a.formal_charge, ga.charge, "{ctx}");
            assert_eq!(a.in_ring, ga.in_ring, "{ctx}");
        }
        let mut sizes: Vec<usize> = mol.rings().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, g.ring_sizes, "{}", g.smiles);
    }
}

#[test]
fn fragment_matches_agree_with_reference() {
    let golden = common::golden();
    let corpus = common::corpus();
    let fragments = default_fragments();
    assert_eq!(golden.patterns.len(), 10);
    for gp in &golden.patterns {
        let frag = fragments.iter().find(|f| f.name == gp.name).unwrap();
        assert_eq!(frag.pattern.source(), gp.smarts);
        for (mol, gm) in corpus.iter().zip(&gp.matches) {
            let ms = find_matches(&frag.pattern, mol).unwrap();
            assert_eq!(!ms.is_empty(), gm.has_match, "{} on {}", gp.name, mol.source_smiles());
            let expected: BTreeSet<usize> = gm.atom_union.iter().copied().collect();
            assert_eq!(ms.atom_union, expected, "{} on {}", gp.name, mol.source_smiles());
        }
    }
}

#[test]
fn logic_leaves_agree_with_reference() {
    let golden = common::golden();
    let corpus = common::corpus();
    for leaf in &golden.leaves {
        let p = parse_smarts(&leaf.smarts).unwrap();
        for (mol, &expected) in corpus.iter().zip(&leaf.has_match) {
            assert_eq!(has_match(&p, mol), expected, "{} on {}", leaf.smarts, mol.source_smiles());
        }
    }
}
