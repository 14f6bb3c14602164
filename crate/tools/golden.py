"""Regenerates crates/core/tests/data/golden_rdkit.json with RDKit.

Usage: python3 tools/golden.py
"""

import json
import re
from pathlib import Path

import rdkit
from rdkit import Chem

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "crates" / "core" / "data"
OUT = ROOT / "crates" / "core" / "tests" / "data"


def rows(path):
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            yield line.split("\t")


def main():
    corpus = [(smi, mid) for smi, mid in rows(OUT / "golden_corpus.smi")]
    mols = []
    for smi, mid in corpus:
        mol = Chem.MolFromSmiles(smi)
        assert mol is not None, smi
        mols.append(mol)

    molecules = []
    for (smi, mid), mol in zip(corpus, mols):
        ri = mol.GetRingInfo()
        molecules.append(
            {
                "id": mid,
                "smiles": smi,
                "atoms": [
                    {
                        "symbol": a.GetSymbol(),
                        "aromatic": a.GetIsAromatic(),
                        "total_h": a.GetTotalNumHs(),
                        "degree": a.GetDegree(),
                        "charge": a.GetFormalCharge(),
                        "in_ring": ri.NumAtomRings(a.GetIdx()) > 0,
                    }
                    for a in mol.GetAtoms()
                ],
                "ring_sizes": sorted(len(r) for r in Chem.GetSymmSSSR(mol)),
            }
        )

    def scan(smarts):
        patt = Chem.MolFromSmarts(smarts)
        assert patt is not None, smarts
        out = []
        for (_, mid), mol in zip(corpus, mols):
            hits = mol.GetSubstructMatches(patt, uniquify=False, maxMatches=100000)
            out.append(
                {
                    "id": mid,
                    "has_match": bool(hits),
                    "atom_union": sorted({i for h in hits for i in h}),
                }
            )
        return out

    patterns = [
        {"name": name, "smarts": smarts, "matches": scan(smarts)}
        for name, smarts in rows(DATA / "fragments.tsv")
    ]

    leaves = set()
    for _, logic in rows(DATA / "logics.tsv"):
        inner = re.findall(r"\{([^{}]*)\}", logic)
        leaves.update(inner if inner else [logic])
    leaf_rows = [
        {"smarts": s, "has_match": [m["has_match"] for m in scan(s)]}
        for s in sorted(leaves)
    ]

    golden = {
        "rdkit_version": rdkit.__version__,
        "molecules": molecules,
        "patterns": patterns,
        "leaves": leaf_rows,
    }
    (OUT / "golden_rdkit.json").write_text(json.dumps(golden, indent=1) + "\n")


if __name__ == "__main__":
    main()
