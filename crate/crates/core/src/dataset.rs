//! Negation-balanced datasets, the hash split, featurization and JSONL
//! persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{LogicExpr, StratumSignature};
use crate::molgraph::{BondOrder, Element, Molecule};
use crate::Scalar;

/// Bumped whenever the feature layout changes; checkpoints record it.
pub const FEATURIZATION_VERSION: u32 = 1;
pub const D_ATOM: usize = 16;
pub const D_PAIR: usize = 6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("empty molecule id")]
    EmptyId,
    #[error("stratum {signature}: {available} molecules available, {requested} requested")]
    InsufficientStratum {
        signature: StratumSignature,
        available: usize,
        requested: usize,
    },
    #[error("per-stratum count must be at least 1")]
    ZeroPerStratum,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("metadata file {path}: {message}")]
    Metadata { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(format!("unknown split `{other}` (expected train or heldout)")),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// FNV-1a 64 of the UTF-8 id, mod 10; bucket 0 is heldout.
pub fn assign_split(id: &str) -> Result<Split, DatasetError> {
    if id.is_empty() {
        return Err(DatasetError::EmptyId);
    }
    Ok(if fnv1a64(id.as_bytes()).is_multiple_of(10) {
        Split::Heldout
    } else {
        Split::Train
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub smiles: String,
    pub label: bool,
    pub stratum: StratumSignature,
    pub split: Split,
    /// Keys this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StratumCount {
    pub available: usize,
    pub selected: usize,
    pub train: usize,
    pub heldout: usize,
}

/// Build parameters and realized counts, stored next to the JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub logic_id: String,
    pub logic: String,
    pub per_stratum: usize,
    pub seed: u64,
    pub allow_short: bool,
    pub strata: BTreeMap<String, StratumCount>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: Option<DatasetMeta>,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Selected count per stratum signature, recomputed from the examples.
    pub fn stratum_counts(&self) -> BTreeMap<StratumSignature, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.stratum.clone()).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub per_stratum: usize,
    pub seed: u64,
    pub allow_short: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            per_stratum: 150,
            seed: 0,
            allow_short: false,
        }
    }
}

/// Samples `per_stratum` molecules without replacement from each of the
/// `2^k` leaf-match strata. Examples are grouped by stratum in ascending
/// signature order and keep library order within a stratum.
pub fn build_dataset(
    library: &[Molecule],
    logic_id: &str,
    logic: &LogicExpr,
    config: &BuildConfig,
) -> Result<Dataset, DatasetError> {
    if config.per_stratum == 0 {
        return Err(DatasetError::ZeroPerStratum);
    }
    let leaf_values: Vec<Vec<bool>> = library.par_iter().map(|m| logic.leaf_values(m)).collect();
    let mut members: BTreeMap<StratumSignature, Vec<usize>> = StratumSignature::all(logic.leaves().len())
        .into_iter()
        .map(|s| (s, Vec::new()))
        .collect();
    for (i, values) in leaf_values.iter().enumerate() {
        members
            .get_mut(&StratumSignature(values.clone()))
            .expect("every signature is pre-seeded")
            .push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut examples = Vec::new();
    let mut strata = BTreeMap::new();
    for (signature, pool) in &members {
        let take = if pool.len() < config.per_stratum {
            if !config.allow_short {
                return Err(DatasetError::InsufficientStratum {
                    signature: signature.clone(),
                    available: pool.len(),
                    requested: config.per_stratum,
                });
            }
            log::warn!(
                "stratum {signature}: only {} of {} molecules available",
                pool.len(),
                config.per_stratum
            );
            pool.len()
        } else {
            config.per_stratum
        };
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), take).into_iter().map(|k| pool[k]).collect();
        picked.sort_unstable();
        let mut count = StratumCount {
            available: pool.len(),
            selected: take,
            ..StratumCount::default()
        };
        for i in picked {
            let mol = &library[i];
            let split = assign_split(mol.id())?;
            match split {
                Split::Train => count.train += 1,
                Split::Heldout => count.heldout += 1,
            }
            examples.push(LabeledExample {
                id: mol.id().to_string(),
                smiles: mol.source_smiles().to_string(),
                label: logic.evaluate_with(&leaf_values[i]),
                stratum: signature.clone(),
                split,
                extra: serde_json::Map::new(),
            });
        }
        strata.insert(signature.to_string(), count);
    }
    Ok(Dataset {
        meta: Some(DatasetMeta {
            logic_id: logic_id.to_string(),
            logic: logic.to_string(),
            per_stratum: config.per_stratum,
            seed: config.seed,
            allow_short: config.allow_short,
            strata,
        }),
        examples,
    })
}

/// `<dataset>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the examples as JSONL and, when present, the metadata sidecar.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for e in &dataset.examples {
        let line = serde_json::to_string(e).expect("examples serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    if let Some(meta) = &dataset.meta {
        let mp = meta_path(path);
        let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
        fs::write(&mp, text + "\n").map_err(io_err(&mp))?;
    }
    Ok(())
}

pub fn parse_dataset(text: &str) -> Result<Vec<LabeledExample>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: LabeledExample = serde_json::from_str(line).map_err(|err| DatasetError::SchemaError {
            line: i + 1,
            message: err.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let examples = parse_dataset(&text)?;
    if examples.is_empty() {
        log::warn!("dataset {} is empty", path.display());
    }
    let mp = meta_path(path);
    let meta = if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        Some(serde_json::from_str(&text).map_err(|e| DatasetError::Metadata {
            path: mp.clone(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    Ok(Dataset { meta, examples })
}

/// Per-atom and per-bonded-pair feature rows, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T> {
    pub n_atoms: usize,
    pub d_atom: usize,
    pub d_pair: usize,
    pub atom_features: Vec<T>,
    pub pair_features: Vec<T>,
    /// One entry per bond, `(begin, end)`.
    pub pair_index: Vec<(usize, usize)>,
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn n_pairs(&self) -> usize {
        self.pair_index.len()
    }

    pub fn atom_row(&self, i: usize) -> &[T] {
        &self.atom_features[i * self.d_atom..(i + 1) * self.d_atom]
    }

    pub fn pair_row(&self, p: usize) -> &[T] {
        &self.pair_features[p * self.d_pair..(p + 1) * self.d_pair]
    }

    /// Same shape and pairs, all features zero: the attribution baseline.
    pub fn zeros_like(&self) -> Self {
        FeatureTensor {
            atom_features: vec![T::zero(); self.atom_features.len()],
            pair_features: vec![T::zero(); self.pair_features.len()],
            ..self.clone()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.atom_features.iter().chain(&self.pair_features).all(|v| v.is_zero())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_atoms == other.n_atoms
            && self.d_atom == other.d_atom
            && self.d_pair == other.d_pair
            && self.pair_index == other.pair_index
            && self.atom_features.len() == other.atom_features.len()
            && self.pair_features.len() == other.pair_features.len()
    }

    /// `baseline + alpha (self - baseline)`, entrywise.
    pub fn interpolate(baseline: &Self, x: &Self, alpha: T) -> Self {
        let lerp = |b: &[T], v: &[T]| b.iter().zip(v).map(|(&b, &v)| b + alpha * (v - b)).collect();
        FeatureTensor {
            atom_features: lerp(&baseline.atom_features, &x.atom_features),
            pair_features: lerp(&baseline.pair_features, &x.pair_features),
            ..x.clone()
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureTensor<U> {
        FeatureTensor {
            n_atoms: self.n_atoms,
            d_atom: self.d_atom,
            d_pair: self.d_pair,
            atom_features: self.atom_features.iter().map(|v| U::of(v.as_f64())).collect(),
            pair_features: self.pair_features.iter().map(|v| U::of(v.as_f64())).collect(),
            pair_index: self.pair_index.clone(),
        }
    }
}

fn element_slot(e: Element) -> usize {
    match e {
        Element::C => 0,
        Element::N => 1,
        Element::O => 2,
        Element::F => 3,
        Element::S => 4,
        Element::Cl => 5,
        Element::Br => 6,
        _ => 7,
    }
}

/// Featurization version 1.
///
/// Atom row: element one-hot {C,N,O,F,S,Cl,Br,other} (0..8), aromatic (8),
/// degree one-hot 1..4 with 4+ capped (9..13), hydrogens / 4 (13), in ring
/// (14), formal charge clamped to [-1, 1] (15).
///
/// Pair row: order one-hot {single,double,triple,aromatic} (0..4), both atoms
/// in a common ring (4), constant 1 (5).
pub fn featurize<T: Scalar>(mol: &Molecule) -> FeatureTensor<T> {
    let n = mol.atom_count();
    let mut atoms = vec![T::zero(); n * D_ATOM];
    for (i, atom) in mol.atoms().iter().enumerate() {
        let row = &mut atoms[i * D_ATOM..(i + 1) * D_ATOM];
        row[element_slot(atom.element)] = T::one();
        if atom.aromatic {
            row[8] = T::one();
        }
        let degree = mol.neighbors(i).len();
        if degree > 0 {
            row[9 + degree.min(4) - 1] = T::one();
        }
        row[13] = T::of(f64::from(atom.implicit_h) / 4.0);
        if atom.in_ring {
            row[14] = T::one();
        }
        row[15] = T::of(f64::from(atom.formal_charge.clamp(-1, 1)));
    }
    let mut pairs = vec![T::zero(); mol.bonds().len() * D_PAIR];
    let mut pair_index = Vec::with_capacity(mol.bonds().len());
    for (p, bond) in mol.bonds().iter().enumerate() {
        let row = &mut pairs[p * D_PAIR..(p + 1) * D_PAIR];
        let slot = match bond.order {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        };
        row[slot] = T::one();
        // A bond between two atoms of one ring is itself a ring bond.
        if bond.in_ring {
            row[4] = T::one();
        }
        row[5] = T::one();
        pair_index.push((bond.begin, bond.end));
    }
    FeatureTensor {
        n_atoms: n,
        d_atom: D_ATOM,
        d_pair: D_PAIR,
        atom_features: atoms,
        pair_features: pairs,
        pair_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::parse_logic;
    use crate::molgraph::parse_smiles;

    #[test]
    fn fnv_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(fnv1a64(b"ZINC00000001"), 0xaf9f7b2d8c95a94c);
        assert_eq!(assign_split("ZINC00000001").unwrap(), Split::Train);
        assert!(matches!(assign_split(""), Err(DatasetError::EmptyId)));
    }

    #[test]
    fn ethanol_features() {
        let t: FeatureTensor<f64> = featurize(&parse_smiles("CCO", "e").unwrap());
        let o = t.atom_row(2);
        let mut expected = [0.0; D_ATOM];
        expected[2] = 1.0;
        expected[9] = 1.0;
        expected[13] = 0.25;
        assert_eq!(o, expected);
        assert_eq!(t.pair_index, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn benzene_pairs() {
        let t: FeatureTensor<f64> = featurize(&parse_smiles("c1ccccc1", "b").unwrap());
        assert_eq!(t.n_pairs(), 6);
        for p in 0..6 {
            assert_eq!(t.pair_row(p), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        }
        let z = t.zeros_like();
        assert!(z.is_zero() && z.same_shape(&t));
    }

    #[test]
    fn degree_and_charge_encoding() {
        let t: FeatureTensor<f64> = featurize(&parse_smiles("CC(C)(C)C(C)(C)[N+](C)(C)C", "q").unwrap());
        // Quaternary carbon: degree 4 slot.
        assert_eq!(&t.atom_row(1)[9..13], [0.0, 0.0, 0.0, 1.0]);
        // Ammonium nitrogen: charge +1, degree 4.
        assert_eq!(t.atom_row(7)[1], 1.0);
        assert_eq!(t.atom_row(7)[15], 1.0);
        let single: FeatureTensor<f64> = featurize(&parse_smiles("C", "m").unwrap());
        assert_eq!(&single.atom_row(0)[9..13], [0.0; 4]);
        assert_eq!(single.atom_row(0)[13], 1.0);
    }

    fn toy_library() -> Vec<Molecule> {
        let smiles = ["CCF", "CCO", "OCCF", "CCC", "FCCCO", "CCCC", "CCCF", "CCCO"];
        (0..40)
            .map(|i| parse_smiles(smiles[i % smiles.len()], &format!("M{i:03}")).unwrap())
            .collect()
    }

    #[test]
    fn two_leaf_balance() {
        let logic = parse_logic("{[FX1]}&{[OX2H]}").unwrap();
        let lib = toy_library();
        let cfg = BuildConfig {
            per_stratum: 5,
            seed: 3,
            allow_short: false,
        };
        let ds = build_dataset(&lib, "t", &logic, &cfg).unwrap();
        assert_eq!(ds.examples.len(), 20);
        assert!(ds.stratum_counts().values().all(|&c| c == 5));
        for e in &ds.examples {
            assert_eq!(e.label, e.stratum.0 == [true, true]);
        }
        let again = build_dataset(&lib, "t", &logic, &cfg).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn insufficient_stratum() {
        let logic = parse_logic("c1ccc2ccccc2c1").unwrap();
        let lib = toy_library();
        let cfg = BuildConfig {
            per_stratum: 3,
            ..BuildConfig::default()
        };
        match build_dataset(&lib, "2", &logic, &cfg) {
            Err(DatasetError::InsufficientStratum {
                signature,
                available,
                requested,
            }) => {
                assert_eq!(signature.to_string(), "1");
                assert_eq!((available, requested), (0, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        let short = build_dataset(
            &lib,
            "2",
            &logic,
            &BuildConfig {
                allow_short: true,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(short.examples.len(), 3);
        assert_eq!(short.meta.unwrap().strata["1"].available, 0);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let logic = parse_logic("{[FX1]}&{[OX2H]}").unwrap();
        let mut ds = build_dataset(&toy_library(), "t", &logic, &BuildConfig { per_stratum: 2, ..Default::default() }).unwrap();
        ds.examples[0].extra.insert("note".into(), serde_json::json!({"k": [1, 2]}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let first = fs::read_to_string(&path).unwrap();
        write_dataset(&path, &back).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), first);

        let bad = "{\"id\":\"a\",\"smiles\":\"C\",\"label\":true,\"stratum\":\"1\",\"split\":\"train\"}\n{\"id\":\"b\",\"smi";
        match parse_dataset(bad) {
            Err(DatasetError::SchemaError { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let empty = dir.path().join("e.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(read_dataset(&empty).unwrap().examples.is_empty());
    }
}
