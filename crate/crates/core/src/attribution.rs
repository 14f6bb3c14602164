//! Integrated Gradients, pair-to-atom aggregation and normalization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, FeatureTensor, LabeledExample, Split};
use crate::molgraph::{parse_smiles, BondOrder, Molecule};
use crate::nnet::{forward, input_gradients, ModelParams, NnetError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at path step {step}")]
    NonFiniteGradient { step: usize },
    #[error("attribution sum {sum:e} is too close to zero to normalize")]
    DegenerateSum { sum: f64 },
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("every molecule failed; first error: {0}")]
    AllFailed(String),
    #[error(transparent)]
    Model(#[from] NnetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
}

/// A function of a feature tensor with an input gradient.
pub trait Attributable<T: Scalar>: Sync {
    fn value(&self, x: &FeatureTensor<T>) -> Result<T, AttributionError>;
    fn value_and_gradient(&self, x: &FeatureTensor<T>) -> Result<(T, FeatureTensor<T>), AttributionError>;
}

/// The network's predicted probability.
impl<T: Scalar> Attributable<T> for ModelParams<T> {
    fn value(&self, x: &FeatureTensor<T>) -> Result<T, AttributionError> {
        Ok(forward(self, x)?.probability)
    }

    fn value_and_gradient(&self, x: &FeatureTensor<T>) -> Result<(T, FeatureTensor<T>), AttributionError> {
        Ok(input_gradients(self, x)?)
    }
}

/// `F(x) = sum_i w . a_i + sum_p v . e_p`, a model whose path integral is
/// known in closed form.
#[derive(Debug, Clone)]
pub struct LinearReadout<T> {
    pub atom_weights: Vec<T>,
    pub pair_weights: Vec<T>,
}

impl<T: Scalar> LinearReadout<T> {
    fn check(&self, x: &FeatureTensor<T>) -> Result<(), AttributionError> {
        if x.d_atom != self.atom_weights.len() || x.d_pair != self.pair_weights.len() {
            return Err(AttributionError::ShapeMismatch("linear readout widths".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Attributable<T> for LinearReadout<T> {
    fn value(&self, x: &FeatureTensor<T>) -> Result<T, AttributionError> {
        self.check(x)?;
        let a: T = x.atom_features.chunks(x.d_atom.max(1)).flat_map(|r| r.iter().zip(&self.atom_weights).map(|(&v, &w)| v * w)).sum();
        let p: T = x.pair_features.chunks(x.d_pair.max(1)).flat_map(|r| r.iter().zip(&self.pair_weights).map(|(&v, &w)| v * w)).sum();
        Ok(a + p)
    }

    fn value_and_gradient(&self, x: &FeatureTensor<T>) -> Result<(T, FeatureTensor<T>), AttributionError> {
        let v = self.value(x)?;
        let mut g = x.zeros_like();
        for row in g.atom_features.chunks_mut(x.d_atom.max(1)) {
            row.copy_from_slice(&self.atom_weights);
        }
        for row in g.pair_features.chunks_mut(x.d_pair.max(1)) {
            row.copy_from_slice(&self.pair_weights);
        }
        Ok((v, g))
    }
}

/// Where along each of the `m` path segments the gradient is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathRule {
    /// `alpha_k = k / m`, k = 1..m.
    RightRiemann,
    /// `alpha_k = (k - 1/2) / m`.
    Midpoint,
}

impl std::str::FromStr for PathRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "right_riemann" => Ok(PathRule::RightRiemann),
            "midpoint" => Ok(PathRule::Midpoint),
            other => Err(format!("unknown path rule `{other}` (expected right_riemann or midpoint)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    pub steps: usize,
    pub rule: PathRule,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            steps: 90,
            rule: PathRule::RightRiemann,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult<T> {
    pub n_atoms: usize,
    pub d_atom: usize,
    pub d_pair: usize,
    pub pair_index: Vec<(usize, usize)>,
    /// IG per atom feature entry, row-major `[n_atoms x d_atom]`.
    pub raw_atom: Vec<T>,
    /// IG per pair feature entry, row-major `[n_pairs x d_pair]`.
    pub raw_pair: Vec<T>,
    pub atom_totals: Vec<T>,
    pub pair_totals: Vec<T>,
    /// `a_i + sum over pairs (i, j) of e_ij / 2`; divided by `sum` once
    /// normalized.
    pub aggregated: Vec<T>,
    /// Sum of the aggregated scores before normalization.
    pub sum: T,
    pub normalized: bool,
    /// The sum was negative, so the scores were left unnormalized.
    pub negative_sum: bool,
    pub prediction: T,
    pub baseline_prediction: T,
    /// `|sum raw - (F(x) - F(baseline))|`, before normalization.
    pub completeness_gap: T,
    pub steps: usize,
    pub rule: PathRule,
}

/// Integrated Gradients from `baseline` to `x` with `config.steps` samples.
pub fn integrated_gradients<T: Scalar, F: Attributable<T> + ?Sized>(
    model: &F,
    x: &FeatureTensor<T>,
    baseline: &FeatureTensor<T>,
    config: &IgConfig,
) -> Result<AttributionResult<T>, AttributionError> {
    if config.steps == 0 {
        return Err(AttributionError::ZeroSteps);
    }
    if !x.same_shape(baseline) {
        return Err(AttributionError::ShapeMismatch("input and baseline differ in shape".into()));
    }
    let m = T::of(config.steps as f64);
    let mut acc_atom = vec![T::zero(); x.atom_features.len()];
    let mut acc_pair = vec![T::zero(); x.pair_features.len()];
    for k in 1..=config.steps {
        let kk = T::of(k as f64);
        let alpha = match config.rule {
            PathRule::RightRiemann => kk / m,
            PathRule::Midpoint => (kk - T::of(0.5)) / m,
        };
        let point = FeatureTensor::interpolate(baseline, x, alpha);
        let (_, g) = model.value_and_gradient(&point)?;
        if g.atom_features.iter().chain(&g.pair_features).any(|v| !v.is_finite()) {
            return Err(AttributionError::NonFiniteGradient { step: k });
        }
        for (a, &v) in acc_atom.iter_mut().zip(&g.atom_features) {
            *a += v;
        }
        for (a, &v) in acc_pair.iter_mut().zip(&g.pair_features) {
            *a += v;
        }
    }
    let ig = |acc: &[T], xs: &[T], bs: &[T]| -> Vec<T> {
        acc.iter().zip(xs.iter().zip(bs)).map(|(&g, (&xv, &bv))| (xv - bv) * g / m).collect()
    };
    let raw_atom = ig(&acc_atom, &x.atom_features, &baseline.atom_features);
    let raw_pair = ig(&acc_pair, &x.pair_features, &baseline.pair_features);
    let atom_totals: Vec<T> = raw_atom.chunks(x.d_atom.max(1)).map(|r| r.iter().copied().sum()).take(x.n_atoms).collect();
    let pair_totals: Vec<T> = raw_pair.chunks(x.d_pair.max(1)).map(|r| r.iter().copied().sum()).take(x.n_pairs()).collect();
    let mut aggregated = atom_totals.clone();
    let half = T::of(0.5);
    for (&(i, j), &e) in x.pair_index.iter().zip(&pair_totals) {
        aggregated[i] += half * e;
        aggregated[j] += half * e;
    }
    let prediction = model.value(x)?;
    let baseline_prediction = model.value(baseline)?;
    let total: T = raw_atom.iter().chain(&raw_pair).copied().sum();
    let sum: T = aggregated.iter().copied().sum();
    Ok(AttributionResult {
        n_atoms: x.n_atoms,
        d_atom: x.d_atom,
        d_pair: x.d_pair,
        pair_index: x.pair_index.clone(),
        raw_atom,
        raw_pair,
        atom_totals,
        pair_totals,
        aggregated,
        sum,
        normalized: false,
        negative_sum: false,
        prediction,
        baseline_prediction,
        completeness_gap: (total - (prediction - baseline_prediction)).abs(),
        steps: config.steps,
        rule: config.rule,
    })
}

pub const DEGENERATE_SUM: f64 = 1e-8;

/// Divides the aggregated scores by their sum. A negative sum would reverse
/// the score order, so such results are returned unnormalized with
/// `negative_sum` set.
pub fn normalize<T: Scalar>(result: &AttributionResult<T>) -> Result<AttributionResult<T>, AttributionError> {
    let sum: T = result.aggregated.iter().copied().sum();
    if sum.abs().as_f64() <= DEGENERATE_SUM {
        return Err(AttributionError::DegenerateSum { sum: sum.as_f64() });
    }
    let mut out = result.clone();
    out.sum = sum;
    if sum < T::zero() {
        out.negative_sum = true;
        return Ok(out);
    }
    for v in &mut out.aggregated {
        *v = *v / sum;
    }
    out.normalized = true;
    Ok(out)
}

/// One molecule of a batch attribution run, as stored in JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub id: String,
    pub smiles: String,
    pub label: bool,
    pub prediction: Option<f64>,
    pub baseline_prediction: Option<f64>,
    pub completeness_gap: Option<f64>,
    pub m: usize,
    pub rule: PathRule,
    /// Sum of aggregated scores before normalization.
    pub sum: Option<f64>,
    pub normalized: bool,
    pub negative_sum: bool,
    pub aggregated: Vec<f64>,
    pub pair_index: Vec<(usize, usize)>,
    pub pair_totals: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exclusion: Option<String>,
}

impl AttributionRecord {
    fn from_result<T: Scalar>(e: &LabeledExample, r: &AttributionResult<T>, config: &IgConfig, exclusion: Option<String>) -> Self {
        AttributionRecord {
            id: e.id.clone(),
            smiles: e.smiles.clone(),
            label: e.label,
            prediction: Some(r.prediction.as_f64()),
            baseline_prediction: Some(r.baseline_prediction.as_f64()),
            completeness_gap: Some(r.completeness_gap.as_f64()),
            m: config.steps,
            rule: config.rule,
            sum: Some(r.sum.as_f64()),
            normalized: r.normalized,
            negative_sum: r.negative_sum,
            aggregated: r.aggregated.iter().map(|v| v.as_f64()).collect(),
            pair_index: r.pair_index.clone(),
            pair_totals: r.pair_totals.iter().map(|v| v.as_f64()).collect(),
            exclusion,
        }
    }

    fn failed(e: &LabeledExample, config: &IgConfig, reason: String) -> Self {
        AttributionRecord {
            id: e.id.clone(),
            smiles: e.smiles.clone(),
            label: e.label,
            prediction: None,
            baseline_prediction: None,
            completeness_gap: None,
            m: config.steps,
            rule: config.rule,
            sum: None,
            normalized: false,
            negative_sum: false,
            aggregated: Vec::new(),
            pair_index: Vec::new(),
            pair_totals: Vec::new(),
            exclusion: Some(reason),
        }
    }

    /// Scores usable for attribution-AUC, or the reason there are none.
    pub fn scores(&self) -> Result<&[f64], String> {
        match &self.exclusion {
            Some(reason) => Err(reason.clone()),
            None => Ok(&self.aggregated),
        }
    }
}

/// Raw IG and its normalization, which can fail on its own.
pub type RawAndNormalized<T> = (AttributionResult<T>, Result<AttributionResult<T>, AttributionError>);

/// Attributes one example against its zero baseline and normalizes.
pub fn attribute_example<T: Scalar>(
    params: &ModelParams<T>,
    example: &LabeledExample,
    config: &IgConfig,
) -> Result<RawAndNormalized<T>, AttributionError> {
    let mol = parse_smiles(&example.smiles, &example.id).map_err(|e| AttributionError::ShapeMismatch(format!("{}: {e}", example.id)))?;
    let x = crate::dataset::featurize::<T>(&mol);
    let raw = integrated_gradients(params, &x, &x.zeros_like(), config)?;
    let normalized = normalize(&raw);
    Ok((raw, normalized))
}

/// Attributes every example of `split` in parallel, keeping input order.
/// Failed or degenerate molecules are recorded with an exclusion reason; the
/// call fails only when every molecule fails.
pub fn attribute_dataset<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    split: Split,
    config: &IgConfig,
) -> Result<Vec<AttributionRecord>, AttributionError> {
    let examples: Vec<&LabeledExample> = dataset.split(split).collect();
    let records: Vec<AttributionRecord> = examples
        .par_iter()
        .map(|e| match attribute_example(params, e, config) {
            Ok((_, Ok(norm))) => AttributionRecord::from_result(e, &norm, config, None),
            Ok((raw, Err(err))) => AttributionRecord::from_result(e, &raw, config, Some(err.to_string())),
            Err(err) => AttributionRecord::failed(e, config, err.to_string()),
        })
        .collect();
    for r in &records {
        if let Some(reason) = &r.exclusion {
            log::warn!("molecule {} excluded: {reason}", r.id);
        }
    }
    if !records.is_empty() && records.iter().all(|r| r.prediction.is_none()) {
        return Err(AttributionError::AllFailed(records[0].exclusion.clone().unwrap_or_default()));
    }
    Ok(records)
}

pub fn write_attributions(path: &Path, records: &[AttributionRecord]) -> Result<(), AttributionError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("records serialize"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attributions(path: &Path) -> Result<Vec<AttributionRecord>, AttributionError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AttributionError::SchemaError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Diverging colour for a score: `t = score / scale` clipped to [-1, 1];
/// t = 0 is white, t = 1 pure red `#ff0000`, t = -1 pure blue `#0000ff`,
/// linear in each channel in between.
pub fn diverging_color(score: f64, scale: f64) -> String {
    let t = if scale > 0.0 { (score / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    let (r, g, b) = if t >= 0.0 { (255, fade(t), fade(t)) } else { (fade(t), fade(t), 255) };
    format!("#{r:02x}{g:02x}{b:02x}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapNode {
    pub index: usize,
    pub element: String,
    pub aromatic: bool,
    pub score: f64,
    pub color: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapEdge {
    pub source: usize,
    pub target: usize,
    pub order: String,
    pub score: f64,
    pub color: String,
}

/// Node/edge list with red (positive) to blue (negative) colours.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heatmap {
    pub id: String,
    pub smiles: String,
    pub prediction: Option<f64>,
    /// Largest absolute node score; maps to full saturation.
    pub scale: f64,
    pub color_rule: String,
    pub nodes: Vec<HeatmapNode>,
    pub edges: Vec<HeatmapEdge>,
}

pub const COLOR_RULE: &str = "t = clamp(score / scale, -1, 1); t >= 0 -> rgb(255, 255(1-t), 255(1-t)); t < 0 -> rgb(255(1+t), 255(1+t), 255)";

pub fn heatmap(mol: &Molecule, record: &AttributionRecord) -> Heatmap {
    let scale = record.aggregated.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let nodes = mol
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let score = record.aggregated.get(i).copied().unwrap_or(0.0);
            HeatmapNode {
                index: i,
                element: a.element.symbol().to_string(),
                aromatic: a.aromatic,
                score,
                color: diverging_color(score, scale),
            }
        })
        .collect();
    let pair_scale = record.pair_totals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edges = mol
        .bonds()
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let score = record.pair_totals.get(k).copied().unwrap_or(0.0);
            HeatmapEdge {
                source: b.begin,
                target: b.end,
                order: match b.order {
                    BondOrder::Single => "single",
                    BondOrder::Double => "double",
                    BondOrder::Triple => "triple",
                    BondOrder::Aromatic => "aromatic",
                }
                .to_string(),
                score,
                color: diverging_color(score, pair_scale),
            }
        })
        .collect();
    Heatmap {
        id: record.id.clone(),
        smiles: record.smiles.clone(),
        prediction: record.prediction,
        scale,
        color_rule: COLOR_RULE.to_string(),
        nodes,
        edges,
    }
}
