use std::fs;
use std::path::{Path, PathBuf};

use bindlogic::dataset::DatasetMeta;
use bindlogic::metrics::AttributionAucReport;
use serde::Serialize;

use crate::layout;
use crate::{CliError, Evaluation};

const REQUIRED: [&str; 3] = [layout::DATASET_META, layout::EVALUATION, layout::AUC_REPORT];

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub logic_id: String,
    pub logic: String,
    pub model_auc: f64,
    pub attribution_auc: Option<f64>,
    pub n_included: usize,
    pub n_excluded: usize,
    pub dir: String,
}

fn has_any(dir: &Path) -> bool {
    REQUIRED.iter().any(|f| dir.join(f).exists())
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Pipeline directories under `out_dir` (or `out_dir` itself).
fn run_dirs(out_dir: &Path) -> Vec<PathBuf> {
    if has_any(out_dir) {
        return vec![out_dir.to_path_buf()];
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(out_dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir() && has_any(p))
        .collect();
    dirs.sort();
    dirs
}

pub fn collect(out_dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    let dirs = run_dirs(out_dir);
    let candidates = if dirs.is_empty() { vec![out_dir.to_path_buf()] } else { dirs };
    let missing: Vec<String> = candidates
        .iter()
        .flat_map(|d| REQUIRED.iter().map(move |f| d.join(f)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("MissingArtifacts: {}", missing.join(", "))));
    }
    let mut rows = Vec::new();
    for d in candidates {
        let meta: DatasetMeta = read(&d.join(layout::DATASET_META))?;
        let eval: Evaluation = read(&d.join(layout::EVALUATION))?;
        let auc: AttributionAucReport = read(&d.join(layout::AUC_REPORT))?;
        rows.push(ReportRow {
            logic_id: meta.logic_id,
            logic: meta.logic,
            model_auc: eval.model_auc,
            attribution_auc: auc.dataset_mean,
            n_included: auc.n_included,
            n_excluded: auc.n_excluded,
            dir: d.display().to_string(),
        });
    }
    rows.sort_by(|a, b| match (a.logic_id.parse::<u64>(), b.logic_id.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.logic_id.cmp(&b.logic_id),
    });
    Ok(rows)
}

pub fn table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.logic.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<4} {:<width$} {:>9} {:>15} {:>8}\n",
        "id", "logic", "model AUC", "attribution AUC", "excluded"
    );
    for r in rows {
        let attr = r.attribution_auc.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        s.push_str(&format!(
            "{:<4} {:<width$} {:>9.3} {:>15} {:>8}\n",
            r.logic_id, r.logic, r.model_auc, attr, r.n_excluded
        ));
    }
    s
}
