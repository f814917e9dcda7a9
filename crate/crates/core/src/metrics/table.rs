use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{niqe, rmse_8bit, sifid, FeatureExtractor, NssModel};
use crate::error::{Error, Result};
use crate::imageio::load_image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Sifid,
    Niqe,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Sifid => "sifid",
            Metric::Niqe => "niqe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rmse" => Ok(Metric::Rmse),
            "sifid" => Ok(Metric::Sifid),
            "niqe" => Ok(Metric::Niqe),
            other => Err(Error::invalid(format!("unknown metric `{other}` (expected rmse, sifid or niqe)"))),
        }
    }
}

/// Scores for one result/reference pair. A metric that failed on this
/// pair is absent from `values` and explained in `errors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub values: BTreeMap<Metric, f64>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<Metric>,
    /// RMSE is on the 8-bit scale; SIFID names its feature extractor.
    pub extractor: String,
    pub rows: Vec<EvalRow>,
    pub mean: BTreeMap<Metric, f64>,
    /// Files present in only one of the two directories.
    pub unmatched: Vec<String>,
}

impl EvalReport {
    /// One CSV row per pair plus a `mean` row when any pair was scored.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m.as_str());
        }
        out.push('\n');
        let cell = |v: Option<&f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            out.push_str(&r.name);
            for m in &self.metrics {
                out.push(',');
                out.push_str(&cell(r.values.get(m)));
            }
            out.push('\n');
        }
        if !self.rows.is_empty() {
            out.push_str("mean");
            for m in &self.metrics {
                out.push(',');
                out.push_str(&cell(self.mean.get(m)));
            }
            out.push('\n');
        }
        out
    }
}

fn images_in(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(n) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(n.to_string());
            }
        }
    }
    Ok(names)
}

/// Score every file name present in both directories.
pub fn evaluate_table(
    result_dir: &Path,
    reference_dir: &Path,
    metrics: &BTreeSet<Metric>,
    extractor: &dyn FeatureExtractor,
    nss: &NssModel,
) -> Result<EvalReport> {
    let results = images_in(result_dir)?;
    let references = images_in(reference_dir)?;
    let unmatched = results.symmetric_difference(&references).cloned().collect();
    let mut rows = Vec::new();
    for name in results.intersection(&references) {
        let fake = load_image(&result_dir.join(name))?;
        let real = load_image(&reference_dir.join(name))?;
        let mut row = EvalRow {
            name: name.clone(),
            values: BTreeMap::new(),
            errors: Vec::new(),
        };
        for &m in metrics {
            let v = match m {
                Metric::Rmse => rmse_8bit(&real, &fake),
                Metric::Sifid => sifid(&real, &fake, extractor),
                Metric::Niqe => niqe(&fake, nss),
            };
            match v {
                Ok(v) => {
                    row.values.insert(m, v);
                }
                Err(e) => row.errors.push(format!("{}: {e}", m.as_str())),
            }
        }
        rows.push(row);
    }
    let mean = metrics
        .iter()
        .filter_map(|&m| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values.get(&m).copied()).collect();
            (!vals.is_empty()).then(|| (m, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    Ok(EvalReport {
        metrics: metrics.iter().copied().collect(),
        extractor: extractor.name().to_string(),
        rows,
        mean,
        unmatched,
    })
}
