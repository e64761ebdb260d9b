//! Identification protocols over predicted probability tables, and 2-D
//! projections of embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Area;

mod projection;
mod protocols;
#[cfg(test)]
mod tests;

pub use projection::{pca_2d, project_2d, tsne_2d, Point2, ProjectionMethod, TsneConfig, TSNE_MAX_POINTS};
pub use protocols::{
    binomial, confusion_matrix, enumerates_all, for_each_candidate_set, nota_accuracy, nota_half_size,
    nota_threshold_grid, nota_trials, nway_accuracy, nway_trials, sweep_nota_threshold, Confusion, Trials,
    MAX_ENUMERATED_GROUP,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot write {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub group_sizes: Vec<usize>,
    pub sampling_cap: usize,
    pub nota_enabled: bool,
    /// Fixed none-of-the-above threshold; when absent it is swept on the
    /// evaluation split, separately for each group size.
    pub nota_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            group_sizes: vec![2, 3, 4, 5],
            sampling_cap: 4000,
            nota_enabled: true,
            nota_threshold: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, num_drivers: usize) -> Result<(), EvalError> {
        if self.group_sizes.is_empty() {
            return Err(EvalError::Config("no group sizes requested".into()));
        }
        for &n in &self.group_sizes {
            if n < 2 || n > num_drivers {
                return Err(EvalError::Config(format!("group size {n} outside [2, {num_drivers}]")));
            }
            if self.nota_enabled && n >= num_drivers {
                return Err(EvalError::Config(format!(
                    "none-of-the-above with group size {n} needs more than {num_drivers} drivers"
                )));
            }
        }
        if self.sampling_cap == 0 {
            return Err(EvalError::Config("sampling_cap must be positive".into()));
        }
        if let Some(t) = self.nota_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(EvalError::Config(format!("nota_threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Pairwise accuracy computed separately over the windows of each area.
pub fn area_accuracy(
    probs: &[Vec<f64>],
    labels: &[usize],
    areas: &[Area],
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, f64>, EvalError> {
    if areas.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} areas for {} windows",
            areas.len(),
            labels.len()
        )));
    }
    let mut out = BTreeMap::new();
    for area in Area::ALL {
        let idx: Vec<usize> = (0..areas.len()).filter(|&i| areas[i] == area).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        out.insert(area.name().to_string(), nway_accuracy(&p, &l, 2, cfg)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotaResult {
    pub threshold: f64,
    pub accuracy: f64,
    /// Accuracy on the split the threshold was chosen on.
    pub selection_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub setting: String,
    pub pairwise_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: BTreeMap<String, String>,
    pub drivers: Vec<String>,
    pub windows_per_driver: Vec<u64>,
    pub top1_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub nway: BTreeMap<usize, f64>,
    pub nota: BTreeMap<usize, NotaResult>,
    pub area_pairwise: BTreeMap<String, f64>,
    pub tables: BTreeMap<String, Vec<TableRow>>,
}

/// One evaluated split: probabilities, true labels and window areas.
pub struct ScoredSplit<'a> {
    pub probs: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub areas: &'a [Area],
}

impl EvalReport {
    /// Runs confusion, n-way, none-of-the-above and per-area protocols on
    /// `test`. Thresholds not fixed by the config are picked on `selection`.
    pub fn evaluate(
        drivers: &[String],
        test: &ScoredSplit,
        selection: &ScoredSplit,
        cfg: &EvalConfig,
    ) -> Result<Self, EvalError> {
        cfg.validate(drivers.len())?;
        let confusion = confusion_matrix(test.probs, test.labels)?;
        if confusion.matrix.len() != drivers.len() {
            return Err(EvalError::Shape(format!(
                "{} probability columns for {} drivers",
                confusion.matrix.len(),
                drivers.len()
            )));
        }
        let mut report = EvalReport {
            drivers: drivers.to_vec(),
            windows_per_driver: confusion.matrix.iter().map(|r| r.iter().sum()).collect(),
            top1_accuracy: confusion.accuracy(),
            confusion: confusion.matrix,
            area_pairwise: area_accuracy(test.probs, test.labels, test.areas, cfg)?,
            ..Default::default()
        };
        for &n in &cfg.group_sizes {
            report.nway.insert(n, nway_accuracy(test.probs, test.labels, n, cfg)?);
            if cfg.nota_enabled {
                let (threshold, selection_accuracy) = match cfg.nota_threshold {
                    Some(t) => (t, nota_accuracy(selection.probs, selection.labels, n, t, cfg)?),
                    None => sweep_nota_threshold(selection.probs, selection.labels, n, cfg)?,
                };
                let accuracy = nota_accuracy(test.probs, test.labels, n, threshold, cfg)?;
                report.nota.insert(
                    n,
                    NotaResult {
                        threshold,
                        accuracy,
                        selection_accuracy,
                    },
                );
            }
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let err = |reason: String| EvalError::Io {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Confusion matrix as delimited text with a header of predicted drivers.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for d in &self.drivers {
            s.push(',');
            s.push_str(d);
        }
        s.push('\n');
        for (d, row) in self.drivers.iter().zip(&self.confusion) {
            s.push_str(d);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}
