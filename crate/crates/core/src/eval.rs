//! Open-vocabulary evaluation: train and test classes are disjoint, test
//! classes are built only from motions seen in training, and activities are
//! scored by macro F1 over the test classes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_sequence, DataError, DatasetManifest};
use crate::decode::{predict_activity, Aggregation, DecodeError};
use crate::lexicon::{Lexicon, LexiconError};
use crate::nn::RegressorModel;
use crate::par::{self, Exec};
use crate::table::{EmbeddingTable, TableError};
use crate::windowing::{window_count, WindowConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("train and test classes overlap: {}", .0.join(", "))]
    Overlap(Vec<String>),
    #[error("test class {class} uses motions absent from training: {}", .motions.join(", "))]
    Uncovered { class: String, motions: Vec<String> },
    #[error("no test activities to evaluate")]
    EmptyTestSet,
    #[error("split file {path}: {message}")]
    SplitFile { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub train_class_ids: Vec<String>,
    pub test_class_ids: Vec<String>,
}

impl EvalSplit {
    /// Disjoint class sets, and every test motion appears in some training
    /// class.
    pub fn validate(&self, lexicon: &Lexicon) -> Result<(), EvalError> {
        let train: HashSet<&str> = self.train_class_ids.iter().map(String::as_str).collect();
        let overlap: Vec<String> = self
            .test_class_ids
            .iter()
            .filter(|c| train.contains(c.as_str()))
            .cloned()
            .collect();
        if !overlap.is_empty() {
            return Err(EvalError::Overlap(overlap));
        }
        let seen = lexicon.motion_union(&self.train_class_ids)?;
        for class in &self.test_class_ids {
            let missing: Vec<String> = lexicon
                .class(class)?
                .motions
                .iter()
                .filter(|m| !seen.contains(*m))
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if !missing.is_empty() {
                return Err(EvalError::Uncovered {
                    class: class.clone(),
                    motions: missing,
                });
            }
        }
        Ok(())
    }

    pub fn all_class_ids(&self) -> Vec<String> {
        let mut all = self.train_class_ids.clone();
        all.extend(self.test_class_ids.iter().cloned());
        all
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let err = |message: String| EvalError::SplitFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("split serializes");
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Which classes the decoder may choose from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateMode {
    /// Train and test classes together.
    #[default]
    All,
    /// Held-out classes only.
    Test,
}

impl std::str::FromStr for CandidateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "test" => Ok(Self::Test),
            _ => Err(format!("candidate mode must be `all` or `test`, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Confusion matrix and per-class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Row/column labels of `confusion` (truth rows, predicted columns).
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    /// Only classes with non-zero support.
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
}

/// Scores `(truth, predicted)` pairs. Precision of a never-predicted class
/// is 0, F1 is 0 when precision and recall are both 0, and classes with no
/// true instances are left out of the macro average.
pub fn classification_metrics(pairs: &[(String, String)]) -> ClassificationMetrics {
    let labels: Vec<String> = pairs
        .iter()
        .flat_map(|(t, p)| [t.clone(), p.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let n = labels.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (t, p) in pairs {
        confusion[index[t.as_str()]][index[p.as_str()]] += 1;
    }
    let mut per_class = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let support: usize = confusion[i].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = confusion[i][i] as f64;
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class_id: label.clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
    };
    ClassificationMetrics {
        labels,
        confusion,
        per_class,
        macro_f1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityOutcome {
    pub record_id: String,
    pub truth: String,
    pub predicted: String,
    pub tie_set: Vec<String>,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub candidates: CandidateMode,
    pub candidate_class_ids: Vec<String>,
    pub test_class_ids: Vec<String>,
    pub metrics: ClassificationMetrics,
    pub macro_f1: f64,
    pub activity_count: usize,
    pub window_count: usize,
    pub tie_count: usize,
    /// Activities whose aggregated prediction had zero norm; scored as
    /// wrong.
    pub undecodable: Vec<String>,
    pub outcomes: Vec<ActivityOutcome>,
}

pub const UNDECODABLE: &str = "<undecodable>";

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Confusion matrix as CSV with a header row of predicted labels.
    pub fn confusion_csv(&self) -> String {
        let m = &self.metrics;
        let mut out = String::from("truth\\predicted");
        for l in &m.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in m.labels.iter().zip(&m.confusion) {
            out.push_str(label);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Plain-text per-class table.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>8}\n",
            "class", "precision", "recall", "f1", "support"
        );
        for c in &self.metrics.per_class {
            out.push_str(&format!(
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8}\n",
                c.class_id, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str(&format!(
            "activities {}  windows {}  ties {}  candidates {:?} ({})\n",
            self.activity_count,
            self.window_count,
            self.tie_count,
            self.candidates,
            self.candidate_class_ids.len()
        ));
        out
    }
}

/// Decodes every test-class activity in the manifest against the candidate
/// table and scores the top-1 predictions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &RegressorModel,
    manifest: &DatasetManifest,
    split: &EvalSplit,
    table: &EmbeddingTable,
    mode: CandidateMode,
    cfg: &WindowConfig,
    aggregation: Aggregation,
    exec: Exec,
) -> Result<EvalReport, EvalError> {
    let candidate_ids = match mode {
        CandidateMode::All => split.all_class_ids(),
        CandidateMode::Test => split.test_class_ids.clone(),
    };
    let candidates = table.subset(&candidate_ids)?;
    let test: HashSet<&str> = split.test_class_ids.iter().map(String::as_str).collect();
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.class_id.as_deref().is_some_and(|c| test.contains(c)))
        .collect();
    if records.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let outcomes = par::map(exec, &records, |r| -> Result<ActivityOutcome, EvalError> {
        let seq = read_sequence(manifest, &r.id)?.sequence;
        let windows = window_count(seq.len(), seq.rate_hz, cfg).map_err(DecodeError::from)?;
        let truth = r.class_id.clone().expect("filtered to labeled");
        match predict_activity(model, &seq, cfg, &candidates, aggregation, Exec::Sequential) {
            Ok(p) => Ok(ActivityOutcome {
                record_id: r.id.clone(),
                truth,
                predicted: p.prediction.top.clone(),
                tie_set: p.prediction.tie_set,
                windows,
            }),
            Err(DecodeError::Undecodable(_)) => Ok(ActivityOutcome {
                record_id: r.id.clone(),
                truth,
                predicted: UNDECODABLE.to_string(),
                tie_set: Vec::new(),
                windows,
            }),
            Err(e) => Err(e.into()),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_outcomes(mode, candidate_ids, split.test_class_ids.clone(), outcomes))
}

pub fn report_from_outcomes(
    candidates: CandidateMode,
    candidate_class_ids: Vec<String>,
    test_class_ids: Vec<String>,
    outcomes: Vec<ActivityOutcome>,
) -> EvalReport {
    let pairs: Vec<(String, String)> = outcomes.iter().map(|o| (o.truth.clone(), o.predicted.clone())).collect();
    let metrics = classification_metrics(&pairs);
    EvalReport {
        candidates,
        candidate_class_ids,
        test_class_ids,
        macro_f1: metrics.macro_f1,
        metrics,
        activity_count: outcomes.len(),
        window_count: outcomes.iter().map(|o| o.windows).sum(),
        tie_count: outcomes.iter().filter(|o| o.tie_set.len() > 1).count(),
        undecodable: outcomes
            .iter()
            .filter(|o| o.predicted == UNDECODABLE)
            .map(|o| o.record_id.clone())
            .collect(),
        outcomes,
    }
}
