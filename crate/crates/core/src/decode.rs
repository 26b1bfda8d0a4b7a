//! Lookup decoding: a predicted embedding is assigned to the table entry
//! with the highest cosine similarity. Entries within `tie_eps` of the
//! maximum form the tie set (a "mixture" of activities); the reported top
//! class is the lexicographically smallest member of that set.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::data::SensorSequence;
use crate::nn::{NnError, RegressorModel};
use crate::par::{self, Exec};
use crate::table::EmbeddingTable;
use crate::tensor::{dot, l2_norm};
use crate::windowing::{segment, WindowConfig, WindowError};

pub const DEFAULT_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("undefined similarity: zero-norm vector")]
    UndefinedSimilarity,
    #[error("vector length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty candidate table")]
    EmptyTable,
    #[error("activity {0} is undecodable: aggregated prediction has zero norm")]
    Undecodable(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

/// `h · e / (‖h‖ ‖e‖)`
pub fn cosine_sim(h: &[f64], e: &[f64]) -> Result<f64, DecodeError> {
    if h.len() != e.len() {
        return Err(DecodeError::Length(h.len(), e.len()));
    }
    let (nh, ne) = (l2_norm(h), l2_norm(e));
    if nh == 0.0 || ne == 0.0 || !nh.is_finite() || !ne.is_finite() {
        return Err(DecodeError::UndefinedSimilarity);
    }
    Ok(dot(h, e) / (nh * ne))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub source_id: String,
    /// Every candidate, by descending similarity (ties by class id).
    pub ranked: Vec<(String, f64)>,
    pub top: String,
    /// Candidates within `tie_eps` of the best similarity, sorted by id.
    pub tie_set: Vec<String>,
}

impl Prediction {
    pub fn is_tie(&self) -> bool {
        self.tie_set.len() > 1
    }

    fn from_scores(source_id: &str, mut ranked: Vec<(String, f64)>, tie_eps: f64) -> Self {
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let best = ranked[0].1;
        let mut tie_set: Vec<String> = ranked
            .iter()
            .filter(|(_, s)| best - s <= tie_eps)
            .map(|(c, _)| c.clone())
            .collect();
        tie_set.sort();
        Self {
            source_id: source_id.to_string(),
            top: tie_set[0].clone(),
            ranked,
            tie_set,
        }
    }
}

pub fn decode(h: &[f64], table: &EmbeddingTable, tie_eps: f64) -> Result<Prediction, DecodeError> {
    decode_labeled("", h, table, tie_eps)
}

pub fn decode_labeled(
    source_id: &str,
    h: &[f64],
    table: &EmbeddingTable,
    tie_eps: f64,
) -> Result<Prediction, DecodeError> {
    if table.is_empty() {
        return Err(DecodeError::EmptyTable);
    }
    let ranked = table
        .entries
        .iter()
        .map(|(class, entry)| Ok((class.clone(), cosine_sim(h, &entry.embedding)?)))
        .collect::<Result<Vec<_>, DecodeError>>()?;
    Ok(Prediction::from_scores(source_id, ranked, tie_eps))
}

/// How per-window predictions of one activity are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Decode the arithmetic mean of the window embeddings.
    #[default]
    Mean,
    /// Decode each window and take the majority class. Similarities in the
    /// ranked list become vote fractions.
    Vote,
}

#[derive(Clone, Debug, Serialize)]
pub struct ActivityPrediction {
    pub prediction: Prediction,
    pub aggregate: Vec<f64>,
    pub window_predictions: Vec<Vec<f64>>,
}

/// Elementwise mean of equally long vectors.
pub fn mean_embedding(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vectors.first().map_or(0, Vec::len)];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Windows the sequence, runs the model on every window and decodes the
/// aggregate.
pub fn predict_activity(
    model: &RegressorModel,
    seq: &SensorSequence,
    cfg: &WindowConfig,
    table: &EmbeddingTable,
    aggregation: Aggregation,
    exec: Exec,
) -> Result<ActivityPrediction, DecodeError> {
    if seq.channels() != model.conv.in_channels {
        return Err(NnError::Shape {
            what: "sequence channels",
            expected: model.conv.in_channels.to_string(),
            actual: seq.channels().to_string(),
        }
        .into());
    }
    let windows = segment(seq, cfg)?;
    let window_predictions = par::map(exec, &windows, |w| model.predict(&w.samples).map(|t| t.into_vec()))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let aggregate = mean_embedding(&window_predictions);
    let prediction = match aggregation {
        Aggregation::Mean => match decode_labeled(&seq.id, &aggregate, table, DEFAULT_TIE_EPS) {
            Err(DecodeError::UndefinedSimilarity) => return Err(DecodeError::Undecodable(seq.id.clone())),
            other => other?,
        },
        Aggregation::Vote => {
            let mut votes: BTreeMap<&str, usize> = table.entries.keys().map(|k| (k.as_str(), 0)).collect();
            for h in &window_predictions {
                match decode(h, table, DEFAULT_TIE_EPS) {
                    Ok(p) => *votes.get_mut(p.top.as_str()).expect("table class") += 1,
                    Err(DecodeError::UndefinedSimilarity) => {}
                    Err(e) => return Err(e),
                }
            }
            let n = window_predictions.len() as f64;
            let scores = votes.into_iter().map(|(c, v)| (c.to_string(), v as f64 / n)).collect();
            Prediction::from_scores(&seq.id, scores, 0.0)
        }
    };
    Ok(ActivityPrediction {
        prediction,
        aggregate,
        window_predictions,
    })
}
