//! Interfaces for the text path: inverting a predicted embedding to a
//! sentence and mapping free text to a candidate class. Only stubs and a
//! plain JSON-over-HTTP client ship; neither falls back to the other.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{decode, DecodeError, DEFAULT_TIE_EPS};
use crate::table::EmbeddingTable;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("endpoint {url} unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("endpoint {url} returned an invalid response: {message}")]
    BadResponse { url: String, message: String },
    #[error("no candidate classes")]
    NoCandidates,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub trait TextInversionClient {
    fn invert(&self, h: &[f64]) -> Result<String, ClientError>;
}

pub trait ClassMappingClient {
    fn map(&self, text: &str, candidates: &[String]) -> Result<String, ClientError>;
}

/// How a client is provided: `"stub"`, or `{"endpoint": {"url": …,
/// "timeout_ms": …}}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientConfig {
    #[default]
    Stub,
    Endpoint(EndpointConfig),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    5_000
}

/// Returns the sentence of the table entry the embedding decodes to.
pub struct StubInversion<'a> {
    pub table: &'a EmbeddingTable,
}

impl TextInversionClient for StubInversion<'_> {
    fn invert(&self, h: &[f64]) -> Result<String, ClientError> {
        let p = decode(h, self.table, DEFAULT_TIE_EPS)?;
        Ok(self.table.get(&p.top).expect("decoded class is in table").sentence.clone())
    }
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Picks the candidate sharing the most distinct case-insensitive tokens
/// with the text. A candidate's tokens come from its id plus any alias
/// phrases. Ties go to the lexicographically smallest candidate.
#[derive(Clone, Debug, Default)]
pub struct StubMapping {
    pub aliases: BTreeMap<String, Vec<String>>,
}

impl StubMapping {
    pub fn with_aliases(aliases: BTreeMap<String, Vec<String>>) -> Self {
        Self { aliases }
    }
}

impl ClassMappingClient for StubMapping {
    fn map(&self, text: &str, candidates: &[String]) -> Result<String, ClientError> {
        let words = tokens(text);
        let score = |c: &String| {
            let mut vocab = tokens(c);
            for alias in self.aliases.get(c).into_iter().flatten() {
                vocab.extend(tokens(alias));
            }
            vocab.intersection(&words).count()
        };
        candidates
            .iter()
            .map(|c| (score(c), c))
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(a.1)))
            .map(|(_, c)| c.clone())
            .ok_or(ClientError::NoCandidates)
    }
}

/// Client for a remote service. Inversion posts `{"embedding": [...]}` and
/// expects `{"text": "..."}`; mapping posts `{"text": ..., "candidates":
/// [...]}` and expects `{"class_id": "..."}`.
pub struct HttpClient {
    pub endpoint: EndpointConfig,
}

#[derive(Deserialize)]
struct InversionReply {
    text: String,
}

#[derive(Deserialize)]
struct MappingReply {
    class_id: String,
}

impl HttpClient {
    fn post(&self, body: serde_json::Value) -> Result<String, ClientError> {
        let url = &self.endpoint.url;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(self.endpoint.timeout_ms))
            .build();
        let reply = agent
            .post(url)
            .set("content-type", "application/json")
            .send_string(&body.to_string())
            .map_err(|e| ClientError::Unreachable {
                url: url.clone(),
                message: e.to_string(),
            })?;
        reply.into_string().map_err(|e| ClientError::BadResponse {
            url: url.clone(),
            message: e.to_string(),
        })
    }

    fn parse<T: for<'de> Deserialize<'de>>(&self, text: &str) -> Result<T, ClientError> {
        serde_json::from_str(text).map_err(|e| ClientError::BadResponse {
            url: self.endpoint.url.clone(),
            message: e.to_string(),
        })
    }
}

impl TextInversionClient for HttpClient {
    fn invert(&self, h: &[f64]) -> Result<String, ClientError> {
        let text = self.post(serde_json::json!({ "embedding": h }))?;
        Ok(self.parse::<InversionReply>(&text)?.text)
    }
}

impl ClassMappingClient for HttpClient {
    fn map(&self, text: &str, candidates: &[String]) -> Result<String, ClientError> {
        if candidates.is_empty() {
            return Err(ClientError::NoCandidates);
        }
        let reply = self.post(serde_json::json!({ "text": text, "candidates": candidates }))?;
        let class_id = self.parse::<MappingReply>(&reply)?.class_id;
        if !candidates.contains(&class_id) {
            return Err(ClientError::BadResponse {
                url: self.endpoint.url.clone(),
                message: format!("class {class_id:?} is not a candidate"),
            });
        }
        Ok(class_id)
    }
}
