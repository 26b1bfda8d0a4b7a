//! Activity classes described as ordered atomic motions, the sentence
//! template built from them, and the deterministic compositional embedder
//! used when no pretrained sentence encoder is available.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::l2_norm;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate {kind} id {id:?}")]
    Duplicate { kind: &'static str, id: String },
    #[error("invalid {kind} {id:?}: {message}")]
    Invalid {
        kind: &'static str,
        id: String,
        message: String,
    },
    #[error("class {class:?} refers to unknown motion {motion:?}")]
    UnresolvedMotion { class: String, motion: String },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("cannot embed an empty motion list")]
    EmptyMotions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicMotion {
    pub id: String,
    pub phrase: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityClass {
    pub id: String,
    pub label: String,
    pub motions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSentence {
    pub text: String,
}

/// Authored decomposition of every known class into atomic motions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub motions: Vec<AtomicMotion>,
    pub classes: Vec<ActivityClass>,
}

fn is_snake_case(id: &str) -> bool {
    !id.is_empty()
        && id.starts_with(|c: char| c.is_ascii_lowercase())
        && id.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Lexicon {
    pub fn validate(&self) -> Result<(), LexiconError> {
        let mut motion_ids = HashSet::new();
        for m in &self.motions {
            if !is_snake_case(&m.id) {
                return Err(LexiconError::Invalid {
                    kind: "motion",
                    id: m.id.clone(),
                    message: "ids are snake_case".into(),
                });
            }
            if m.phrase.trim().is_empty() || m.phrase.contains('\n') {
                return Err(LexiconError::Invalid {
                    kind: "motion",
                    id: m.id.clone(),
                    message: "phrase must be a non-empty single line".into(),
                });
            }
            if !motion_ids.insert(m.id.as_str()) {
                return Err(LexiconError::Duplicate {
                    kind: "motion",
                    id: m.id.clone(),
                });
            }
        }
        let mut class_ids = HashSet::new();
        for c in &self.classes {
            if c.id.is_empty() || c.id.chars().any(char::is_whitespace) {
                return Err(LexiconError::Invalid {
                    kind: "class",
                    id: c.id.clone(),
                    message: "ids are non-empty and contain no whitespace".into(),
                });
            }
            if c.motions.is_empty() {
                return Err(LexiconError::Invalid {
                    kind: "class",
                    id: c.id.clone(),
                    message: "needs at least one motion".into(),
                });
            }
            if let Some(m) = c.motions.iter().find(|m| !motion_ids.contains(m.as_str())) {
                return Err(LexiconError::UnresolvedMotion {
                    class: c.id.clone(),
                    motion: m.clone(),
                });
            }
            if !class_ids.insert(c.id.as_str()) {
                return Err(LexiconError::Duplicate {
                    kind: "class",
                    id: c.id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let lexicon: Lexicon = serde_json::from_str(&text)?;
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LexiconError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn class(&self, id: &str) -> Result<&ActivityClass, LexiconError> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| LexiconError::UnknownClass(id.to_string()))
    }

    pub fn phrase(&self, motion: &str) -> Option<&str> {
        self.motions.iter().find(|m| m.id == motion).map(|m| m.phrase.as_str())
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.id.clone()).collect()
    }

    /// Motion ids used by the given classes.
    pub fn motion_union<S: AsRef<str>>(&self, class_ids: &[S]) -> Result<BTreeSet<String>, LexiconError> {
        let mut out = BTreeSet::new();
        for id in class_ids {
            out.extend(self.class(id.as_ref())?.motions.iter().cloned());
        }
        Ok(out)
    }
}

fn article(phrase: &str) -> &'static str {
    match phrase.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Builds the description sentence for a class:
///
/// * one motion: `Perform a {p1}`
/// * two: `Perform a {p1} with a {p2}`
/// * three or more: `Perform a {p1} with a {p2} followed by a {p3}, a {p4} and a {pn}`
///
/// The article is "an" before a phrase starting with a vowel letter.
pub fn build_sentence(class: &ActivityClass, lexicon: &Lexicon) -> Result<DescriptionSentence, LexiconError> {
    let phrases = class
        .motions
        .iter()
        .map(|m| {
            lexicon.phrase(m).ok_or_else(|| LexiconError::UnresolvedMotion {
                class: class.id.clone(),
                motion: m.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let np = |p: &str| format!("{} {p}", article(p));
    let mut text = match phrases.first() {
        Some(p) => format!("Perform {}", np(p)),
        None => return Err(LexiconError::EmptyMotions),
    };
    if let Some(p) = phrases.get(1) {
        text.push_str(&format!(" with {}", np(p)));
    }
    let rest = phrases.get(2..).unwrap_or_default();
    for (i, p) in rest.iter().enumerate() {
        let joiner = match i {
            0 => " followed by ",
            _ if i + 1 == rest.len() => " and ",
            _ => ", ",
        };
        text.push_str(joiner);
        text.push_str(&np(p));
    }
    Ok(DescriptionSentence { text })
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-norm pseudo-random direction for one motion id.
pub fn motion_vector(motion_id: &str, dim: usize) -> Vec<f64> {
    let mut rng = SplitMix64::seed_from_u64(fnv1a64(motion_id.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = l2_norm(&v);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Deterministic compositional stand-in for a sentence encoder: the
/// normalized sum of the motions' unit vectors, motion `j` weighted by
/// `1 / (1 + j)`.
pub fn test_embed<S: AsRef<str>>(motions: &[S], dim: usize) -> Result<Vec<f64>, LexiconError> {
    if motions.is_empty() {
        return Err(LexiconError::EmptyMotions);
    }
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut sum = vec![0.0; dim];
    for (j, m) in motions.iter().enumerate() {
        let m = m.as_ref();
        let v = cache.entry(m).or_insert_with(|| motion_vector(m, dim));
        let w = 1.0 / (1.0 + j as f64);
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += w * x;
        }
    }
    let norm = l2_norm(&sum);
    for s in &mut sum {
        *s /= norm;
    }
    Ok(sum)
}

/// Turns an activity name into an ordered motion list. The real system
/// asks an LLM; only a lexicon-backed stub ships.
pub trait MotionDecomposer {
    fn decompose(&self, activity: &str) -> Result<Vec<String>, LexiconError>;
}

/// Looks the activity up by class id or label in an authored lexicon.
pub struct LexiconDecomposer<'a> {
    pub lexicon: &'a Lexicon,
}

impl MotionDecomposer for LexiconDecomposer<'_> {
    fn decompose(&self, activity: &str) -> Result<Vec<String>, LexiconError> {
        self.lexicon
            .classes
            .iter()
            .find(|c| c.id == activity || c.label.eq_ignore_ascii_case(activity))
            .map(|c| c.motions.clone())
            .ok_or_else(|| LexiconError::UnknownClass(activity.to_string()))
    }
}
