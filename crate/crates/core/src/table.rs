//! Class → (sentence, embedding) lookup tables and the OVHT text format.
//!
//! ```text
//! OVHT 1
//! dim 768
//! encoder_name <rest of line>
//! count <n>
//! class <class id>
//! sentence <rest of line>
//! embedding <16 hex digits> ... (dim values, IEEE-754 bit patterns)
//! ```
//!
//! The three entry lines repeat `count` times, in class-id order. Hex bit
//! patterns make the round trip exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::lexicon::{build_sentence, test_embed, Lexicon, LexiconError};
use crate::nn::EMBEDDING_DIM;
use crate::tensor::l2_norm;

pub const TABLE_MAGIC: &str = "OVHT";
pub const TABLE_VERSION: u32 = 1;
pub const TEST_ENCODER_NAME: &str = "test-embed/fnv1a-splitmix64-normal/pos-weight-1/(1+j)";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("table parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("dimension mismatch, expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("table has no entry for classes: {}", .0.join(", "))]
    MissingClasses(Vec<String>),
    #[error("entry {class}: {message}")]
    InvalidEntry { class: String, message: String },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub sentence: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub encoder_name: String,
    pub entries: BTreeMap<String, TableEntry>,
}

/// Where target embeddings come from.
#[derive(Clone, Debug)]
pub enum Embedder {
    /// The deterministic compositional test embedder.
    Test,
    /// A table produced by an external sentence encoder.
    Imported(EmbeddingTable),
}

impl EmbeddingTable {
    pub fn new(dim: usize, encoder_name: impl Into<String>) -> Self {
        Self {
            dim,
            encoder_name: encoder_name.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class_id: &str) -> Option<&TableEntry> {
        self.entries.get(class_id)
    }

    pub fn insert(&mut self, class_id: impl Into<String>, entry: TableEntry) -> Result<(), TableError> {
        let class = class_id.into();
        validate_entry(&class, &entry, self.dim)?;
        self.entries.insert(class, entry);
        Ok(())
    }

    /// Sub-table restricted to `class_ids`.
    pub fn subset<S: AsRef<str>>(&self, class_ids: &[S]) -> Result<EmbeddingTable, TableError> {
        let missing: Vec<String> = class_ids
            .iter()
            .map(AsRef::as_ref)
            .filter(|c| !self.entries.contains_key(*c))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(TableError::MissingClasses(missing));
        }
        Ok(EmbeddingTable {
            dim: self.dim,
            encoder_name: self.encoder_name.clone(),
            entries: class_ids
                .iter()
                .map(|c| (c.as_ref().to_string(), self.entries[c.as_ref()].clone()))
                .collect(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 + self.entries.len() * (self.dim * 17 + 128));
        let _ = writeln!(out, "{TABLE_MAGIC} {TABLE_VERSION}");
        let _ = writeln!(out, "dim {}", self.dim);
        let _ = writeln!(out, "encoder_name {}", self.encoder_name);
        let _ = writeln!(out, "count {}", self.entries.len());
        for (class, entry) in &self.entries {
            let _ = writeln!(out, "class {class}");
            let _ = writeln!(out, "sentence {}", entry.sentence);
            out.push_str("embedding");
            for v in &entry.embedding {
                let _ = write!(out, " {:016x}", v.to_bits());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TableError> {
        let mut lines = Lines { text, pos: 0 };
        let (off, magic) = lines.next("magic line")?;
        let mut parts = magic.split(' ');
        if parts.next() != Some(TABLE_MAGIC) {
            return Err(parse_err(off, format!("bad magic, expected {TABLE_MAGIC:?}")));
        }
        let version: u32 = parse_num(off, parts.next().unwrap_or(""), "version")?;
        if version != TABLE_VERSION {
            return Err(parse_err(off, format!("unsupported version {version}")));
        }
        let (off, v) = lines.field("dim")?;
        let dim: usize = parse_num(off, v, "dim")?;
        if dim == 0 {
            return Err(parse_err(off, "dim must be positive".into()));
        }
        let (_, encoder_name) = lines.field("encoder_name")?;
        let (off, v) = lines.field("count")?;
        let count: usize = parse_num(off, v, "count")?;
        let mut table = EmbeddingTable::new(dim, encoder_name);
        for _ in 0..count {
            let (class_off, class) = lines.field("class")?;
            if class.is_empty() || class.contains(char::is_whitespace) {
                return Err(parse_err(class_off, format!("invalid class id {class:?}")));
            }
            let (_, sentence) = lines.field("sentence")?;
            let (emb_off, values) = lines.field("embedding")?;
            let mut embedding = Vec::with_capacity(dim);
            let mut col = emb_off;
            for tok in values.split(' ') {
                if tok.len() != 16 {
                    return Err(parse_err(col, format!("expected 16 hex digits, got {tok:?}")));
                }
                let bits = u64::from_str_radix(tok, 16).map_err(|_| parse_err(col, format!("bad hex {tok:?}")))?;
                embedding.push(f64::from_bits(bits));
                col += tok.len() + 1;
            }
            if embedding.len() != dim {
                return Err(TableError::Dimension {
                    expected: dim,
                    actual: embedding.len(),
                });
            }
            if table.entries.contains_key(class) {
                return Err(parse_err(class_off, format!("duplicate class {class:?}")));
            }
            table.insert(
                class,
                TableEntry {
                    sentence: sentence.to_string(),
                    embedding,
                },
            )?;
        }
        if lines.pos < text.len() {
            return Err(parse_err(lines.pos, "trailing data after last entry".into()));
        }
        Ok(table)
    }
}

fn validate_entry(class: &str, entry: &TableEntry, dim: usize) -> Result<(), TableError> {
    if entry.embedding.len() != dim {
        return Err(TableError::Dimension {
            expected: dim,
            actual: entry.embedding.len(),
        });
    }
    if !entry.embedding.iter().all(|v| v.is_finite()) {
        return Err(TableError::InvalidEntry {
            class: class.to_string(),
            message: "non-finite embedding value".into(),
        });
    }
    if l2_norm(&entry.embedding) == 0.0 {
        return Err(TableError::InvalidEntry {
            class: class.to_string(),
            message: "zero-norm embedding".into(),
        });
    }
    if entry.sentence.contains('\n') {
        return Err(TableError::InvalidEntry {
            class: class.to_string(),
            message: "sentence spans several lines".into(),
        });
    }
    Ok(())
}

fn parse_err(offset: usize, message: String) -> TableError {
    TableError::Parse { offset, message }
}

fn parse_num<T: std::str::FromStr>(offset: usize, s: &str, what: &str) -> Result<T, TableError> {
    s.parse()
        .map_err(|_| parse_err(offset, format!("invalid {what} {s:?}")))
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next newline-terminated line and its byte offset.
    fn next(&mut self, expecting: &str) -> Result<(usize, &'a str), TableError> {
        let start = self.pos;
        let rest = &self.text[start..];
        let end = rest
            .find('\n')
            .ok_or_else(|| parse_err(self.text.len(), format!("unexpected end of file, expected {expecting}")))?;
        self.pos = start + end + 1;
        Ok((start, &rest[..end]))
    }

    /// A `key value` line; returns the value's offset and text.
    fn field(&mut self, key: &str) -> Result<(usize, &'a str), TableError> {
        let (off, line) = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((off + k.len() + 1, v)),
            _ => Err(parse_err(off, format!("expected `{key} ...`"))),
        }
    }
}

pub fn save_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), TableError> {
    let path = path.as_ref();
    std::fs::write(path, table.to_text()).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, TableError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(e.valid_up_to(), "invalid utf-8".into()))?;
    EmbeddingTable::from_text(text)
}

/// Builds the target table for `class_ids`. With [`Embedder::Test`] each
/// class is embedded from its motion ids; with an imported table the
/// entries are copied after checking coverage and dimension.
pub fn build_table<S: AsRef<str>>(
    lexicon: &Lexicon,
    class_ids: &[S],
    embedder: &Embedder,
) -> Result<EmbeddingTable, TableError> {
    if class_ids.is_empty() {
        return Err(TableError::MissingClasses(Vec::new()));
    }
    match embedder {
        Embedder::Test => {
            let mut table = EmbeddingTable::new(EMBEDDING_DIM, TEST_ENCODER_NAME);
            for id in class_ids {
                let class = lexicon.class(id.as_ref())?;
                let sentence = build_sentence(class, lexicon)?.text;
                let embedding = test_embed(&class.motions, EMBEDDING_DIM)?;
                table.insert(class.id.clone(), TableEntry { sentence, embedding })?;
            }
            Ok(table)
        }
        Embedder::Imported(imported) => {
            if imported.dim != EMBEDDING_DIM {
                return Err(TableError::Dimension {
                    expected: EMBEDDING_DIM,
                    actual: imported.dim,
                });
            }
            imported.subset(class_ids)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{ActivityClass, AtomicMotion};

    pub(crate) fn lexicon() -> Lexicon {
        let motions = ["raise_arm", "lower_arm", "step_forward"]
            .iter()
            .map(|id| AtomicMotion {
                id: id.to_string(),
                phrase: id.replace('_', " "),
            })
            .collect();
        let class = |id: &str, ms: &[&str]| ActivityClass {
            id: id.into(),
            label: id.into(),
            motions: ms.iter().map(|s| s.to_string()).collect(),
        };
        Lexicon {
            motions,
            classes: vec![
                class("wave", &["raise_arm", "lower_arm"]),
                class("lunge", &["step_forward"]),
                class("reach_step", &["raise_arm", "step_forward", "lower_arm"]),
            ],
        }
    }

    #[test]
    fn test_embedder_entries_are_unit_norm() {
        let lex = lexicon();
        let t = build_table(&lex, &lex.class_ids(), &Embedder::Test).unwrap();
        assert_eq!(t.len(), 3);
        for e in t.entries.values() {
            assert!((l2_norm(&e.embedding) - 1.0).abs() < 1e-12);
        }
        assert_eq!(t.get("wave").unwrap().sentence, "Perform a raise arm with a lower arm");
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let lex = lexicon();
        let a = build_table(&lex, &lex.class_ids(), &Embedder::Test).unwrap().to_text();
        let mut shuffled = lex.clone();
        shuffled.classes.reverse();
        shuffled.motions.reverse();
        let b = build_table(&shuffled, &lex.class_ids(), &Embedder::Test).unwrap().to_text();
        assert_eq!(a, b);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let lex = lexicon();
        let t = build_table(&lex, &lex.class_ids(), &Embedder::Test).unwrap();
        let back = EmbeddingTable::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn imported_wrong_dimension_rejected() {
        let lex = lexicon();
        let mut small = EmbeddingTable::new(512, "other");
        small
            .insert(
                "wave",
                TableEntry {
                    sentence: "s".into(),
                    embedding: vec![1.0; 512],
                },
            )
            .unwrap();
        let err = build_table(&lex, &["wave"], &Embedder::Imported(small)).unwrap_err();
        assert_eq!(err.to_string(), "dimension mismatch, expected 768, got 512");
    }

    #[test]
    fn imported_missing_classes_listed() {
        let lex = lexicon();
        let full = build_table(&lex, &["wave"], &Embedder::Test).unwrap();
        let err = build_table(&lex, &["wave", "lunge", "reach_step"], &Embedder::Imported(full)).unwrap_err();
        match err {
            TableError::MissingClasses(ids) => assert_eq!(ids, vec!["lunge", "reach_step"]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let lex = lexicon();
        let text = build_table(&lex, &lex.class_ids(), &Embedder::Test).unwrap().to_text();
        let cut = &text[..text.len() / 2];
        match EmbeddingTable::from_text(cut) {
            Err(TableError::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("{other:?}"),
        }
        let err = EmbeddingTable::from_text("OVHX 1\n").unwrap_err();
        assert!(matches!(err, TableError::Parse { offset: 0, .. }));
        let err = EmbeddingTable::from_text("OVHT 2\n").unwrap_err();
        assert!(err.to_string().contains("unsupported version"));
    }
}
