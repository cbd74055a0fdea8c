//! Model input text for each taxonomy node.
//!
//! `raw` uses the node's own description; `with_parents` prefixes the
//! descriptions of every ancestor, section first, joined by `". "`. Both
//! modes expand "n.e.c." and sentence-case all-caps descriptions.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{Code, Taxonomy};

pub const SEPARATOR: &str = ". ";
pub const NEC_EXPANSION: &str = "not elsewhere classified";

static NEC: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bn\.e\.c(?:\.|$)").expect("valid regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Raw,
    WithParents,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Raw => "raw",
            Mode::WithParents => "with_parents",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Mode::Raw),
            "with_parents" | "with-parents" => Ok(Mode::WithParents),
            other => Err(CorpusError::Format(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub code: Code,
    pub text: String,
    pub mode: Mode,
}

/// One entry per node, in taxonomy traversal order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EnrichedCorpus {
    pub entries: Vec<CorpusEntry>,
}

/// Sentence-cases all-caps text and expands every "n.e.c.".
pub fn normalize_description(description: &str) -> String {
    let has_letter = description.chars().any(char::is_alphabetic);
    let has_lower = description.chars().any(char::is_lowercase);
    let cased = if has_letter && !has_lower {
        sentence_case(description)
    } else {
        description.to_string()
    };
    NEC.replace_all(&cased, NEC_EXPANSION).into_owned()
}

fn sentence_case(s: &str) -> String {
    let lower = s.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    let mut done = false;
    for ch in lower.chars() {
        if !done && ch.is_alphabetic() {
            out.extend(ch.to_uppercase());
            done = true;
        } else {
            out.push(ch);
        }
    }
    out
}

pub fn enrich(taxonomy: &Taxonomy, mode: Mode) -> EnrichedCorpus {
    let entries = taxonomy
        .nodes()
        .map(|node| {
            let own = normalize_description(&node.description);
            let text = match mode {
                Mode::Raw => own,
                Mode::WithParents => {
                    let mut parts: Vec<String> = taxonomy
                        .ancestors_of(&node.code)
                        .expect("node belongs to taxonomy")
                        .iter()
                        .map(|a| normalize_description(&a.description))
                        .collect();
                    parts.push(own);
                    parts.join(SEPARATOR)
                }
            };
            CorpusEntry {
                code: node.code.clone(),
                text,
                mode,
            }
        })
        .collect();
    EnrichedCorpus { entries }
}

impl EnrichedCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, code: &Code) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| &e.code == code)
    }

    /// JSON Lines, one `{code, text, mode}` object per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), CorpusError> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| CorpusError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<EnrichedCorpus, CorpusError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CorpusEntry =
                serde_json::from_str(&line).map_err(|e| CorpusError::Line {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if entry.text.is_empty() {
                return Err(CorpusError::Line {
                    line: i + 1,
                    message: format!("empty text for {}", entry.code),
                });
            }
            entries.push(entry);
        }
        Ok(EnrichedCorpus { entries })
    }
}
