//! Classification forest: codes, nodes and navigation.
//!
//! Codes follow the four-level NACE grammar:
//!
//! | level | shape      | example |
//! |-------|------------|---------|
//! | 1     | `A`..`U`   | `C`     |
//! | 2     | `dd`       | `10`    |
//! | 3     | `dd.d`     | `10.5`  |
//! | 4     | `dd.dd`    | `10.52` |
//!
//! Parents of groups and classes follow from the code itself. A division's
//! section cannot be read off its digits, so it must come from an explicit
//! `parent` column or from a [`SectionMap`].
//!
//! Sections are treated as siblings of one another under a virtual root, so
//! `siblings_of("C")` returns the other sections.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LEVELS: [u8; 4] = [1, 2, 3, 4];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("{}malformed code {code:?}", at(*line))]
    MalformedCode { code: String, line: Option<usize> },
    #[error("{}duplicate code {code}", at(*line))]
    DuplicateCode { code: String, line: Option<usize> },
    #[error("{}code {code} has empty description", at(*line))]
    EmptyDescription { code: String, line: Option<usize> },
    #[error("{}orphan node {code}: parent {parent} not present", at(*line))]
    OrphanNode {
        code: String,
        parent: String,
        line: Option<usize>,
    },
    #[error("{}code {code} cannot have parent {parent:?}", at(*line))]
    InvalidParent {
        code: String,
        parent: String,
        line: Option<usize>,
    },
    #[error("{}division {code} has no section: give a parent column or a section map", at(*line))]
    MissingSection { code: String, line: Option<usize> },
    #[error("unknown code {0}")]
    UnknownCode(String),
    #[error("malformed input: {0}")]
    Input(String),
}

fn at(line: Option<usize>) -> String {
    match line {
        Some(l) => format!("line {l}: "),
        None => String::new(),
    }
}

/// A validated classification code.
///
/// Ordering is by level first, then lexicographic on the text, which is the
/// stable traversal order used everywhere in the crate.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Code(String);

impl Code {
    pub fn parse(raw: &str) -> Result<Code, TaxonomyError> {
        let trimmed = raw.trim();
        let text = if trimmed.len() == 1 {
            trimmed.to_ascii_uppercase()
        } else {
            trimmed.to_string()
        };
        if shape_level(&text).is_some() {
            Ok(Code(text))
        } else {
            Err(TaxonomyError::MalformedCode {
                code: raw.to_string(),
                line: None,
            })
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn level(&self) -> u8 {
        shape_level(&self.0).expect("validated at construction")
    }

    /// Parent implied by the code shape. Divisions return `None` since their
    /// section is not encoded in the digits.
    pub fn shape_parent(&self) -> Option<Code> {
        match self.level() {
            3 => Some(Code(self.0[..2].to_string())),
            4 => Some(Code(self.0[..4].to_string())),
            _ => None,
        }
    }
}

fn shape_level(text: &str) -> Option<u8> {
    let b = text.as_bytes();
    let digit = |i: usize| b[i].is_ascii_digit();
    match b.len() {
        1 if (b'A'..=b'U').contains(&b[0]) => Some(1),
        2 if digit(0) && digit(1) => Some(2),
        4 if digit(0) && digit(1) && b[2] == b'.' && digit(3) => Some(3),
        5 if digit(0) && digit(1) && b[2] == b'.' && digit(3) && digit(4) => Some(4),
        _ => None,
    }
}

impl Ord for Code {
    fn cmp(&self, other: &Self) -> Ordering {
        self.level()
            .cmp(&other.level())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Code {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl FromStr for Code {
    type Err = TaxonomyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Code::parse(s)
    }
}

impl TryFrom<String> for Code {
    type Error = TaxonomyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Code::parse(&s)
    }
}

impl From<Code> for String {
    fn from(c: Code) -> String {
        c.0
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Code({})", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyNode {
    pub code: Code,
    pub level: u8,
    pub description: String,
    pub parent: Option<Code>,
    pub children: Vec<Code>,
}

/// One input row before validation.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawRecord {
    pub code: String,
    pub description: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(skip)]
    pub line: Option<usize>,
}

impl RawRecord {
    pub fn new(code: &str, description: &str, parent: Option<&str>) -> Self {
        RawRecord {
            code: code.to_string(),
            description: description.to_string(),
            parent: parent.map(str::to_string),
            line: None,
        }
    }
}

/// Division (two-digit code) to section letter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionMap(BTreeMap<Code, Code>);

impl SectionMap {
    pub fn insert(&mut self, division: Code, section: Code) {
        self.0.insert(division, section);
    }

    pub fn get(&self, division: &Code) -> Option<&Code> {
        self.0.get(division)
    }

    /// Reads `division,section` CSV (with header) or a JSON object
    /// `{"01": "A", ...}`.
    pub fn from_reader(reader: impl Read, format: InputFormat) -> Result<Self, TaxonomyError> {
        let mut map = SectionMap::default();
        let pairs: Vec<(String, String, Option<usize>)> = match format {
            InputFormat::Json => {
                let obj: BTreeMap<String, String> = serde_json::from_reader(reader)
                    .map_err(|e| TaxonomyError::Input(e.to_string()))?;
                obj.into_iter().map(|(k, v)| (k, v, None)).collect()
            }
            InputFormat::Csv => {
                let mut rdr = csv::ReaderBuilder::new()
                    .trim(csv::Trim::All)
                    .from_reader(reader);
                let mut out = Vec::new();
                for (i, row) in rdr.records().enumerate() {
                    let row = row.map_err(|e| TaxonomyError::Input(e.to_string()))?;
                    if row.len() < 2 {
                        return Err(TaxonomyError::Input(format!(
                            "line {}: expected division,section",
                            i + 2
                        )));
                    }
                    out.push((row[0].to_string(), row[1].to_string(), Some(i + 2)));
                }
                out
            }
        };
        for (div, sec, line) in pairs {
            let d = parse_at(&div, line)?;
            let s = parse_at(&sec, line)?;
            if d.level() != 2 || s.level() != 1 {
                return Err(TaxonomyError::InvalidParent {
                    code: div,
                    parent: sec,
                    line,
                });
            }
            map.insert(d, s);
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Json,
}

impl InputFormat {
    /// Guesses from a file extension; anything but `.json` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => InputFormat::Json,
            _ => InputFormat::Csv,
        }
    }
}

impl FromStr for InputFormat {
    type Err = TaxonomyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "json" => Ok(InputFormat::Json),
            other => Err(TaxonomyError::Input(format!("unknown format {other:?}"))),
        }
    }
}

fn parse_at(raw: &str, line: Option<usize>) -> Result<Code, TaxonomyError> {
    Code::parse(raw).map_err(|_| TaxonomyError::MalformedCode {
        code: raw.to_string(),
        line,
    })
}

/// Validated, immutable classification forest.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    nodes: BTreeMap<Code, TaxonomyNode>,
    roots: Vec<Code>,
    by_level: [Vec<Code>; 4],
    pub source: String,
    pub generated_at: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    code: Code,
    level: u8,
    description: String,
    parent: Option<Code>,
}

#[derive(Serialize, Deserialize)]
struct CanonicalTaxonomy {
    nodes: Vec<NodeRecord>,
    generated_at: Option<u64>,
    source: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonInput {
    Canonical(CanonicalTaxonomy),
    Rows(Vec<RawRecord>),
}

/// Parses CSV (`code,description[,parent]`) or JSON (array of
/// `{code, description, parent?}` or the canonical object form).
pub fn parse_classification(
    reader: impl Read,
    format: InputFormat,
    section_map: Option<&SectionMap>,
) -> Result<Taxonomy, TaxonomyError> {
    match format {
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(reader);
            let headers = rdr
                .headers()
                .map_err(|e| TaxonomyError::Input(e.to_string()))?
                .clone();
            let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
            let code_col =
                col("code").ok_or_else(|| TaxonomyError::Input("missing `code` column".into()))?;
            let desc_col = col("description")
                .ok_or_else(|| TaxonomyError::Input("missing `description` column".into()))?;
            let parent_col = col("parent");
            let mut records = Vec::new();
            for (i, row) in rdr.records().enumerate() {
                let line = i + 2;
                let row = row.map_err(|e| TaxonomyError::Input(format!("line {line}: {e}")))?;
                let field = |c: usize| row.get(c).unwrap_or("").to_string();
                records.push(RawRecord {
                    code: field(code_col),
                    description: field(desc_col),
                    parent: parent_col.map(field).filter(|p| !p.is_empty()),
                    line: Some(line),
                });
            }
            Taxonomy::from_records(records, section_map, "csv")
        }
        InputFormat::Json => {
            let input: JsonInput =
                serde_json::from_reader(reader).map_err(|e| TaxonomyError::Input(e.to_string()))?;
            match input {
                JsonInput::Rows(mut rows) => {
                    for (i, r) in rows.iter_mut().enumerate() {
                        r.line = Some(i + 1);
                    }
                    Taxonomy::from_records(rows, section_map, "json")
                }
                JsonInput::Canonical(c) => {
                    let rows = c
                        .nodes
                        .into_iter()
                        .enumerate()
                        .map(|(i, n)| RawRecord {
                            code: n.code.0,
                            description: n.description,
                            parent: n.parent.map(|p| p.0),
                            line: Some(i + 1),
                        })
                        .collect();
                    let mut t = Taxonomy::from_records(rows, section_map, &c.source)?;
                    t.generated_at = c.generated_at;
                    Ok(t)
                }
            }
        }
    }
}

impl Taxonomy {
    pub fn empty() -> Taxonomy {
        Taxonomy {
            nodes: BTreeMap::new(),
            roots: Vec::new(),
            by_level: Default::default(),
            source: String::new(),
            generated_at: None,
        }
    }

    pub fn from_records(
        records: Vec<RawRecord>,
        section_map: Option<&SectionMap>,
        source: &str,
    ) -> Result<Taxonomy, TaxonomyError> {
        let mut nodes: BTreeMap<Code, TaxonomyNode> = BTreeMap::new();
        let mut lines: BTreeMap<Code, Option<usize>> = BTreeMap::new();

        for rec in records {
            let line = rec.line;
            let code = parse_at(&rec.code, line)?;
            let description = rec.description.trim().to_string();
            if description.is_empty() {
                return Err(TaxonomyError::EmptyDescription { code: code.0, line });
            }
            if nodes.contains_key(&code) {
                return Err(TaxonomyError::DuplicateCode { code: code.0, line });
            }
            let explicit = rec
                .parent
                .as_deref()
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_at(p, line))
                .transpose()?;
            let invalid = |p: &Code| TaxonomyError::InvalidParent {
                code: code.0.clone(),
                parent: p.0.clone(),
                line,
            };
            let parent = match code.level() {
                1 => match explicit {
                    Some(p) => return Err(invalid(&p)),
                    None => None,
                },
                2 => {
                    let p = explicit
                        .or_else(|| section_map.and_then(|m| m.get(&code).cloned()))
                        .ok_or_else(|| TaxonomyError::MissingSection {
                            code: code.0.clone(),
                            line,
                        })?;
                    if p.level() != 1 {
                        return Err(invalid(&p));
                    }
                    Some(p)
                }
                _ => {
                    let inferred = code.shape_parent();
                    if let Some(p) = &explicit {
                        if Some(p) != inferred.as_ref() {
                            return Err(invalid(p));
                        }
                    }
                    inferred
                }
            };
            lines.insert(code.clone(), line);
            nodes.insert(
                code.clone(),
                TaxonomyNode {
                    level: code.level(),
                    code,
                    description,
                    parent,
                    children: Vec::new(),
                },
            );
        }

        // Children in traversal order; the map iterates sorted.
        let links: Vec<(Code, Code)> = nodes
            .values()
            .filter_map(|n| n.parent.clone().map(|p| (p, n.code.clone())))
            .collect();
        for (parent, child) in links {
            match nodes.get_mut(&parent) {
                Some(p) => p.children.push(child),
                None => {
                    return Err(TaxonomyError::OrphanNode {
                        line: lines[&child],
                        code: child.0,
                        parent: parent.0,
                    })
                }
            }
        }

        let mut by_level: [Vec<Code>; 4] = Default::default();
        for code in nodes.keys() {
            by_level[(code.level() - 1) as usize].push(code.clone());
        }
        Ok(Taxonomy {
            roots: by_level[0].clone(),
            nodes,
            by_level,
            source: source.to_string(),
            generated_at: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, code: &Code) -> bool {
        self.nodes.contains_key(code)
    }

    /// Nodes in traversal order (level, then code).
    pub fn nodes(&self) -> impl Iterator<Item = &TaxonomyNode> {
        self.nodes.values()
    }

    pub fn codes(&self) -> impl Iterator<Item = &Code> {
        self.nodes.keys()
    }

    pub fn roots(&self) -> &[Code] {
        &self.roots
    }

    pub fn codes_at_level(&self, level: u8) -> &[Code] {
        match level {
            1..=4 => &self.by_level[(level - 1) as usize],
            _ => &[],
        }
    }

    pub fn node(&self, code: &Code) -> Result<&TaxonomyNode, TaxonomyError> {
        self.nodes
            .get(code)
            .ok_or_else(|| TaxonomyError::UnknownCode(code.0.clone()))
    }

    pub fn parent_of(&self, code: &Code) -> Result<Option<&TaxonomyNode>, TaxonomyError> {
        let node = self.node(code)?;
        Ok(node.parent.as_ref().map(|p| &self.nodes[p]))
    }

    /// Nodes sharing `code`'s parent, excluding `code`. Sections are mutual
    /// siblings.
    pub fn siblings_of(&self, code: &Code) -> Result<Vec<&TaxonomyNode>, TaxonomyError> {
        let node = self.node(code)?;
        let group: &[Code] = match &node.parent {
            Some(p) => &self.nodes[p].children,
            None => &self.roots,
        };
        Ok(group
            .iter()
            .filter(|c| *c != code)
            .map(|c| &self.nodes[c])
            .collect())
    }

    /// Ancestors from the section down to the parent.
    pub fn ancestors_of(&self, code: &Code) -> Result<Vec<&TaxonomyNode>, TaxonomyError> {
        let mut chain = Vec::new();
        let mut cur = self.node(code)?;
        while let Some(p) = &cur.parent {
            cur = &self.nodes[p];
            chain.push(cur);
        }
        chain.reverse();
        Ok(chain)
    }

    /// The node's ancestor at `level`, or the node itself when it sits at
    /// that level. `None` when the node is shallower than `level`.
    pub fn ancestor_at_level(
        &self,
        code: &Code,
        level: u8,
    ) -> Result<Option<&Code>, TaxonomyError> {
        let mut cur = self.node(code)?;
        if cur.level < level {
            return Ok(None);
        }
        while cur.level > level {
            cur = &self.nodes[cur.parent.as_ref().expect("non-root has parent")];
        }
        Ok(Some(&cur.code))
    }

    pub fn section_of(&self, code: &Code) -> Result<&Code, TaxonomyError> {
        Ok(self
            .ancestor_at_level(code, 1)?
            .expect("every node has a section"))
    }

    /// Node count for each of the four levels.
    pub fn validate_counts(&self) -> BTreeMap<u8, usize> {
        LEVELS
            .iter()
            .map(|&l| (l, self.codes_at_level(l).len()))
            .collect()
    }

    /// Keeps only the listed sections and their descendants.
    pub fn restrict_to_sections(&self, sections: &[&str]) -> Result<Taxonomy, TaxonomyError> {
        let keep: Vec<Code> = sections
            .iter()
            .map(|s| Code::parse(s))
            .collect::<Result<_, _>>()?;
        for s in &keep {
            self.node(s)?;
        }
        let records = self
            .nodes()
            .filter(|n| keep.contains(self.section_of(&n.code).expect("known code")))
            .map(|n| {
                RawRecord::new(
                    n.code.as_str(),
                    &n.description,
                    n.parent.as_ref().map(Code::as_str),
                )
            })
            .collect();
        let mut t = Taxonomy::from_records(records, None, &self.source)?;
        t.generated_at = self.generated_at;
        Ok(t)
    }

    /// Canonical JSON: `{nodes: [...], generated_at, source}`.
    pub fn to_canonical_json(&self) -> String {
        let canon = CanonicalTaxonomy {
            nodes: self
                .nodes()
                .map(|n| NodeRecord {
                    code: n.code.clone(),
                    level: n.level,
                    description: n.description.clone(),
                    parent: n.parent.clone(),
                })
                .collect(),
            generated_at: self.generated_at,
            source: self.source.clone(),
        };
        let mut s = serde_json::to_string_pretty(&canon).expect("taxonomy serializes");
        s.push('\n');
        s
    }

    pub fn from_canonical_json(text: &str) -> Result<Taxonomy, TaxonomyError> {
        parse_classification(text.as_bytes(), InputFormat::Json, None)
    }
}

/// Formats level counts as `1:21 2:88 3:272 4:615`.
pub fn format_counts(counts: &BTreeMap<u8, usize>) -> String {
    counts
        .iter()
        .map(|(l, c)| format!("{l}:{c}"))
        .collect::<Vec<_>>()
        .join(" ")
}
