//! Structural-retention metrics.
//!
//! All distances are `dist(a, b) = (1 - cosine(a, b)) / 2`, in `[0, 1]` and
//! exactly 0 for identical vectors.
//!
//! *Hierarchy loss* of a node is its distance to its parent divided by its
//! smallest distance to any sibling of that parent; a loss `>= 1` means the
//! node sits at least as close to some other branch as to its own parent.
//! *Hierarchy error* is the fraction of scorable nodes with loss `>= 1`.
//! Sections have no parent and are not scorable; neither is a node whose
//! parent has no siblings.
//!
//! Level-`l` silhouettes label every node of depth `>= l` by its level-`l`
//! ancestor (a level-`l` node labels itself). By default the separation term
//! `b(i)` is the distance to the nearest *other cluster centroid*; the
//! classical mean-distance-to-members form is available as
//! [`SilhouetteVariant::Classical`].

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::embed::EmbeddingSet;
use crate::taxonomy::{Code, Taxonomy, TaxonomyError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("code {0} missing from embedding set")]
    MissingCode(String),
    #[error("no node has a defined hierarchy loss")]
    EmptyEligible,
    #[error("level {level} has {found} cluster(s); at least two are needed")]
    TooFewClusters { level: u8, found: usize },
    #[error("silhouette level must be 1, 2 or 3, got {0}")]
    InvalidLevel(u8),
    #[error("silhouette for level {0} is unavailable")]
    LevelUnavailable(u8),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

pub fn dist(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    if a == b {
        return Ok(0.0);
    }
    let cos = dot / (na.sqrt() * nb.sqrt());
    Ok(((1.0 - cos) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HierarchyLoss {
    /// Section, or parent without siblings.
    Undefined,
    Finite(f64),
    /// Zero distance to a parent-sibling with a positive distance to the
    /// parent.
    Infinite,
}

impl HierarchyLoss {
    pub fn is_defined(&self) -> bool {
        !matches!(self, HierarchyLoss::Undefined)
    }

    pub fn is_misclassified(&self) -> bool {
        match self {
            HierarchyLoss::Finite(x) => *x >= 1.0,
            HierarchyLoss::Infinite => true,
            HierarchyLoss::Undefined => false,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            HierarchyLoss::Undefined => None,
            HierarchyLoss::Finite(x) => Some(*x),
            HierarchyLoss::Infinite => Some(f64::INFINITY),
        }
    }
}

// Undefined -> null, Infinite -> "inf".
impl Serialize for HierarchyLoss {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            HierarchyLoss::Undefined => s.serialize_none(),
            HierarchyLoss::Finite(x) => s.serialize_f64(*x),
            HierarchyLoss::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for HierarchyLoss {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Null => Ok(HierarchyLoss::Undefined),
            Value::Number(n) => n
                .as_f64()
                .map(HierarchyLoss::Finite)
                .ok_or_else(|| serde::de::Error::custom("loss out of range")),
            Value::String(s) if s == "inf" => Ok(HierarchyLoss::Infinite),
            other => Err(serde::de::Error::custom(format!("bad loss {other}"))),
        }
    }
}

fn vector<'a>(e: &'a EmbeddingSet, code: &Code) -> Result<&'a [f64], MetricsError> {
    e.get(code)
        .ok_or_else(|| MetricsError::MissingCode(code.to_string()))
}

pub fn hierarchy_loss(
    t: &Taxonomy,
    e: &EmbeddingSet,
    code: &Code,
) -> Result<HierarchyLoss, MetricsError> {
    let node = t.node(code)?;
    let v = vector(e, code)?;
    let Some(parent) = &node.parent else {
        return Ok(HierarchyLoss::Undefined);
    };
    let siblings = t.siblings_of(parent)?;
    if siblings.is_empty() {
        return Ok(HierarchyLoss::Undefined);
    }
    let numerator = dist(v, vector(e, parent)?)?;
    let mut denominator = f64::INFINITY;
    for s in siblings {
        denominator = denominator.min(dist(v, vector(e, &s.code)?)?);
    }
    Ok(if numerator == 0.0 {
        HierarchyLoss::Finite(0.0)
    } else if denominator == 0.0 {
        HierarchyLoss::Infinite
    } else {
        HierarchyLoss::Finite(numerator / denominator)
    })
}

/// Loss for every taxonomy node, in traversal order.
pub fn hierarchy_losses(
    t: &Taxonomy,
    e: &EmbeddingSet,
) -> Result<BTreeMap<Code, HierarchyLoss>, MetricsError> {
    let codes: Vec<&Code> = t.codes().collect();
    let losses: Vec<HierarchyLoss> = codes
        .par_iter()
        .map(|c| hierarchy_loss(t, e, c))
        .collect::<Result<_, _>>()?;
    Ok(codes.into_iter().cloned().zip(losses).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyError {
    /// `misclassified_count / eligible_count`.
    pub error: f64,
    pub eligible_count: usize,
    pub misclassified_count: usize,
    pub total_count: usize,
}

impl HierarchyError {
    fn from_losses<'a>(
        losses: impl Iterator<Item = &'a HierarchyLoss>,
    ) -> Result<Self, MetricsError> {
        let (mut eligible, mut bad, mut total) = (0usize, 0usize, 0usize);
        for l in losses {
            total += 1;
            if l.is_defined() {
                eligible += 1;
                bad += usize::from(l.is_misclassified());
            }
        }
        if eligible == 0 {
            return Err(MetricsError::EmptyEligible);
        }
        Ok(HierarchyError {
            error: bad as f64 / eligible as f64,
            eligible_count: eligible,
            misclassified_count: bad,
            total_count: total,
        })
    }

    /// Misclassified over all nodes, sections included.
    pub fn error_over_all(&self) -> f64 {
        self.misclassified_count as f64 / self.total_count as f64
    }
}

pub fn hierarchy_error(t: &Taxonomy, e: &EmbeddingSet) -> Result<HierarchyError, MetricsError> {
    HierarchyError::from_losses(hierarchy_losses(t, e)?.values())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteVariant {
    /// `b(i)`: distance to the nearest other-cluster centroid.
    #[default]
    Centroid,
    /// `b(i)`: smallest mean distance to the members of another cluster.
    Classical,
}

impl std::str::FromStr for SilhouetteVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centroid" => Ok(SilhouetteVariant::Centroid),
            "classical" => Ok(SilhouetteVariant::Classical),
            other => Err(format!("unknown silhouette variant {other:?}")),
        }
    }
}

/// Per-point silhouette coefficients. Singleton clusters score 0.
pub fn silhouette_coefficients(
    points: &[&[f64]],
    labels: &[usize],
    variant: SilhouetteVariant,
) -> Result<Vec<f64>, MetricsError> {
    assert_eq!(points.len(), labels.len(), "one label per point");
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(MetricsError::TooFewClusters {
            level: 0,
            found: clusters.len(),
        });
    }
    let centroids: BTreeMap<usize, Vec<f64>> = match variant {
        SilhouetteVariant::Centroid => clusters
            .iter()
            .map(|(&l, members)| {
                let dim = points[members[0]].len();
                let mut c = vec![0.0; dim];
                for &m in members {
                    for (acc, x) in c.iter_mut().zip(points[m]) {
                        *acc += x;
                    }
                }
                let n = members.len() as f64;
                c.iter_mut().for_each(|x| *x /= n);
                (l, c)
            })
            .collect(),
        SilhouetteVariant::Classical => BTreeMap::new(),
    };
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = &clusters[&labels[i]];
            if own.len() == 1 {
                return Ok(0.0);
            }
            let mut a = 0.0;
            for &j in own {
                if j != i {
                    a += dist(points[i], points[j])?;
                }
            }
            a /= (own.len() - 1) as f64;
            let mut b = f64::INFINITY;
            for (&l, members) in &clusters {
                if l == labels[i] {
                    continue;
                }
                let d = match variant {
                    SilhouetteVariant::Centroid => dist(points[i], &centroids[&l])?,
                    SilhouetteVariant::Classical => {
                        let mut s = 0.0;
                        for &m in members {
                            s += dist(points[i], points[m])?;
                        }
                        s / members.len() as f64
                    }
                };
                b = b.min(d);
            }
            let denom = a.max(b);
            Ok(if denom == 0.0 { 0.0 } else { (b - a) / denom })
        })
        .collect()
}

pub fn silhouette_from_labels(
    points: &[&[f64]],
    labels: &[usize],
    variant: SilhouetteVariant,
) -> Result<f64, MetricsError> {
    let coefficients = silhouette_coefficients(points, labels, variant)?;
    Ok(coefficients.iter().sum::<f64>() / coefficients.len() as f64)
}

pub fn silhouette_level(
    t: &Taxonomy,
    e: &EmbeddingSet,
    level: u8,
    variant: SilhouetteVariant,
) -> Result<f64, MetricsError> {
    if !(1..=3).contains(&level) {
        return Err(MetricsError::InvalidLevel(level));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut label_ids: BTreeMap<&Code, usize> = BTreeMap::new();
    for code in t.codes() {
        if let Some(anc) = t.ancestor_at_level(code, level)? {
            let next = label_ids.len();
            labels.push(*label_ids.entry(anc).or_insert(next));
            points.push(vector(e, code)?);
        }
    }
    silhouette_from_labels(&points, &labels, variant).map_err(|err| match err {
        MetricsError::TooFewClusters { found, .. } => MetricsError::TooFewClusters { level, found },
        other => other,
    })
}

/// Mean of the level 1–3 silhouettes.
pub fn mean_silhouette(by_level: &BTreeMap<u8, f64>) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for level in 1..=3u8 {
        sum += by_level
            .get(&level)
            .ok_or(MetricsError::LevelUnavailable(level))?;
    }
    Ok(sum / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub hierarchy_error: f64,
    pub eligible_count: usize,
    pub misclassified_count: usize,
    pub total_count: usize,
    /// Misclassified over all nodes, sections included.
    pub error_over_all: f64,
    pub silhouette_by_level: BTreeMap<u8, f64>,
    pub mean_silhouette: f64,
    pub silhouette_variant: SilhouetteVariant,
    pub per_node_loss: BTreeMap<Code, HierarchyLoss>,
    pub config_echo: Value,
}

pub fn evaluate(
    t: &Taxonomy,
    e: &EmbeddingSet,
    variant: SilhouetteVariant,
) -> Result<RetentionReport, MetricsError> {
    let losses = hierarchy_losses(t, e)?;
    let he = HierarchyError::from_losses(losses.values())?;
    let mut by_level = BTreeMap::new();
    for level in 1..=3u8 {
        by_level.insert(level, silhouette_level(t, e, level, variant)?);
    }
    Ok(RetentionReport {
        hierarchy_error: he.error,
        eligible_count: he.eligible_count,
        misclassified_count: he.misclassified_count,
        total_count: he.total_count,
        error_over_all: he.error_over_all(),
        mean_silhouette: mean_silhouette(&by_level)?,
        silhouette_by_level: by_level,
        silhouette_variant: variant,
        per_node_loss: losses,
        config_echo: serde_json::json!({
            "model_id": e.model_id,
            "mode": e.mode,
            "dimension": e.dimension(),
            "normalized": e.normalized(),
            "provenance": e.provenance,
        }),
    })
}

/// `code,level,loss,misclassified`; undefined losses leave the last two
/// columns empty.
pub fn write_losses_csv(report: &RetentionReport, w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["code", "level", "loss", "misclassified"])?;
    for (code, loss) in &report.per_node_loss {
        let (value, bad) = match loss {
            HierarchyLoss::Undefined => (String::new(), String::new()),
            HierarchyLoss::Infinite => ("inf".to_string(), "true".to_string()),
            HierarchyLoss::Finite(x) => (x.to_string(), loss.is_misclassified().to_string()),
        };
        out.write_record([code.as_str(), &code.level().to_string(), &value, &bad])?;
    }
    out.flush()?;
    Ok(())
}
