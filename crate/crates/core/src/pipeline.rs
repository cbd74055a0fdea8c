//! Experiment grids over (mode, reduction) cells and run manifests.
//!
//! An experiment config looks like:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "provider": {"kind": "hierarchy_synthetic", "noise_scale": 0.05},
//!   "mode_providers": {"raw": {"kind": "hash_random"}},
//!   "modes": ["with_parents", "raw"],
//!   "reductions": ["none", {"method": "tsne"}, {"method": "native_truncate", "dimensions": 5}]
//! }
//! ```
//!
//! Provider and reducer seeds are overwritten with values derived from the
//! experiment seed, so one number pins the whole grid.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{embed_corpus, EmbeddingSet, ProviderConfig};
use crate::metrics::{evaluate, RetentionReport, SilhouetteVariant};
use crate::preprocess::{enrich, Mode};
use crate::reduce::{reduce, ReductionConfig};
use crate::seed::derive_seed;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("experiment grid is empty: {0}")]
    EmptyGrid(&'static str),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a value's compact JSON (object keys sorted).
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    sha256_hex(&serde_json::to_vec(&v).expect("serializable"))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(sha256_hex(&bytes))
}

/// Unix seconds from `SOURCE_DATE_EPOCH` when set, else the clock.
pub fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

/// A grid column: either no reduction or a reducer config. Accepts a bare
/// method name or a tagged object.
#[derive(Debug, Clone, PartialEq)]
pub enum CellReduction {
    None,
    Reduce(ReductionConfig),
}

impl CellReduction {
    pub fn method(&self) -> &'static str {
        match self {
            CellReduction::None => "none",
            CellReduction::Reduce(c) => c.method(),
        }
    }

    pub fn parse(method: &str) -> Result<CellReduction, PipelineError> {
        CellReduction::try_from(Value::from(method)).map_err(PipelineError::Config)
    }
}

impl TryFrom<Value> for CellReduction {
    type Error = String;

    fn try_from(v: Value) -> Result<Self, String> {
        let method = match &v {
            Value::String(s) => s.clone(),
            Value::Object(m) => m
                .get("method")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            _ => return Err("reduction must be a method name or an object".into()),
        };
        if method == "none" {
            return match &v {
                Value::Object(m) if m.len() > 1 => Err("`none` takes no parameters".into()),
                _ => Ok(CellReduction::None),
            };
        }
        let cfg = match v {
            Value::String(s) => ReductionConfig::for_method(&s),
            other => ReductionConfig::from_json(&other.to_string()),
        };
        cfg.map(CellReduction::Reduce).map_err(|e| e.to_string())
    }
}

impl From<CellReduction> for Value {
    fn from(c: CellReduction) -> Value {
        match c {
            CellReduction::None => serde_json::json!({"method": "none"}),
            CellReduction::Reduce(r) => serde_json::to_value(r).expect("serializable"),
        }
    }
}

impl Serialize for CellReduction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Value::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CellReduction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        CellReduction::try_from(Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub provider: ProviderConfig,
    /// Replaces `provider` for the listed modes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mode_providers: BTreeMap<Mode, ProviderConfig>,
    pub modes: Vec<Mode>,
    pub reductions: Vec<CellReduction>,
    #[serde(default)]
    pub silhouette_variant: SilhouetteVariant,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Provider for `mode` with its seed derived from the experiment seed.
    pub fn provider_for(&self, mode: Mode) -> ProviderConfig {
        let mut p = self
            .mode_providers
            .get(&mode)
            .unwrap_or(&self.provider)
            .clone();
        if p.kind != crate::embed::ProviderKind::Remote {
            p.seed = Some(derive_seed(self.seed, "embed"));
        }
        p
    }

    /// Reduction for a cell with its seed derived from the experiment seed.
    pub fn reduction_for(&self, mode: Mode, reduction: &CellReduction) -> CellReduction {
        match reduction {
            CellReduction::None => CellReduction::None,
            CellReduction::Reduce(r) => {
                let mut r = r.clone();
                r.set_seed(derive_seed(
                    self.seed,
                    &format!("reduce/{mode}/{}", r.method()),
                ));
                CellReduction::Reduce(r)
            }
        }
    }

    fn check(&self) -> Result<(), PipelineError> {
        if self.modes.is_empty() {
            return Err(PipelineError::EmptyGrid("no modes"));
        }
        if self.reductions.is_empty() {
            return Err(PipelineError::EmptyGrid("no reductions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: Mode,
    pub method: String,
    pub model_id: String,
    pub provider: ProviderConfig,
    pub reduction: CellReduction,
    /// Reducer seed, or the embedding seed when no reducer runs.
    pub seed: Option<u64>,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RetentionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub cells: Vec<CellResult>,
    /// `"mode/method: message"` for every failed cell.
    pub failures: Vec<String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    /// One row per cell: axes first, then metrics.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "mode",
            "method",
            "model",
            "dimension",
            "seed",
            "config_digest",
            "hierarchy_error",
            "misclassified",
            "eligible",
            "error_over_all",
            "silhouette_1",
            "silhouette_2",
            "silhouette_3",
            "mean_silhouette",
            "error",
        ])?;
        for c in &self.cells {
            let mut row = vec![c.mode.to_string(), c.method.clone(), c.model_id.clone()];
            match &c.report {
                Some(r) => {
                    let dim = r.config_echo["dimension"].to_string();
                    row.push(dim);
                    row.push(c.seed.map(|s| s.to_string()).unwrap_or_default());
                    row.push(c.config_digest.clone());
                    row.push(r.hierarchy_error.to_string());
                    row.push(r.misclassified_count.to_string());
                    row.push(r.eligible_count.to_string());
                    row.push(r.error_over_all.to_string());
                    for level in 1..=3u8 {
                        row.push(
                            r.silhouette_by_level
                                .get(&level)
                                .map(|v| v.to_string())
                                .unwrap_or_default(),
                        );
                    }
                    row.push(r.mean_silhouette.to_string());
                    row.push(String::new());
                }
                None => {
                    row.push(String::new());
                    row.push(c.seed.map(|s| s.to_string()).unwrap_or_default());
                    row.push(c.config_digest.clone());
                    row.extend(std::iter::repeat_n(String::new(), 8));
                    row.push(c.error.clone().unwrap_or_default());
                }
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs every cell. Embeddings are computed once per mode; cells run in
/// parallel and keep grid order. A failing step fails only its cell.
pub fn run_experiment(
    t: &Taxonomy,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport, PipelineError> {
    cfg.check()?;
    let embeddings: Vec<Result<EmbeddingSet, String>> = cfg
        .modes
        .par_iter()
        .map(|&mode| {
            let corpus = enrich(t, mode);
            embed_corpus(t, &corpus, &cfg.provider_for(mode)).map_err(|e| format!("embed: {e}"))
        })
        .collect();

    let jobs: Vec<(usize, &CellReduction)> = (0..cfg.modes.len())
        .flat_map(|m| cfg.reductions.iter().map(move |r| (m, r)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(m, reduction)| {
            let mode = cfg.modes[m];
            let provider = cfg.provider_for(mode);
            let reduction = cfg.reduction_for(mode, reduction);
            let seed = match &reduction {
                CellReduction::None => provider.seed,
                CellReduction::Reduce(r) => r.seed(),
            };
            let digest = config_digest(&serde_json::json!({
                "mode": mode,
                "provider": provider,
                "reduction": reduction,
                "silhouette_variant": cfg.silhouette_variant,
            }));
            let outcome = embeddings[m].as_ref().map_err(Clone::clone).and_then(|e| {
                let reduced = match &reduction {
                    CellReduction::None => e.clone(),
                    CellReduction::Reduce(r) => {
                        reduce(e, r).map_err(|err| format!("reduce: {err}"))?
                    }
                };
                evaluate(t, &reduced, cfg.silhouette_variant)
                    .map_err(|err| format!("evaluate: {err}"))
            });
            let (report, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e)),
            };
            CellResult {
                mode,
                method: reduction.method().to_string(),
                model_id: provider.model_id(),
                provider,
                reduction,
                seed,
                config_digest: digest,
                report,
                error,
            }
        })
        .collect();

    let failures = cells
        .iter()
        .filter_map(|c| {
            c.error
                .as_ref()
                .map(|e| format!("{}/{}: {e}", c.mode, c.method))
        })
        .collect();
    Ok(ExperimentReport {
        config_digest: config_digest(cfg),
        config: cfg.clone(),
        cells,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<FileDigest, PipelineError> {
        Ok(FileDigest {
            path: path.to_string_lossy().into_owned(),
            sha256: file_digest(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub command: String,
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub seeds: BTreeMap<String, u64>,
    pub timestamp: u64,
}

/// Ordered record of pipeline steps and the files they read and wrote.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub steps: Vec<ManifestStep>,
    pub created_at: u64,
    pub updated_at: u64,
}

impl RunManifest {
    pub fn load_or_new(path: &Path) -> Result<RunManifest, PipelineError> {
        match std::fs::read_to_string(path) {
            Ok(text) => {
                serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let now = timestamp();
                Ok(RunManifest {
                    steps: Vec::new(),
                    created_at: now,
                    updated_at: now,
                })
            }
            Err(source) => Err(PipelineError::Io {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    /// Latest recorded digest for a file written by an earlier step.
    fn produced(&self, path: &str, before: usize) -> Option<&str> {
        self.steps[..before]
            .iter()
            .rev()
            .flat_map(|s| s.outputs.iter())
            .find(|f| f.path == path)
            .map(|f| f.sha256.as_str())
    }

    /// Adds a step. Re-running a step with the same command and outputs
    /// replaces it in place. Inputs produced by earlier steps must still
    /// match their recorded digests.
    pub fn record(&mut self, step: ManifestStep) -> Result<(), PipelineError> {
        let slot = self
            .steps
            .iter()
            .position(|s| s.command == step.command && paths(&s.outputs) == paths(&step.outputs));
        let before = slot.unwrap_or(self.steps.len());
        for input in &step.inputs {
            if let Some(want) = self.produced(&input.path, before) {
                if want != input.sha256 {
                    return Err(PipelineError::Manifest(format!(
                        "{} changed since it was written (recorded {want}, found {})",
                        input.path, input.sha256
                    )));
                }
            }
        }
        self.updated_at = step.timestamp;
        match slot {
            Some(i) => self.steps[i] = step,
            None => self.steps.push(step),
        }
        Ok(())
    }

    /// Checks that every input produced by an earlier step carries the
    /// digest recorded at write time, and that the files still match.
    pub fn verify(&self) -> Result<(), PipelineError> {
        for (i, step) in self.steps.iter().enumerate() {
            for input in &step.inputs {
                if let Some(want) = self.produced(&input.path, i) {
                    if want != input.sha256 {
                        return Err(PipelineError::Manifest(format!(
                            "step {i} ({}) read {} with digest {}, but it was written as {want}",
                            step.command, input.path, input.sha256
                        )));
                    }
                }
            }
        }
        let mut latest: BTreeMap<&str, &str> = BTreeMap::new();
        for f in self.steps.iter().flat_map(|s| s.outputs.iter()) {
            latest.insert(&f.path, &f.sha256);
        }
        for (path, want) in latest {
            let found = file_digest(Path::new(path))?;
            if found != want {
                return Err(PipelineError::Manifest(format!(
                    "{path} no longer matches its recorded digest"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        std::fs::write(path, s).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn paths(files: &[FileDigest]) -> Vec<&str> {
    files.iter().map(|f| f.path.as_str()).collect()
}
