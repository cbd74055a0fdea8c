use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::remote::RemoteClient;
use super::{l2_norm, EmbedError, EmbeddingSet};
use crate::preprocess::{EnrichedCorpus, Mode};
use crate::seed::keyed_rng;
use crate::taxonomy::{Code, Taxonomy};

/// Environment variable holding the remote provider credential.
pub const API_KEY_ENV: &str = "EMBED_API_KEY";
pub const DEFAULT_SYNTHETIC_DIMENSION: usize = 128;
const MIN_SYNTHETIC_DIMENSION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Remote,
    HashRandom,
    HierarchySynthetic,
}

impl ProviderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProviderKind::Remote => "remote",
            ProviderKind::HashRandom => "hash_random",
            ProviderKind::HierarchySynthetic => "hierarchy_synthetic",
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = EmbedError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(ProviderKind::Remote),
            "hash_random" => Ok(ProviderKind::HashRandom),
            "hierarchy_synthetic" => Ok(ProviderKind::HierarchySynthetic),
            other => Err(EmbedError::Config(format!("unknown provider {other:?}"))),
        }
    }
}

fn default_batch_size() -> usize {
    64
}
fn default_parallelism() -> usize {
    4
}
fn default_max_attempts() -> u32 {
    5
}
fn default_retry_base_ms() -> u64 {
    1000
}
fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
    /// Concurrent remote requests.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl ProviderConfig {
    pub fn new(kind: ProviderKind) -> Self {
        ProviderConfig {
            kind,
            endpoint: None,
            model: String::new(),
            dimensions: None,
            batch_size: default_batch_size(),
            seed: None,
            noise_scale: None,
            parallelism: default_parallelism(),
            cache_path: None,
            max_attempts: default_max_attempts(),
            retry_base_ms: default_retry_base_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn hash_random(seed: u64, dimensions: usize) -> Self {
        ProviderConfig {
            seed: Some(seed),
            dimensions: Some(dimensions),
            ..ProviderConfig::new(ProviderKind::HashRandom)
        }
    }

    pub fn hierarchy_synthetic(seed: u64, noise_scale: f64, dimensions: usize) -> Self {
        ProviderConfig {
            seed: Some(seed),
            noise_scale: Some(noise_scale),
            dimensions: Some(dimensions),
            ..ProviderConfig::new(ProviderKind::HierarchySynthetic)
        }
    }

    pub fn remote(endpoint: &str, model: &str) -> Self {
        ProviderConfig {
            endpoint: Some(endpoint.to_string()),
            model: model.to_string(),
            ..ProviderConfig::new(ProviderKind::Remote)
        }
    }

    /// Credential presence for `remote` is checked where the key is read.
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: &str| Err(EmbedError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.dimensions == Some(0) {
            return bad("dimensions must be positive");
        }
        match self.kind {
            ProviderKind::Remote => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return bad("remote provider requires an endpoint");
                }
                if self.model.is_empty() {
                    return bad("remote provider requires a model");
                }
                if self.parallelism == 0 || self.max_attempts == 0 {
                    return bad("parallelism and max_attempts must be positive");
                }
            }
            ProviderKind::HashRandom | ProviderKind::HierarchySynthetic => {
                if self.seed.is_none() {
                    return bad("synthetic providers require a seed");
                }
            }
        }
        if self.kind == ProviderKind::HierarchySynthetic {
            if let Some(n) = self.noise_scale {
                if !(n.is_finite() && n >= 0.0) {
                    return bad("noise_scale must be a finite non-negative number");
                }
            }
            if self.synthetic_dimension() < MIN_SYNTHETIC_DIMENSION {
                return bad("hierarchy_synthetic requires dimension >= 8");
            }
        }
        Ok(())
    }

    pub fn model_id(&self) -> String {
        if self.model.is_empty() {
            self.kind.as_str().to_string()
        } else {
            self.model.clone()
        }
    }

    fn synthetic_dimension(&self) -> usize {
        self.dimensions.unwrap_or(DEFAULT_SYNTHETIC_DIMENSION)
    }
}

/// Vectors for every corpus entry from the configured provider.
///
/// `taxonomy` is consulted only by `hierarchy_synthetic`. The remote
/// credential comes from [`API_KEY_ENV`].
pub fn embed_corpus(
    taxonomy: &Taxonomy,
    corpus: &EnrichedCorpus,
    cfg: &ProviderConfig,
) -> Result<EmbeddingSet, EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::Empty);
    }
    cfg.validate()?;
    let mode = corpus.entries[0].mode;
    match cfg.kind {
        ProviderKind::Remote => {
            let key = std::env::var(API_KEY_ENV)
                .ok()
                .filter(|k| !k.is_empty())
                .ok_or_else(|| EmbedError::Auth(format!("{API_KEY_ENV} is not set")))?;
            RemoteClient::from_config(cfg, key)?.embed(corpus)
        }
        ProviderKind::HashRandom => {
            let seed = cfg.seed.expect("validated");
            let dim = cfg.synthetic_dimension();
            let vectors = corpus
                .entries
                .iter()
                .map(|e| (e.code.clone(), hash_random_vector(seed, &e.text, dim)))
                .collect();
            finish(vectors, cfg, mode)
        }
        ProviderKind::HierarchySynthetic => {
            let seed = cfg.seed.expect("validated");
            let all = hierarchy_synthetic_set(
                taxonomy,
                seed,
                cfg.noise_scale.unwrap_or(0.0),
                cfg.synthetic_dimension(),
            )?;
            let mut vectors = BTreeMap::new();
            for e in &corpus.entries {
                let v = all.get(&e.code).ok_or_else(|| {
                    crate::taxonomy::TaxonomyError::UnknownCode(e.code.to_string())
                })?;
                vectors.insert(e.code.clone(), v.clone());
            }
            finish(vectors, cfg, mode)
        }
    }
}

fn finish(
    vectors: BTreeMap<Code, Vec<f64>>,
    cfg: &ProviderConfig,
    mode: Mode,
) -> Result<EmbeddingSet, EmbedError> {
    let mut set = EmbeddingSet::new(vectors, cfg.model_id(), mode, true)?;
    set.provenance.push(serde_json::json!({
        "provider": cfg.kind,
        "seed": cfg.seed,
        "noise_scale": cfg.noise_scale,
        "dimensions": set.dimension(),
    }));
    Ok(set)
}

fn random_unit(rng: &mut impl Rng, dimension: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&v);
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector drawn from a generator keyed by `(seed, text)`.
pub fn hash_random_vector(seed: u64, text: &str, dimension: usize) -> Vec<f64> {
    random_unit(&mut keyed_rng(seed, text), dimension)
}

fn perturb(parent: &[f64], seed: u64, code: &Code, noise_scale: f64) -> Vec<f64> {
    if noise_scale == 0.0 {
        return parent.to_vec();
    }
    let u = random_unit(&mut keyed_rng(seed, code.as_str()), parent.len());
    let v: Vec<f64> = parent
        .iter()
        .zip(&u)
        .map(|(p, n)| p + noise_scale * n)
        .collect();
    let norm = l2_norm(&v);
    v.into_iter().map(|x| x / norm).collect()
}

/// Roots are seeded unit vectors; each child is
/// `normalize(parent + noise_scale * u)` with `u` keyed by `(seed, code)`.
pub fn hierarchy_synthetic_vector(
    taxonomy: &Taxonomy,
    code: &Code,
    seed: u64,
    noise_scale: f64,
    dimension: usize,
) -> Result<Vec<f64>, EmbedError> {
    if dimension < MIN_SYNTHETIC_DIMENSION {
        return Err(EmbedError::Config(
            "hierarchy_synthetic requires dimension >= 8".into(),
        ));
    }
    let node = taxonomy.node(code)?;
    let ancestors = taxonomy.ancestors_of(code)?;
    let mut chain = ancestors
        .iter()
        .map(|n| &n.code)
        .chain(std::iter::once(&node.code));
    let root = chain.next().expect("chain has at least the node itself");
    let mut v = random_unit(&mut keyed_rng(seed, root.as_str()), dimension);
    for c in chain {
        v = perturb(&v, seed, c, noise_scale);
    }
    Ok(v)
}

/// All nodes at once; identical to calling [`hierarchy_synthetic_vector`]
/// per node.
pub fn hierarchy_synthetic_set(
    taxonomy: &Taxonomy,
    seed: u64,
    noise_scale: f64,
    dimension: usize,
) -> Result<BTreeMap<Code, Vec<f64>>, EmbedError> {
    if dimension < MIN_SYNTHETIC_DIMENSION {
        return Err(EmbedError::Config(
            "hierarchy_synthetic requires dimension >= 8".into(),
        ));
    }
    let mut out: BTreeMap<Code, Vec<f64>> = BTreeMap::new();
    // Traversal order visits parents before children.
    for node in taxonomy.nodes() {
        let v = match &node.parent {
            None => random_unit(&mut keyed_rng(seed, node.code.as_str()), dimension),
            Some(p) => perturb(&out[p], seed, &node.code, noise_scale),
        };
        out.insert(node.code.clone(), v);
    }
    Ok(out)
}
