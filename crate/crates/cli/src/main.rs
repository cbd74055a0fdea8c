use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hierembed::embed::{embed_corpus, ProviderConfig, ProviderKind};
use hierembed::metrics::{evaluate, write_losses_csv, SilhouetteVariant};
use hierembed::pipeline::{
    config_digest, run_experiment, timestamp, ExperimentConfig, FileDigest, ManifestStep,
    RunManifest,
};
use hierembed::plot::render_svg;
use hierembed::preprocess::{enrich, EnrichedCorpus, Mode};
use hierembed::reduce::{reduce, ReductionConfig};
use hierembed::seed::derive_seed;
use hierembed::taxonomy::{format_counts, parse_classification, InputFormat, SectionMap, Taxonomy};
use hierembed::{fixtures, EmbeddingSet};

/// Embed a hierarchical classification and measure how much of the tree
/// the embeddings keep.
#[derive(Parser)]
#[command(name = "hierembed", version)]
struct Cli {
    /// Append a step record to this run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a classification file into canonical taxonomy JSON.
    Ingest(IngestArgs),
    /// Build model input text for every node.
    Enrich(EnrichArgs),
    /// Embed a corpus.
    Embed(EmbedArgs),
    /// Reduce an embedding set.
    Reduce(ReduceArgs),
    /// Score an embedding set against the taxonomy.
    Evaluate(EvaluateArgs),
    /// Run a (mode x reduction) grid.
    Experiment(ExperimentArgs),
    /// Scatter the first two coordinates as SVG.
    Plot(PlotArgs),
    /// Check that every file recorded in the manifest is unchanged.
    Verify,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV or JSON classification; the bundled NACE Rev. 2 table when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Defaults to the input extension.
    #[arg(long)]
    format: Option<InputFormat>,
    /// `division,section` CSV or JSON object for inputs without section parents.
    #[arg(long)]
    section_map: Option<PathBuf>,
    /// Fail unless the counts line equals this, e.g. "1:21 2:88 3:272 4:615".
    #[arg(long)]
    expect_counts: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnrichArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long, default_value = "with_parents")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Corpus JSON Lines from `enrich`.
    #[arg(long, visible_alias = "corpus")]
    input: PathBuf,
    /// Provider config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(long, visible_alias = "embeddings")]
    input: PathBuf,
    /// Reduction config JSON tagged by `method`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// tsne, umap, native_truncate or pca; used when no config is given.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long, visible_alias = "embeddings")]
    input: PathBuf,
    #[arg(long, default_value = "centroid")]
    silhouette: SilhouetteVariant,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    losses_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Comparison table, one row per cell.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long, visible_alias = "embeddings")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// What a command did, for the manifest.
struct Step {
    command: &'static str,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: Vec<(&'static str, u64)>,
    failed: bool,
}

impl Step {
    fn new(command: &'static str, config: serde_json::Value) -> Step {
        Step {
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
            failed: false,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let step = match &cli.command {
        Command::Ingest(a) => ingest(a)?,
        Command::Enrich(a) => cmd_enrich(a)?,
        Command::Embed(a) => cmd_embed(a)?,
        Command::Reduce(a) => cmd_reduce(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Experiment(a) => cmd_experiment(a)?,
        Command::Plot(a) => cmd_plot(a)?,
        Command::Verify => {
            let path = cli.manifest.as_deref().context("verify needs --manifest")?;
            RunManifest::load_or_new(path)?.verify()?;
            println!("manifest ok");
            return Ok(true);
        }
    };
    if let Some(path) = &cli.manifest {
        let mut m = RunManifest::load_or_new(path)?;
        let digests = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<Vec<_>, _>>()
        };
        m.record(ManifestStep {
            command: step.command.to_string(),
            config_digest: config_digest(&step.config),
            inputs: digests(&step.inputs)?,
            outputs: digests(&step.outputs)?,
            seeds: step
                .seeds
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            timestamp: timestamp(),
        })?;
        m.save(path)?;
    }
    Ok(!step.failed)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(
        fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    parse_classification(open(path)?, InputFormat::from_path(path), None)
        .with_context(|| format!("reading taxonomy {}", path.display()))
}

fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    EmbeddingSet::read_from(open(path)?)
        .with_context(|| format!("reading embeddings {}", path.display()))
}

fn ingest(a: &IngestArgs) -> Result<Step> {
    let mut step = Step::new(
        "ingest",
        serde_json::json!({"format": a.format.map(|f| format!("{f:?}"))}),
    );
    let mut t = match &a.input {
        Some(path) => {
            let map = match &a.section_map {
                Some(p) => {
                    step.inputs.push(p.clone());
                    Some(SectionMap::from_reader(
                        open(p)?,
                        InputFormat::from_path(p),
                    )?)
                }
                None => None,
            };
            step.inputs.push(path.clone());
            let format = a.format.unwrap_or_else(|| InputFormat::from_path(path));
            parse_classification(open(path)?, format, map.as_ref())
                .with_context(|| format!("ingesting {}", path.display()))?
        }
        None => fixtures::nace_rev2(),
    };
    let counts = format_counts(&t.validate_counts());
    println!("{counts}");
    if let Some(want) = &a.expect_counts {
        if want.trim() != counts {
            bail!("level counts {counts} differ from expected {want}");
        }
    }
    if let Some(out) = &a.out {
        t.generated_at = Some(timestamp());
        write(out, t.to_canonical_json())?;
        step.outputs.push(out.clone());
    }
    Ok(step)
}

fn cmd_enrich(a: &EnrichArgs) -> Result<Step> {
    let t = load_taxonomy(&a.taxonomy)?;
    let corpus = enrich(&t, a.mode);
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf)?;
    write(&a.out, buf)?;
    let mut step = Step::new("enrich", serde_json::json!({"mode": a.mode}));
    step.inputs.push(a.taxonomy.clone());
    step.outputs.push(a.out.clone());
    Ok(step)
}

fn cmd_embed(a: &EmbedArgs) -> Result<Step> {
    let t = load_taxonomy(&a.taxonomy)?;
    let corpus = EnrichedCorpus::read_jsonl(open(&a.input)?)?;
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_reader::<_, ProviderConfig>(open(p)?)
            .with_context(|| format!("parsing provider config {}", p.display()))?,
        None => ProviderConfig::new(a.provider.unwrap_or(ProviderKind::HierarchySynthetic)),
    };
    if let Some(kind) = a.provider {
        cfg.kind = kind;
    }
    if let Some(e) = &a.endpoint {
        cfg.endpoint = Some(e.clone());
    }
    if let Some(m) = &a.model {
        cfg.model = m.clone();
    }
    if a.dims.is_some() {
        cfg.dimensions = a.dims;
    }
    if a.noise_scale.is_some() {
        cfg.noise_scale = a.noise_scale;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if a.cache.is_some() {
        cfg.cache_path = a.cache.clone();
    }
    let mut step = Step::new("embed", serde_json::Value::Null);
    if cfg.kind != ProviderKind::Remote {
        let seed = derive_seed(a.seed, "embed");
        cfg.seed = Some(seed);
        step.seeds.push(("embed", seed));
    }
    let e = embed_corpus(&t, &corpus, &cfg)?;
    let mut bytes = Vec::new();
    e.write_to(&mut bytes)?;
    write(&a.out, bytes)?;
    step.config = serde_json::to_value(&cfg)?;
    step.inputs.extend([a.taxonomy.clone(), a.input.clone()]);
    step.outputs.push(a.out.clone());
    Ok(step)
}

fn cmd_reduce(a: &ReduceArgs) -> Result<Step> {
    let e = load_embeddings(&a.input)?;
    let mut cfg = match (&a.config, &a.method) {
        (Some(p), _) => ReductionConfig::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        (None, Some(m)) => ReductionConfig::for_method(m)?,
        (None, None) => bail!("give --method or --config"),
    };
    if let (Some(_), Some(m)) = (&a.config, &a.method) {
        if m != cfg.method() {
            bail!("--method {m} conflicts with config method {}", cfg.method());
        }
    }
    if let Some(d) = a.dims {
        cfg.set_dimensions(d);
    }
    let mut step = Step::new("reduce", serde_json::Value::Null);
    if cfg.seed().is_some() {
        let seed = derive_seed(a.seed, &format!("reduce/{}/{}", e.mode, cfg.method()));
        cfg.set_seed(seed);
        step.seeds.push(("reduce", seed));
    }
    let out = reduce(&e, &cfg)?;
    let mut bytes = Vec::new();
    out.write_to(&mut bytes)?;
    write(&a.out, bytes)?;
    step.config = serde_json::to_value(&cfg)?;
    step.inputs.push(a.input.clone());
    step.outputs.push(a.out.clone());
    if let Some(p) = &a.config {
        step.inputs.push(p.clone());
    }
    Ok(step)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Step> {
    let t = load_taxonomy(&a.taxonomy)?;
    let e = load_embeddings(&a.input)?;
    let report = evaluate(&t, &e, a.silhouette)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write(&a.out, json)?;
    println!(
        "hierarchy_error {} ({}/{}) mean_silhouette {}",
        report.hierarchy_error,
        report.misclassified_count,
        report.eligible_count,
        report.mean_silhouette
    );
    let mut step = Step::new("evaluate", serde_json::json!({"silhouette": a.silhouette}));
    step.inputs.extend([a.taxonomy.clone(), a.input.clone()]);
    step.outputs.push(a.out.clone());
    if let Some(p) = &a.losses_csv {
        let mut buf = Vec::new();
        write_losses_csv(&report, &mut buf)?;
        write(p, buf)?;
        step.outputs.push(p.clone());
    }
    Ok(step)
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<Step> {
    let t = load_taxonomy(&a.taxonomy)?;
    let text =
        fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let report = run_experiment(&t, &cfg)?;
    write(&a.out, report.to_json())?;
    let mut step = Step::new("experiment", serde_json::to_value(&cfg)?);
    step.inputs.extend([a.taxonomy.clone(), a.config.clone()]);
    step.outputs.push(a.out.clone());
    step.seeds.push(("experiment", cfg.seed));
    if let Some(p) = &a.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write(p, buf)?;
        step.outputs.push(p.clone());
    }
    for c in &report.cells {
        match &c.report {
            Some(r) => println!(
                "{}/{}: hierarchy_error {} mean_silhouette {}",
                c.mode, c.method, r.hierarchy_error, r.mean_silhouette
            ),
            None => println!(
                "{}/{}: FAILED {}",
                c.mode,
                c.method,
                c.error.as_deref().unwrap_or("")
            ),
        }
    }
    step.failed = !report.failures.is_empty();
    if step.failed {
        eprintln!(
            "{} of {} cells failed",
            report.failures.len(),
            report.cells.len()
        );
    }
    Ok(step)
}

fn cmd_plot(a: &PlotArgs) -> Result<Step> {
    let t = load_taxonomy(&a.taxonomy)?;
    let e = load_embeddings(&a.input)?;
    write(&a.out, render_svg(&t, &e)?)?;
    let mut step = Step::new("plot", serde_json::Value::Null);
    step.inputs.extend([a.taxonomy.clone(), a.input.clone()]);
    step.outputs.push(a.out.clone());
    Ok(step)
}
