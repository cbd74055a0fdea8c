//! Acceptance gate: one PASS/FAIL/SKIP line per criterion, exit status 1 on
//! any failure.

mod common;

use std::time::{Duration, Instant};

use hierembed::embed::{embed_corpus, truncate_renormalize, ProviderConfig, API_KEY_ENV};
use hierembed::fixtures::nace_rev2;
use hierembed::metrics::{
    dist, hierarchy_error, hierarchy_loss, silhouette_from_labels, silhouette_level,
    SilhouetteVariant,
};
use hierembed::pipeline::{run_experiment, ExperimentConfig};
use hierembed::preprocess::{enrich, Mode};
use hierembed::reduce::{
    conditional_probabilities, input_distances, joint_probabilities, kl_divergence, reduce,
    row_perplexity, tsne_gradient, tsne_run, umap_run, ReductionConfig, TsneConfig, UmapConfig,
};
use hierembed::taxonomy::format_counts;
use hierembed::{Code, EmbeddingSet, Taxonomy};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

enum Verdict {
    Checked(Outcome),
    Skipped(String),
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Verdict,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const MODERATE_NOISE: f64 = 0.5;

fn metric_oracle() -> Verdict {
    Verdict::Checked((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut compared = 0usize;
        for tree_idx in 0..100 {
            let size = rng.random_range(3..=50);
            let tree = common::random_tree(&mut rng, size);
            let t = common::to_taxonomy(&tree);
            let dim = rng.random_range(3..12);
            let e = common::random_embeddings(&mut rng, &tree, dim);
            let oracle = common::Oracle::new(&tree, &e);
            for (code, _) in &tree {
                let got =
                    hierarchy_loss(&t, &e, &code.parse().unwrap()).map_err(|e| e.to_string())?;
                match (oracle.loss(code), got.value()) {
                    (None, None) => {}
                    (Some(want), Some(v)) if common::close(v, want, 1e-12) => {}
                    (want, v) => {
                        return Err(format!(
                            "tree {tree_idx} {code}: loss {v:?} vs oracle {want:?}"
                        ))
                    }
                }
                compared += 1;
            }
            if let Some(want) = oracle.error() {
                let got = hierarchy_error(&t, &e).map_err(|e| e.to_string())?.error;
                ensure((got - want).abs() <= 1e-12, || {
                    format!("tree {tree_idx}: error {got} vs {want}")
                })?;
            }
            for level in 1..=3u8 {
                let got = silhouette_level(&t, &e, level, SilhouetteVariant::Centroid).ok();
                match (oracle.silhouette(level as usize), got) {
                    (None, None) => {}
                    (Some(want), Some(v)) if (v - want).abs() <= 1e-12 => {}
                    (want, v) => {
                        return Err(format!(
                            "tree {tree_idx} level {level}: silhouette {v:?} vs {want:?}"
                        ))
                    }
                }
            }
        }
        Ok(format!("100 trees, {compared} losses"))
    })())
}

fn perfect_structure() -> Verdict {
    Verdict::Checked((|| {
        let t = nace_rev2();
        let corpus = enrich(&t, Mode::WithParents);
        for seed in 0..10 {
            let cfg = ProviderConfig::hierarchy_synthetic(seed, 0.0, 64);
            let e = embed_corpus(&t, &corpus, &cfg).map_err(|e| e.to_string())?;
            let he = hierarchy_error(&t, &e).map_err(|e| e.to_string())?;
            ensure(he.error == 0.0, || {
                format!("seed {seed}: hierarchy_error {}", he.error)
            })?;
        }
        Ok("10 seeds, error 0".into())
    })())
}

fn dist_properties() -> Verdict {
    Verdict::Checked((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..10_000 {
            let d = rng.random_range(1..64);
            let a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let s: f64 = rng.random_range(1e-3..1e3);
            let dab = dist(&a, &b).map_err(|e| e.to_string())?;
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            ensure((0.0..=1.0).contains(&dab), || {
                format!("pair {i}: {dab} out of range")
            })?;
            ensure(dab == dist(&b, &a).unwrap(), || {
                format!("pair {i}: asymmetric")
            })?;
            ensure(dist(&a, &a).unwrap() == 0.0, || {
                format!("pair {i}: dist(a,a) != 0")
            })?;
            let ds = dist(&scaled, &b).unwrap();
            ensure((ds - dab).abs() <= 1e-12, || {
                format!("pair {i}: scale {s} moved {dab} to {ds}")
            })?;
        }
        Ok("10^4 pairs".into())
    })())
}

fn tsne_gradient_check() -> Verdict {
    Verdict::Checked((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst = 0.0f64;
        for inst in 0..20 {
            let dims = if inst % 2 == 0 { 2 } else { 3 };
            let data = Array2::from_shape_fn((10, 8), |_| rng.sample::<f64, _>(StandardNormal));
            let cond = conditional_probabilities(&input_distances(data.view()), 3.0)
                .map_err(|e| e.to_string())?;
            let p = joint_probabilities(&cond);
            let y = Array2::from_shape_fn((10, dims), |_| rng.random_range(-2.0..2.0));
            let g = tsne_gradient(&p, &y).map_err(|e| e.to_string())?;
            let h = 1e-6;
            for i in 0..10 {
                for k in 0..dims {
                    let mut plus = y.clone();
                    plus[[i, k]] += h;
                    let mut minus = y.clone();
                    minus[[i, k]] -= h;
                    let fd = (kl_divergence(&p, &plus).unwrap()
                        - kl_divergence(&p, &minus).unwrap())
                        / (2.0 * h);
                    let rel = (g[[i, k]] - fd).abs() / g[[i, k]].abs().max(fd.abs()).max(1e-8);
                    worst = worst.max(rel);
                    ensure(rel < 1e-4, || {
                        format!("instance {inst} ({i},{k}): {} vs {fd}", g[[i, k]])
                    })?;
                }
            }
        }
        Ok(format!("20 instances, worst relative error {worst:.2e}"))
    })())
}

fn perplexity_calibration() -> Verdict {
    Verdict::Checked((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((200, 32), |_| rng.sample::<f64, _>(StandardNormal));
        let p = conditional_probabilities(&input_distances(data.view()), 11.0)
            .map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for i in 0..200 {
            let dev = (row_perplexity(&p, i) - 11.0).abs();
            worst = worst.max(dev);
            ensure(dev < 1e-4, || {
                format!("row {i}: perplexity {}", row_perplexity(&p, i))
            })?;
        }
        Ok(format!("200 rows, worst deviation {worst:.2e}"))
    })())
}

fn blobs() -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let centers: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..64).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let data = Array2::from_shape_fn((100, 64), |(i, d)| {
        centers[i / 50][d] + 0.1 * rng.sample::<f64, _>(StandardNormal)
    });
    (data, (0..100).map(|i| i / 50).collect())
}

fn blob_silhouette(y: &Array2<f64>, labels: &[usize]) -> f64 {
    let rows: Vec<Vec<f64>> = y.rows().into_iter().map(|r| r.to_vec()).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    silhouette_from_labels(&refs, labels, SilhouetteVariant::Centroid).unwrap()
}

fn reduction_sanity() -> Verdict {
    Verdict::Checked((|| {
        let (data, labels) = blobs();
        let rows: Vec<Vec<f64>> = data.rows().into_iter().map(|r| r.to_vec()).collect();
        let intra = common::Oracle::dist(&rows[0], &rows[1]);
        let inter = common::Oracle::dist(&rows[0], &rows[99]);
        ensure(inter > 20.0 * intra, || {
            format!("blobs not separated: {inter} vs {intra}")
        })?;
        let t = tsne_run(data.view(), &TsneConfig::default()).map_err(|e| e.to_string())?;
        let st = blob_silhouette(&t.embedding, &labels);
        let u = umap_run(data.view(), &UmapConfig::default()).map_err(|e| e.to_string())?;
        let su = blob_silhouette(&u, &labels);
        ensure(st > 0.5 && su > 0.5, || {
            format!("silhouette t-SNE {st:.3}, UMAP {su:.3}")
        })?;
        Ok(format!("silhouette t-SNE {st:.3}, UMAP {su:.3}"))
    })())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
        * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn truncation() -> Verdict {
    Verdict::Checked((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Every class code plus enough group codes to reach 10^4 distinct keys.
        let classes = (1..100).flat_map(|d| (0..100).map(move |c| format!("{d:02}.{c:02}")));
        let groups = (1..100).flat_map(|d| (0..10).map(move |g| format!("{d:02}.{g}")));
        let vectors: std::collections::BTreeMap<Code, Vec<f64>> = classes
            .chain(groups)
            .take(10_000)
            .map(|code| (code.parse().unwrap(), common::random_unit(&mut rng, 64)))
            .collect();
        ensure(vectors.len() == 10_000, || {
            format!("{} vectors", vectors.len())
        })?;
        let e = EmbeddingSet::new(vectors, "random", Mode::Raw, true).map_err(|e| e.to_string())?;
        let rows: Vec<&[f64]> = e.vectors().values().map(Vec::as_slice).collect();
        for k in [1, 5, 32, 64] {
            let t = truncate_renormalize(&e, k).map_err(|e| e.to_string())?;
            let cut: Vec<&[f64]> = t.vectors().values().map(Vec::as_slice).collect();
            for v in &cut {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                ensure((n - 1.0).abs() <= 1e-12, || format!("k={k}: norm {n}"))?;
            }
            let again = truncate_renormalize(&t, k).map_err(|e| e.to_string())?;
            for (a, b) in t.vectors().values().zip(again.vectors().values()) {
                ensure(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12), || {
                    format!("k={k}: not idempotent")
                })?;
            }
            for i in 0..cut.len() {
                let j = (i * 7919 + 13) % cut.len();
                let want = cosine(&rows[i][..k], &rows[j][..k]);
                let got = cosine(cut[i], cut[j]);
                ensure((want - got).abs() <= 1e-12, || {
                    format!("k={k} pair ({i},{j}): {got} vs {want}")
                })?;
            }
        }
        Ok("10^4 vectors, k in {1,5,32,64}".into())
    })())
}

fn subset() -> Taxonomy {
    nace_rev2()
        .restrict_to_sections(&["A", "B", "D", "E"])
        .unwrap()
}

fn determinism() -> Verdict {
    Verdict::Checked((|| {
        let t = subset();
        let corpus = enrich(&t, Mode::WithParents);
        let e = embed_corpus(
            &t,
            &corpus,
            &ProviderConfig::hierarchy_synthetic(11, 0.1, 32),
        )
        .map_err(|e| e.to_string())?;
        let mut methods = Vec::new();
        for m in ["tsne", "umap", "native_truncate", "pca"] {
            let mut cfg = ReductionConfig::for_method(m).map_err(|e| e.to_string())?;
            cfg.set_seed(42);
            let a = reduce(&e, &cfg)
                .map_err(|err| format!("{m}: {err}"))?
                .to_bytes();
            let b = reduce(&e, &cfg)
                .map_err(|err| format!("{m}: {err}"))?
                .to_bytes();
            ensure(a == b, || format!("{m}: outputs differ"))?;
            methods.push(m);
        }
        let grid = ExperimentConfig::from_json(
            r#"{"seed": 5, "provider": {"kind": "hierarchy_synthetic", "noise_scale": 0.1, "dimensions": 32},
                "mode_providers": {"raw": {"kind": "hash_random", "dimensions": 32}},
                "modes": ["with_parents", "raw"],
                "reductions": ["none", "tsne", "umap", "native_truncate", "pca"]}"#,
        )
        .map_err(|e| e.to_string())?;
        let run = || -> Result<(String, Vec<u8>), String> {
            let r = run_experiment(&t, &grid).map_err(|e| e.to_string())?;
            let mut csv = Vec::new();
            r.write_csv(&mut csv).map_err(|e| e.to_string())?;
            Ok((r.to_json(), csv))
        };
        ensure(run()? == run()?, || "experiment grid outputs differ".into())?;
        Ok(format!(
            "{} and a 10-cell grid, {} nodes",
            methods.join("/"),
            t.len()
        ))
    })())
}

fn ingestion_counts() -> Verdict {
    Verdict::Checked((|| {
        let line = format_counts(&nace_rev2().validate_counts());
        ensure(line == "1:21 2:88 3:272 4:615", || line.clone())?;
        Ok(line)
    })())
}

fn golden_text() -> Verdict {
    Verdict::Checked((|| {
        let t = nace_rev2();
        let c = enrich(&t, Mode::WithParents);
        let got = &c
            .get(&"10.52".parse().unwrap())
            .ok_or("10.52 missing")?
            .text;
        let want = "Manufacturing. Manufacture of food products. Manufacture of dairy products. Manufacture of ice cream";
        ensure(got == want, || format!("got {got:?}"))?;
        Ok("10.52".into())
    })())
}

fn directional() -> Verdict {
    Verdict::Checked((|| {
        let t = nace_rev2();
        let mut worst_gap = f64::INFINITY;
        for seed in 0..10u64 {
            let grid = ExperimentConfig::from_json(&format!(
                r#"{{"seed": {seed}, "provider": {{"kind": "hierarchy_synthetic", "noise_scale": {MODERATE_NOISE}}},
                    "mode_providers": {{"raw": {{"kind": "hash_random"}}}},
                    "modes": ["with_parents", "raw"], "reductions": ["none"]}}"#
            ))
            .map_err(|e| e.to_string())?;
            let r = run_experiment(&t, &grid).map_err(|e| e.to_string())?;
            let err = |i: usize| {
                r.cells[i]
                    .report
                    .as_ref()
                    .map(|x| x.hierarchy_error)
                    .ok_or_else(|| r.failures.join("; "))
            };
            let (structured, flat) = (err(0)?, err(1)?);
            ensure(structured < flat, || {
                format!("seed {seed}: {structured} vs {flat}")
            })?;
            worst_gap = worst_gap.min(flat - structured);
        }
        Ok(format!(
            "10 seeds at noise {MODERATE_NOISE}, smallest gap {worst_gap:.3}"
        ))
    })())
}

fn live_provider() -> Verdict {
    if std::env::var(API_KEY_ENV)
        .map(|k| k.is_empty())
        .unwrap_or(true)
    {
        return Verdict::Skipped(format!("{API_KEY_ENV} not set"));
    }
    Verdict::Checked((|| {
        let endpoint =
            std::env::var("EMBED_ENDPOINT").unwrap_or_else(|_| "https://api.openai.com/v1".into());
        let model =
            std::env::var("EMBED_MODEL").unwrap_or_else(|_| "text-embedding-3-large".into());
        let t = nace_rev2();
        let mut cfg = ProviderConfig::remote(&endpoint, &model);
        cfg.cache_path = Some(std::env::temp_dir().join("hierembed-live-cache.jsonl"));
        let embed = |mode| embed_corpus(&t, &enrich(&t, mode), &cfg).map_err(|e| e.to_string());
        let wp = embed(Mode::WithParents)?;
        let raw = embed(Mode::Raw)?;
        let he = |e: &EmbeddingSet| {
            hierarchy_error(&t, e)
                .map(|h| h.error)
                .map_err(|e| e.to_string())
        };
        let (e_wp, e_raw) = (he(&wp)?, he(&raw)?);
        let tsne = reduce(&wp, &ReductionConfig::for_method("tsne").unwrap())
            .map_err(|e| e.to_string())?;
        let cut = reduce(
            &wp,
            &ReductionConfig::for_method("native_truncate").unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let (e_tsne, e_cut) = (he(&tsne)?, he(&cut)?);
        let summary = format!(
            "with_parents {e_wp:.4}, raw {e_raw:.4}, tsne5 {e_tsne:.4}, truncate5 {e_cut:.4}"
        );
        ensure(e_wp < 0.01 && e_raw > 0.10 && e_tsne < e_cut, || {
            summary.clone()
        })?;
        Ok(summary)
    })())
}

fn main() {
    let criteria = [
        Criterion {
            name: "metric oracle equivalence",
            limit: Some(Duration::from_secs(10)),
            run: metric_oracle,
        },
        Criterion {
            name: "perfect-structure zero error",
            limit: Some(Duration::from_secs(5)),
            run: perfect_structure,
        },
        Criterion {
            name: "dist properties",
            limit: None,
            run: dist_properties,
        },
        Criterion {
            name: "t-SNE gradient check",
            limit: Some(Duration::from_secs(30)),
            run: tsne_gradient_check,
        },
        Criterion {
            name: "t-SNE perplexity calibration",
            limit: None,
            run: perplexity_calibration,
        },
        Criterion {
            name: "reduction sanity on blobs",
            limit: Some(Duration::from_secs(60)),
            run: reduction_sanity,
        },
        Criterion {
            name: "truncate_renormalize",
            limit: None,
            run: truncation,
        },
        Criterion {
            name: "determinism",
            limit: None,
            run: determinism,
        },
        Criterion {
            name: "ingestion counts",
            limit: None,
            run: ingestion_counts,
        },
        Criterion {
            name: "preprocessing golden text",
            limit: None,
            run: golden_text,
        },
        Criterion {
            name: "directional replication offline",
            limit: None,
            run: directional,
        },
        Criterion {
            name: "live provider replication",
            limit: None,
            run: live_provider,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let verdict = (c.run)();
        let elapsed = start.elapsed();
        let line = match verdict {
            Verdict::Skipped(why) => format!("SKIP  {}: {why}", c.name),
            Verdict::Checked(outcome) => {
                let outcome = match (outcome, c.limit) {
                    (Ok(_), Some(limit)) if elapsed > limit => Err(format!(
                        "took {:.2}s, limit {}s",
                        elapsed.as_secs_f64(),
                        limit.as_secs()
                    )),
                    (o, _) => o,
                };
                match outcome {
                    Ok(detail) => {
                        format!("PASS  {} ({:.2}s): {detail}", c.name, elapsed.as_secs_f64())
                    }
                    Err(why) => {
                        failed += 1;
                        format!("FAIL  {} ({:.2}s): {why}", c.name, elapsed.as_secs_f64())
                    }
                }
            }
        };
        println!("{line}");
    }
    println!("acceptance: {} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
