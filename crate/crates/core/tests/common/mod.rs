//! Shared generators and brute-force metric transcriptions for the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hierembed::preprocess::Mode;
use hierembed::taxonomy::{RawRecord, Taxonomy};
use hierembed::EmbeddingSet;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// Random NACE-shaped tree of at most `max_nodes` nodes as `(code, parent)`
/// pairs, with at least two sections.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize) -> Vec<(String, Option<String>)> {
    let mut letters: Vec<char> = ('A'..='U').collect();
    letters.shuffle(rng);
    let n_sections = rng.random_range(2..=5.min(max_nodes));
    let mut nodes: Vec<(String, Option<String>)> = letters[..n_sections]
        .iter()
        .map(|c| (c.to_string(), None))
        .collect();
    let mut divisions: Vec<u32> = (1..100).collect();
    divisions.shuffle(rng);
    let mut div_iter = divisions.into_iter();
    while nodes.len() < max_nodes {
        let roll: f64 = rng.random();
        let divs: Vec<String> = nodes
            .iter()
            .filter(|n| n.0.len() == 2)
            .map(|n| n.0.clone())
            .collect();
        let groups: Vec<String> = nodes
            .iter()
            .filter(|n| n.0.len() == 4)
            .map(|n| n.0.clone())
            .collect();
        if roll < 0.3 || divs.is_empty() {
            let Some(d) = div_iter.next() else { break };
            let section = letters[rng.random_range(0..n_sections)].to_string();
            nodes.push((format!("{d:02}"), Some(section)));
        } else if roll < 0.6 || groups.is_empty() {
            let d = &divs[rng.random_range(0..divs.len())];
            let g = format!("{d}.{}", rng.random_range(1..10));
            if !nodes.iter().any(|n| n.0 == g) {
                nodes.push((g, Some(d.clone())));
            }
        } else {
            let g = &groups[rng.random_range(0..groups.len())];
            let c = format!("{g}{}", rng.random_range(0..10));
            if !nodes.iter().any(|n| n.0 == c) {
                nodes.push((c, Some(g.clone())));
            }
        }
    }
    nodes
}

pub fn to_taxonomy(tree: &[(String, Option<String>)]) -> Taxonomy {
    let records = tree
        .iter()
        .map(|(c, p)| RawRecord::new(c, &format!("node {c}"), p.as_deref()))
        .collect();
    Taxonomy::from_records(records, None, "random").unwrap()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_embeddings(
    rng: &mut impl Rng,
    tree: &[(String, Option<String>)],
    dim: usize,
) -> EmbeddingSet {
    let vectors = tree
        .iter()
        .map(|(c, _)| (c.parse().unwrap(), random_unit(rng, dim)))
        .collect();
    EmbeddingSet::new(vectors, "random", Mode::Raw, true).unwrap()
}

/// Independent transcription of the metric definitions over plain maps.
pub struct Oracle {
    parent: BTreeMap<String, Option<String>>,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl Oracle {
    pub fn new(tree: &[(String, Option<String>)], e: &EmbeddingSet) -> Oracle {
        Oracle {
            parent: tree.iter().cloned().collect(),
            vectors: tree
                .iter()
                .map(|(c, _)| (c.clone(), e.get(&c.parse().unwrap()).unwrap().to_vec()))
                .collect(),
        }
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        ((1.0 - dot / (na * nb)) / 2.0).clamp(0.0, 1.0)
    }

    fn d(&self, a: &str, b: &str) -> f64 {
        Oracle::dist(&self.vectors[a], &self.vectors[b])
    }

    /// `None` when undefined, `Some(inf)` for a zero denominator.
    pub fn loss(&self, code: &str) -> Option<f64> {
        let p = self.parent[code].as_ref()?;
        let pp = &self.parent[p];
        let siblings: Vec<&String> = self
            .parent
            .iter()
            .filter(|(c, par)| *c != p && *par == pp)
            .map(|(c, _)| c)
            .collect();
        if siblings.is_empty() {
            return None;
        }
        let num = self.d(code, p);
        let den = siblings
            .iter()
            .map(|s| self.d(code, s))
            .fold(f64::INFINITY, f64::min);
        Some(if num == 0.0 {
            0.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            num / den
        })
    }

    pub fn error(&self) -> Option<f64> {
        let losses: Vec<f64> = self.parent.keys().filter_map(|c| self.loss(c)).collect();
        if losses.is_empty() {
            return None;
        }
        Some(losses.iter().filter(|l| **l >= 1.0).count() as f64 / losses.len() as f64)
    }

    fn depth(&self, code: &str) -> usize {
        match &self.parent[code] {
            None => 1,
            Some(p) => 1 + self.depth(p),
        }
    }

    fn ancestor(&self, code: &str, level: usize) -> String {
        let mut c = code.to_string();
        while self.depth(&c) > level {
            c = self.parent[&c].clone().unwrap();
        }
        c
    }

    /// Centroid-variant silhouette at `level`; `None` with fewer than two
    /// clusters.
    pub fn silhouette(&self, level: usize) -> Option<f64> {
        let mut clusters: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in self.parent.keys() {
            if self.depth(c) >= level {
                clusters
                    .entry(self.ancestor(c, level))
                    .or_default()
                    .push(c.clone());
            }
        }
        if clusters.len() < 2 {
            return None;
        }
        let centroid = |members: &[String]| -> Vec<f64> {
            let dim = self.vectors[&members[0]].len();
            (0..dim)
                .map(|k| {
                    members.iter().map(|m| self.vectors[m][k]).sum::<f64>() / members.len() as f64
                })
                .collect()
        };
        let centroids: BTreeMap<&String, Vec<f64>> =
            clusters.iter().map(|(l, m)| (l, centroid(m))).collect();
        let mut total = 0.0;
        let mut count = 0;
        for (label, members) in &clusters {
            for i in members {
                count += 1;
                if members.len() == 1 {
                    continue;
                }
                let a = members
                    .iter()
                    .filter(|j| *j != i)
                    .map(|j| self.d(i, j))
                    .sum::<f64>()
                    / (members.len() - 1) as f64;
                let b = centroids
                    .iter()
                    .filter(|(l, _)| **l != label)
                    .map(|(_, c)| Oracle::dist(&self.vectors[i], c))
                    .fold(f64::INFINITY, f64::min);
                let m = a.max(b);
                if m > 0.0 {
                    total += (b - a) / m;
                }
            }
        }
        Some(total / count as f64)
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
