//! Shared toy-corpus builders and deliberately literal oracle
//! implementations for the integration suites. The oracles favor exhaustive
//! scans and per-step recomputation over the optimized code paths they
//! check, sharing nothing with them beyond the arithmetic contract
//! (f64-accumulated dot products, f32 selection scores).

#![allow(dead_code)] // each integration binary uses a different subset

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use motiverec_core::domain::{ItemRecord, PipelineConfig};
use motiverec_core::gateway::Gateway;
use motiverec_core::index::EntryKey;
use motiverec_core::ingest::{ColumnSpec, TableFormat};
use motiverec_core::pipeline::{self, Artifacts, IngestInputs};
use motiverec_core::search::QueryRetrieval;

// ---------------------------------------------------------------------------
// Ranking oracles
// ---------------------------------------------------------------------------

/// Sequential f64-accumulated scalar product, rounded once to f32 — the
/// arithmetic contract every similarity in the pipeline follows.
pub fn oracle_dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc as f32
}

/// Exhaustive top-k: score everything, full sort, truncate. Ties break by
/// ascending key; excluded keys never appear.
pub fn oracle_top_k(
    pool: &[(EntryKey, Vec<f32>)],
    query: &[f32],
    k: usize,
    exclude: &BTreeSet<EntryKey>,
) -> Vec<(EntryKey, f32)> {
    let mut scored: Vec<(EntryKey, f32)> = pool
        .iter()
        .filter(|(key, _)| !exclude.contains(key))
        .map(|(key, v)| (key.clone(), oracle_dot(query, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Literal greedy maximal-marginal-relevance: each round recomputes every
/// candidate's relevance and its maximum similarity to seeds ∪ selected from
/// scratch, then picks the strict argmax (ties to the smallest key). Seeds
/// are penalized against but never selected.
pub fn oracle_mmr(
    pool: &[(EntryKey, Vec<f32>)],
    query: &[f32],
    seeds: &BTreeSet<EntryKey>,
    k: usize,
    lambda: f32,
) -> Vec<(EntryKey, f32)> {
    let vector_of = |key: &EntryKey| -> &[f32] {
        &pool.iter().find(|(p, _)| p == key).expect("penalty key present in pool").1
    };
    let mut selected: Vec<(EntryKey, f32)> = Vec::new();
    for _ in 0..k {
        let mut best: Option<(EntryKey, f32)> = None;
        for (key, v) in pool {
            if seeds.contains(key) || selected.iter().any(|(s, _)| s == key) {
                continue;
            }
            let relevance = oracle_dot(query, v);
            let mut max_sim: Option<f32> = None;
            for other in seeds.iter().chain(selected.iter().map(|(s, _)| s)) {
                let s = oracle_dot(v, vector_of(other));
                max_sim = Some(max_sim.map_or(s, |m| m.max(s)));
            }
            let score = lambda * relevance - (1.0 - lambda) * max_sim.unwrap_or(0.0);
            let better = match &best {
                None => true,
                Some((bk, bs)) => score > *bs || (score == *bs && key < bk),
            };
            if better {
                best = Some((key.clone(), score));
            }
        }
        match best {
            Some(pick) => selected.push(pick),
            None => break,
        }
    }
    selected
}

/// Naive reciprocal-rank fusion: for each distinct item, walk the lists in
/// order and sum 1/(k0 + rank) for every appearance. Descending score, ties
/// by ascending item id.
pub fn oracle_rrf(lists: &[QueryRetrieval], k0: f64) -> Vec<(String, f64)> {
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for list in lists {
        ids.extend(list.item_ids.iter().map(String::as_str));
    }
    let mut scored: Vec<(String, f64)> = ids
        .into_iter()
        .map(|id| {
            let mut score = 0.0f64;
            for list in lists {
                for (pos, item) in list.item_ids.iter().enumerate() {
                    if item == id {
                        score += 1.0 / (k0 + (pos + 1) as f64);
                    }
                }
            }
            (id.to_string(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

// ---------------------------------------------------------------------------
// Metric oracle
// ---------------------------------------------------------------------------

/// Literal single-cutoff metric computation. Accuracy averages run over the
/// users with relevant items (missing lists score zero); coverage unions
/// top-k prefixes across every list; popularity macro-averages the mean
/// training popularity of non-empty prefixes.
pub fn oracle_metrics_at(
    recommendations: &BTreeMap<String, Vec<String>>,
    relevance: &BTreeMap<String, BTreeSet<String>>,
    items: &BTreeMap<String, ItemRecord>,
    k: usize,
) -> BTreeMap<String, f64> {
    let mut recall_sum = 0.0f64;
    let mut ndcg_sum = 0.0f64;
    let mut mrr_sum = 0.0f64;
    for (user, rel) in relevance {
        let empty: Vec<String> = Vec::new();
        let list = recommendations.get(user).unwrap_or(&empty);
        let prefix: Vec<&String> = list.iter().take(k).collect();

        let hits = prefix.iter().filter(|id| rel.contains(**id)).count();
        recall_sum += hits as f64 / rel.len() as f64;

        let mut dcg = 0.0f64;
        for (pos, id) in prefix.iter().enumerate() {
            if rel.contains(*id) {
                dcg += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        let mut idcg = 0.0f64;
        for rank in 1..=rel.len().min(k) {
            idcg += 1.0 / ((rank + 1) as f64).log2();
        }
        if idcg > 0.0 {
            ndcg_sum += dcg / idcg;
        }

        if let Some(pos) = prefix.iter().position(|id| rel.contains(*id)) {
            mrr_sum += 1.0 / (pos + 1) as f64;
        }
    }
    let n = relevance.len() as f64;

    let mut covered: BTreeSet<&String> = BTreeSet::new();
    let mut pop_sum = 0.0f64;
    let mut pop_users = 0usize;
    for list in recommendations.values() {
        let prefix: Vec<&String> = list.iter().take(k).collect();
        covered.extend(prefix.iter().copied());
        if !prefix.is_empty() {
            let total: f64 = prefix
                .iter()
                .map(|id| items.get(*id).map_or(0, |it| it.popularity) as f64)
                .sum();
            pop_sum += total / prefix.len() as f64;
            pop_users += 1;
        }
    }

    let mut out = BTreeMap::new();
    out.insert(format!("recall@{k}"), recall_sum / n);
    out.insert(format!("ndcg@{k}"), ndcg_sum / n);
    out.insert(format!("mrr@{k}"), mrr_sum / n);
    out.insert(format!("coverage@{k}"), covered.len() as f64 / items.len() as f64);
    out.insert(
        format!("popularity@{k}"),
        if pop_users > 0 { pop_sum / pop_users as f64 } else { 0.0 },
    );
    out
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

const ADJECTIVES: [&str; 12] = [
    "amber", "silver", "crimson", "velvet", "midnight", "golden", "ivory", "cobalt", "scarlet",
    "emerald", "obsidian", "coral",
];
const NOUNS: [&str; 12] = [
    "harbor", "canyon", "orchard", "lantern", "voyage", "citadel", "meadow", "glacier", "compass",
    "archive", "garden", "summit",
];
const GENRES: [&str; 6] = ["drama", "comedy", "thriller", "adventure", "mystery", "romance"];

pub fn toy_user_id(u: usize) -> String {
    format!("u{u:02}")
}

pub fn toy_item_id(i: usize) -> String {
    format!("m{i:02}")
}

/// Writes a deterministic interaction table (TSV with header) and an item
/// metadata JSONL under `dir`. Every user interacts for `rounds` rounds with
/// a varied slice of the catalog; timestamps increase strictly with the
/// round so the chronological split puts early rounds in train for everyone.
pub fn write_toy_corpus(dir: &Path, users: usize, items: usize, rounds: usize) -> IngestInputs {
    std::fs::create_dir_all(dir).unwrap();
    let mut table = String::from("user_id\titem_id\trating\ttimestamp\n");
    for round in 0..rounds {
        for u in 0..users {
            let i = (u * 5 + round * 7 + (u * round) % 3) % items;
            let rating = 1 + (u + round) % 5;
            let ts = 100_000 + (round as i64) * 500 + u as i64;
            table.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                toy_user_id(u),
                toy_item_id(i),
                rating,
                ts
            ));
        }
    }
    let interactions = dir.join("interactions.tsv");
    std::fs::write(&interactions, table).unwrap();

    let mut metadata = String::new();
    for i in 0..items {
        metadata.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "item_id": toy_item_id(i),
                "title": format!("Film {i:02} {} {}", ADJECTIVES[i % 12], NOUNS[(i * 5 + 3) % 12]),
                "genre": GENRES[i % 6],
            })
        ));
    }
    let items_path = dir.join("items.jsonl");
    std::fs::write(&items_path, metadata).unwrap();

    IngestInputs {
        interactions,
        items: Some(items_path),
        users: None,
        format: TableFormat::default(),
        columns: ColumnSpec::default(),
    }
}

/// Small but non-degenerate configuration: catalogs stay large relative to
/// user histories so ablation variants can actually diverge.
pub fn toy_config() -> PipelineConfig {
    PipelineConfig {
        embedding_dim: 64,
        bundle_window: 3,
        bundle_stride: 2,
        k_exploit: 2,
        k_div: 2,
        k_social: 2,
        max_reflections: 1,
        queries_per_plan: 3,
        retrieval_depth: 30,
        verdict_depth: 5,
        top_k_eval: vec![5, 10],
        min_core: 2,
        min_rating: None,
        ..PipelineConfig::default()
    }
}

pub fn mock_gateway(cfg: &PipelineConfig, seed: u64) -> Arc<Gateway> {
    Arc::new(Gateway::mock(seed, cfg.embedding_dim, 4))
}

/// Ingest + augment + annotate into `root`, leaving everything the
/// recommendation engine needs on disk.
pub fn build_toy_artifacts(
    root: &Path,
    cfg: &PipelineConfig,
    inputs: &IngestInputs,
    gateway: &Gateway,
) -> Artifacts {
    let artifacts = Artifacts::new(root);
    pipeline::run_ingest(cfg, &artifacts, inputs).expect("ingest");
    pipeline::run_augment(&artifacts, gateway, false).expect("augment");
    pipeline::run_annotate(cfg, &artifacts, gateway).expect("annotate");
    artifacts
}

pub fn read_bytes(path: &PathBuf) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}
