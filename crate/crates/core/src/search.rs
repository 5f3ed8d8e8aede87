//! Query execution: dense retrieval per query, reciprocal-rank fusion, and
//! the bounded reflection loop that scores the fused candidates and refines
//! the query plan until the score threshold is met or the iteration budget
//! runs out.
//!
//! Reflection is a guard, not a gate: any verdict failure — and any total
//! retrieval failure after a refinement — terminates the loop with the last
//! good ranking instead of erroring the user out. Only the initial retrieval
//! is fatal on total failure, because there is no ranking to fall back to.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ItemRecord, PipelineConfig};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ParsedPayload, TemplateName};
use crate::index::{EntryKey, Namespace, VectorIndex};
use crate::retrieve::{apply_fidelity_guard, MotiveSelection, QueryPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    /// A verdict reached the threshold.
    ScoreMet,
    /// The iteration budget ran out (including a budget of zero).
    MaxIters,
    /// Refinement produced no queries or the same queries (anti-livelock).
    NoRefinement,
    /// A verdict or mid-loop retrieval failed; the last ranking stands.
    VerdictFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item_id: String,
    /// Sum over contributing queries of 1 / (k0 + rank).
    pub score: f64,
    /// (query index within the plan, 1-based rank in that query's list).
    pub sources: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    /// Which plan iteration produced these entries.
    pub iteration: u32,
    /// None only mid-loop; always set when a search returns.
    pub terminal_reason: Option<TerminalReason>,
}

/// One retained query's retrieval: item ids in rank order (rank = index + 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRetrieval {
    /// Index of the query within the plan (dropped queries leave gaps).
    pub query_index: usize,
    pub query: String,
    pub item_ids: Vec<String>,
}

pub fn item_keys(ids: &BTreeSet<String>) -> BTreeSet<EntryKey> {
    ids.iter().map(|id| EntryKey::Item(id.clone())).collect()
}

/// Embeds each query and returns its top-`depth` items. A query whose
/// embedding fails is dropped with a notice; losing every query is an error.
pub fn dense_retrieve(
    index: &VectorIndex,
    queries: &[String],
    depth: usize,
    exclude: &BTreeSet<EntryKey>,
    gateway: &Gateway,
) -> Result<(Vec<QueryRetrieval>, Vec<String>)> {
    if queries.is_empty() {
        return Err(Error::Invalid("dense retrieval needs at least one query".to_string()));
    }
    if index.item_count() == 0 {
        return Err(Error::EmptyDataset("item namespace is empty".to_string()));
    }
    let results: Vec<(usize, Result<Vec<String>>)> = queries
        .par_iter()
        .enumerate()
        .map(|(i, query)| {
            let hits = gateway.embed_one(query).and_then(|qv| {
                index
                    .top_k(Namespace::Items, &qv, depth, exclude)
                    .map(|hits| {
                        hits.into_iter()
                            .map(|(key, _)| match key {
                                EntryKey::Item(id) => id,
                                EntryKey::Motive { .. } => {
                                    unreachable!("item namespace yields item keys")
                                }
                            })
                            .collect()
                    })
            });
            (i, hits)
        })
        .collect();

    let mut lists = Vec::new();
    let mut notices = Vec::new();
    for (i, outcome) in results {
        match outcome {
            Ok(item_ids) => lists.push(QueryRetrieval {
                query_index: i,
                query: queries[i].clone(),
                item_ids,
            }),
            Err(e) => notices.push(format!("query {} dropped: {e}", i + 1)),
        }
    }
    if lists.is_empty() {
        return Err(Error::Gateway(format!(
            "every query in the plan failed: {}",
            notices.join("; ")
        )));
    }
    Ok((lists, notices))
}

/// Reciprocal-rank fusion: score(i) = Σ over lists containing i of
/// 1/(k0 + rank_i), sorted by score descending, ties by ascending item id.
pub fn rrf_fuse(lists: &[QueryRetrieval], k0: f64) -> RankedList {
    // Per item: accumulated score plus the contributing (query, rank) pairs.
    type FusionSlot = (f64, Vec<(usize, usize)>);
    let mut fused: BTreeMap<&str, FusionSlot> = BTreeMap::new();
    for list in lists {
        for (pos, item_id) in list.item_ids.iter().enumerate() {
            let rank = pos + 1;
            let slot = fused.entry(item_id).or_insert_with(|| (0.0, Vec::new()));
            slot.0 += 1.0 / (k0 + rank as f64);
            slot.1.push((list.query_index, rank));
        }
    }
    let mut entries: Vec<RankedEntry> = fused
        .into_iter()
        .map(|(item_id, (score, sources))| RankedEntry {
            item_id: item_id.to_string(),
            score,
            sources,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id)));
    RankedList { entries, iteration: 0, terminal_reason: None }
}

/// Audit row: the queries in effect at `iteration` and the verdict they
/// received (verdict fields are None when no verdict ran, e.g. iteration 0
/// of a run whose budget allowed further rounds, or a failed verdict).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationAudit {
    pub iteration: u32,
    pub queries: Vec<String>,
    pub verdict_score: Option<f32>,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub ranked: RankedList,
    /// The plan after all accepted refinements — the last refinement is
    /// recorded here even when the budget left no room to execute it.
    pub final_plan: QueryPlan,
    pub iterations: Vec<IterationAudit>,
    pub notices: Vec<String>,
}

fn verdict_candidates(
    ranked: &RankedList,
    items: &BTreeMap<String, ItemRecord>,
    depth: usize,
) -> String {
    ranked
        .entries
        .iter()
        .take(depth)
        .map(|e| {
            let (title, aug) = match items.get(&e.item_id) {
                Some(item) => (
                    item.title().to_string(),
                    item.augmented_text.as_deref().unwrap_or("").to_string(),
                ),
                None => (e.item_id.clone(), String::new()),
            };
            let flat = aug.split_whitespace().collect::<Vec<_>>().join(" ");
            let snippet: String = flat.chars().take(160).collect();
            format!("{title} | {snippet}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the retrieve→verdict→refine loop. At most `max_reflections` verdict
/// calls are made (zero when the reflection ablation is off — the two
/// configurations produce identical output). A refinement accepted on the
/// final allowed iteration is recorded in the plan but not executed.
#[allow(clippy::too_many_arguments)]
pub fn search_with_reflection(
    q: Option<&str>,
    selection: &MotiveSelection,
    plan: QueryPlan,
    exclude_items: &BTreeSet<String>,
    items: &BTreeMap<String, ItemRecord>,
    index: &VectorIndex,
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<SearchOutcome> {
    let exclude = item_keys(exclude_items);
    let mut plan = plan;
    let mut notices = Vec::new();
    let mut iterations: Vec<IterationAudit> = Vec::new();

    let (lists, first_notices) =
        dense_retrieve(index, &plan.queries, cfg.retrieval_depth, &exclude, gateway)?;
    notices.extend(first_notices);
    let mut ranked = rrf_fuse(&lists, cfg.rrf_constant);

    let t_max = if cfg.ablation.reflection { cfg.max_reflections } else { 0 };
    let mut terminal = TerminalReason::MaxIters;
    let motives_text = selection.motive_lines().join("\n");

    for t in 1..=t_max {
        let bindings: BTreeMap<String, String> = [
            ("query".to_string(), plan.queries.join("\n")),
            ("motives".to_string(), motives_text.clone()),
            ("candidates".to_string(), verdict_candidates(&ranked, items, cfg.verdict_depth)),
        ]
        .into_iter()
        .collect();

        let verdict = match gateway.generate(TemplateName::Reflect, bindings, cfg.queries_per_plan)
        {
            Ok(resp) => match resp.payload {
                ParsedPayload::Verdict(v) => v,
                ParsedPayload::Failed { reason } => {
                    notices.push(format!("verdict {t} unusable: {reason}"));
                    iterations.push(IterationAudit {
                        iteration: t,
                        queries: plan.queries.clone(),
                        verdict_score: None,
                        feedback: None,
                    });
                    terminal = TerminalReason::VerdictFailed;
                    break;
                }
                _ => unreachable!("reflect template parses as a verdict"),
            },
            Err(Error::Gateway(reason)) => {
                notices.push(format!("verdict {t} failed: {reason}"));
                iterations.push(IterationAudit {
                    iteration: t,
                    queries: plan.queries.clone(),
                    verdict_score: None,
                    feedback: None,
                });
                terminal = TerminalReason::VerdictFailed;
                break;
            }
            Err(e) => return Err(e),
        };

        iterations.push(IterationAudit {
            iteration: t,
            queries: plan.queries.clone(),
            verdict_score: Some(verdict.score),
            feedback: Some(verdict.feedback.clone()),
        });
        plan.last_verdict = Some(verdict.score);

        if verdict.score >= cfg.reflection_threshold {
            terminal = TerminalReason::ScoreMet;
            break;
        }

        let mut refined: Vec<String> = verdict
            .refined_queries
            .iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .take(cfg.queries_per_plan)
            .collect();
        if let Some(text) = q {
            apply_fidelity_guard(&mut refined, text, cfg.queries_per_plan);
        }
        if refined.is_empty() || refined == plan.queries {
            terminal = TerminalReason::NoRefinement;
            break;
        }

        plan.queries = refined;
        plan.iteration = t;

        if t < t_max {
            match dense_retrieve(index, &plan.queries, cfg.retrieval_depth, &exclude, gateway) {
                Ok((lists, more_notices)) => {
                    notices.extend(more_notices);
                    ranked = rrf_fuse(&lists, cfg.rrf_constant);
                    ranked.iteration = t;
                }
                Err(e) => {
                    notices.push(format!(
                        "refined retrieval {t} failed, keeping previous ranking: {e}"
                    ));
                    terminal = TerminalReason::VerdictFailed;
                    break;
                }
            }
        }
    }

    ranked.terminal_reason = Some(terminal);
    Ok(SearchOutcome { ranked, final_plan: plan, iterations, notices })
}

/// Strips excluded history (when the flag is set), truncates to `cutoff`,
/// and reports whether exclusion emptied the list.
pub fn finalize(
    mut ranked: RankedList,
    train_items: &BTreeSet<String>,
    exclude_history: bool,
    cutoff: usize,
) -> (RankedList, Option<String>) {
    let before = ranked.entries.len();
    if exclude_history {
        ranked.entries.retain(|e| !train_items.contains(&e.item_id));
    }
    let notice = (before > 0 && ranked.entries.is_empty())
        .then(|| "history exclusion removed every candidate".to_string());
    ranked.entries.truncate(cutoff);
    (ranked, notice)
}
