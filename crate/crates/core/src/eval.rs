//! Full-ranking evaluation over the test split: accuracy (Recall, nDCG, MRR),
//! catalog coverage, and popularity bias at multiple cutoffs, plus the
//! ablation grid that re-runs the pipeline with single features disabled.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AblationFlags, ItemRecord, PipelineConfig};
use crate::error::{Error, Result};
use crate::ingest::DatasetBundle;

/// Metric names in report order. Map keys are `"{name}@{k}"`.
pub const METRIC_NAMES: [&str; 5] = ["recall", "ndcg", "mrr", "coverage", "popularity"];

/// Aggregated evaluation run.
///
/// Invariants: recall, ndcg, mrr, coverage ∈ [0, 1]; popularity ≥ 0;
/// recall and coverage are weakly increasing in the cutoff.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    /// `"recall@10"` → macro-averaged value.
    pub metrics: BTreeMap<String, f64>,
    /// Accuracy breakdown per evaluated user (recall/ndcg/mrr keys only;
    /// coverage and popularity are population-level).
    pub per_user: BTreeMap<String, BTreeMap<String, f64>>,
    /// Users in the accuracy denominator (those with ≥ 1 test item).
    pub evaluated_users: usize,
    /// Evaluated users with no recommendation list; scored as zeros.
    pub missing_list_users: usize,
    /// Users with no test items, outside the accuracy average. Filled by the
    /// orchestration layer from [`relevance_sets`]; zero when unknown.
    pub excluded_users: usize,
    /// Hash of the generating configuration; filled by the orchestration layer.
    pub config_fingerprint: String,
}

/// Test-split item set per user. Users with no test items are excluded from
/// accuracy averaging; the second field counts them.
pub fn relevance_sets(bundle: &DatasetBundle) -> Result<(BTreeMap<String, BTreeSet<String>>, usize)> {
    let sets = bundle.relevance_candidates();
    if sets.is_empty() {
        return Err(Error::EmptyDataset("the test split holds no interactions".into()));
    }
    let excluded = bundle.users.len() - sets.len();
    Ok((sets, excluded))
}

struct UserAccuracy {
    recall: f64,
    ndcg: f64,
    mrr: f64,
}

/// Accuracy of one ranked prefix. Lists shorter than `k` are used as-is.
fn accuracy_at(list: &[String], rel: &BTreeSet<String>, k: usize) -> UserAccuracy {
    let prefix = &list[..k.min(list.len())];
    let mut hits = 0usize;
    let mut dcg = 0.0f64;
    let mut first_hit: Option<usize> = None;
    for (pos, item) in prefix.iter().enumerate() {
        if rel.contains(item) {
            let rank = pos + 1;
            hits += 1;
            dcg += 1.0 / ((rank + 1) as f64).log2();
            first_hit.get_or_insert(rank);
        }
    }
    // Ideal DCG packs min(|rel|, k) hits into the top ranks.
    let ideal_hits = rel.len().min(k);
    let idcg: f64 = (1..=ideal_hits).map(|rank| 1.0 / ((rank + 1) as f64).log2()).sum();
    UserAccuracy {
        recall: hits as f64 / rel.len() as f64,
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        mrr: first_hit.map_or(0.0, |rank| 1.0 / rank as f64),
    }
}

fn validated_cutoffs(cutoffs: &[usize]) -> Result<Vec<usize>> {
    if cutoffs.is_empty() {
        return Err(Error::Invalid("no evaluation cutoffs given".into()));
    }
    if cutoffs.contains(&0) {
        return Err(Error::Invalid("evaluation cutoffs must be >= 1".into()));
    }
    Ok(cutoffs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
}

/// Macro-averaged metrics at each cutoff.
///
/// Accuracy averages over `relevance` users; a user without a list scores
/// zero and is counted. Coverage and popularity run over *all* recommendation
/// lists, including users outside the accuracy average: coverage is the union
/// of top-k prefixes over the post-filter catalog, popularity the macro mean
/// of each list's mean train-split interaction count.
pub fn metrics_at_k(
    recommendations: &BTreeMap<String, Vec<String>>,
    relevance: &BTreeMap<String, BTreeSet<String>>,
    items: &BTreeMap<String, ItemRecord>,
    cutoffs: &[usize],
) -> Result<EvalResult> {
    let ks = validated_cutoffs(cutoffs)?;
    if relevance.is_empty() {
        return Err(Error::Invalid("no users with relevant test items".into()));
    }
    if items.is_empty() {
        return Err(Error::Invalid("empty item catalog".into()));
    }
    debug_assert!(relevance.values().all(|s| !s.is_empty()));

    let rel_rows: Vec<(&String, &BTreeSet<String>)> = relevance.iter().collect();
    let accuracy: Vec<(bool, Vec<UserAccuracy>)> = rel_rows
        .par_iter()
        .map(|(user, rel)| {
            let list = recommendations.get(*user).map(Vec::as_slice).unwrap_or(&[]);
            let per_k = ks.iter().map(|&k| accuracy_at(list, rel, k)).collect();
            (!recommendations.contains_key(*user), per_k)
        })
        .collect();

    // Population metrics; one (covered-set, mean-popularity) pair per cutoff.
    let rec_rows: Vec<&Vec<String>> = recommendations.values().collect();
    let coverage_rows: Vec<Vec<(BTreeSet<&str>, Option<f64>)>> = rec_rows
        .par_iter()
        .map(|list| {
            ks.iter()
                .map(|&k| {
                    let prefix = &list[..k.min(list.len())];
                    let covered: BTreeSet<&str> = prefix.iter().map(String::as_str).collect();
                    let mean_pop = (!prefix.is_empty()).then(|| {
                        let total: f64 = prefix
                            .iter()
                            .map(|id| items.get(id).map_or(0, |it| it.popularity) as f64)
                            .sum();
                        total / prefix.len() as f64
                    });
                    (covered, mean_pop)
                })
                .collect()
        })
        .collect();

    let mut metrics = BTreeMap::new();
    let mut per_user: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let users = relevance.len() as f64;
    for (ki, &k) in ks.iter().enumerate() {
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for ((user, _), (_, per_k)) in rel_rows.iter().zip(&accuracy) {
            let acc = &per_k[ki];
            sums.0 += acc.recall;
            sums.1 += acc.ndcg;
            sums.2 += acc.mrr;
            let row = per_user.entry((*user).clone()).or_default();
            row.insert(format!("recall@{k}"), acc.recall);
            row.insert(format!("ndcg@{k}"), acc.ndcg);
            row.insert(format!("mrr@{k}"), acc.mrr);
        }
        metrics.insert(format!("recall@{k}"), sums.0 / users);
        metrics.insert(format!("ndcg@{k}"), sums.1 / users);
        metrics.insert(format!("mrr@{k}"), sums.2 / users);

        let mut covered: BTreeSet<&str> = BTreeSet::new();
        let mut pop_sum = 0.0f64;
        let mut pop_users = 0usize;
        for row in &coverage_rows {
            covered.extend(row[ki].0.iter().copied());
            if let Some(mean) = row[ki].1 {
                pop_sum += mean;
                pop_users += 1;
            }
        }
        metrics.insert(format!("coverage@{k}"), covered.len() as f64 / items.len() as f64);
        let popularity = if pop_users > 0 { pop_sum / pop_users as f64 } else { 0.0 };
        metrics.insert(format!("popularity@{k}"), popularity);
    }

    Ok(EvalResult {
        metrics,
        per_user,
        evaluated_users: relevance.len(),
        missing_list_users: accuracy.iter().filter(|(missing, _)| *missing).count(),
        excluded_users: 0,
        config_fingerprint: String::new(),
    })
}

/// Aligned text report: one row per metric, one column per cutoff.
pub fn format_metrics_table(result: &EvalResult, cutoffs: &[usize]) -> String {
    let ks: Vec<usize> = cutoffs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["metric".to_string()];
    header.extend(ks.iter().map(|k| format!("@{k}")));
    rows.push(header);
    for name in METRIC_NAMES {
        let mut row = vec![name.to_string()];
        for &k in &ks {
            let value = result.metrics.get(&format!("{name}@{k}")).copied();
            row.push(value.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")));
        }
        rows.push(row);
    }
    let mut out = render_aligned(&rows);
    out.push_str(&format!(
        "\nusers: {} evaluated ({} without test items, {} without recommendation lists)\n",
        result.evaluated_users, result.excluded_users, result.missing_list_users,
    ));
    if !result.config_fingerprint.is_empty() {
        out.push_str(&format!("config: {}\n", result.config_fingerprint));
    }
    out
}

/// Grid variants: the full configuration plus one row per disabled feature.
/// The full row forces every feature on regardless of the base flags so the
/// deltas always measure single-feature removals.
pub fn ablation_variants(base: &PipelineConfig) -> Vec<(&'static str, PipelineConfig)> {
    let mut full = base.clone();
    full.ablation = AblationFlags { annotation: true, exploration: true, reflection: true };
    let with = |f: fn(&mut AblationFlags)| {
        let mut cfg = full.clone();
        f(&mut cfg.ablation);
        cfg
    };
    vec![
        ("full", full.clone()),
        ("no_annotation", with(|a| a.annotation = false)),
        ("no_exploration", with(|a| a.exploration = false)),
        ("no_reflection", with(|a| a.reflection = false)),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AblationOutcome {
    Ok { result: EvalResult },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub outcome: AblationOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub cutoffs: Vec<usize>,
}

/// Runs `runner` once per variant; a failing variant is recorded and the
/// grid continues. The report always carries all four rows in grid order.
pub fn run_ablation_grid<F>(base: &PipelineConfig, mut runner: F) -> AblationReport
where
    F: FnMut(&str, &PipelineConfig) -> Result<EvalResult>,
{
    let rows = ablation_variants(base)
        .into_iter()
        .map(|(variant, cfg)| AblationRow {
            variant: variant.to_string(),
            outcome: match runner(variant, &cfg) {
                Ok(result) => AblationOutcome::Ok { result },
                Err(e) => AblationOutcome::Failed { error: e.to_string() },
            },
        })
        .collect();
    AblationReport { rows, cutoffs: base.top_k_eval.clone() }
}

/// Relative change vs the full configuration, in percent. None when the
/// baseline is zero.
fn delta_pct(full: f64, value: f64) -> Option<f64> {
    (full != 0.0).then(|| (value - full) / full * 100.0)
}

/// One aligned table per cutoff; non-baseline cells carry the relative
/// delta vs the full row, e.g. `0.4000 (-33.3%)`.
pub fn format_ablation_table(report: &AblationReport) -> String {
    let ks: Vec<usize> =
        report.cutoffs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let full = report.rows.iter().find(|r| r.variant == "full").and_then(|r| match &r.outcome {
        AblationOutcome::Ok { result } => Some(result.clone()),
        AblationOutcome::Failed { .. } => None,
    });
    let mut out = String::new();
    for &k in &ks {
        out.push_str(&format!("[@{k}]\n"));
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["variant".to_string()];
        header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
        rows.push(header);
        for row in &report.rows {
            let mut cells = vec![row.variant.clone()];
            match &row.outcome {
                AblationOutcome::Failed { error } => {
                    cells.push(format!("failed: {error}"));
                    cells.extend(std::iter::repeat("-".to_string()).take(METRIC_NAMES.len() - 1));
                }
                AblationOutcome::Ok { result } => {
                    for name in METRIC_NAMES {
                        let key = format!("{name}@{k}");
                        let Some(&value) = result.metrics.get(&key) else {
                            cells.push("-".to_string());
                            continue;
                        };
                        let cell = match &full {
                            Some(f) if row.variant != "full" => {
                                match f.metrics.get(&key).and_then(|&fv| delta_pct(fv, value)) {
                                    Some(d) => format!("{value:.4} ({d:+.1}%)"),
                                    None => format!("{value:.4} (n/a)"),
                                }
                            }
                            _ => format!("{value:.4}"),
                        };
                        cells.push(cell);
                    }
                }
            }
            rows.push(cells);
        }
        out.push_str(&render_aligned(&rows));
        out.push('\n');
    }
    if full.is_none() {
        out.push_str("baseline `full` failed; deltas unavailable\n");
    }
    out
}

/// Pads columns to their widest cell; first column left-aligned, rest right.
fn render_aligned(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if c == 0 {
                    format!("{cell:<width$}", width = widths[c])
                } else {
                    format!("{cell:>width$}", width = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
