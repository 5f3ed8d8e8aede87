//! Stage orchestration over persisted artifacts. Each CLI subcommand maps to
//! one `run_*` function here; stages communicate only through files under a
//! shared artifact root, so expensive stages are independently rerunnable and
//! resumable. Every artifact has exactly one producing stage:
//!
//! ```text
//! ingest    -> dataset.json
//! augment   -> items.json, index.bin, cache/augment/
//! annotate  -> annotations.jsonl
//! recommend -> recommendations.jsonl
//! evaluate  -> eval_report.txt, eval_report.json
//! ablate    -> ablation_report.txt, ablation_report.json, ablation/<variant>/
//! ```
//!
//! Nothing here writes wall-clock time or host details into artifacts; with
//! the mock backend, rerunning any stage on identical inputs is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{build_motive_index, load_annotations, save_annotations, AnnotateReport};
use crate::augment::{build_item_index, AugmentReport};
use crate::domain::{validate_config, ItemRecord, MotiveAnnotation, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{
    format_ablation_table, format_metrics_table, metrics_at_k, relevance_sets, run_ablation_grid,
    AblationReport, EvalResult,
};
use crate::gateway::{Gateway, HttpBackend, PromptSet, RetryPolicy};
use crate::ingest::{
    build_dataset, load_interactions, load_items, load_users, ColumnSpec, DatasetBundle,
    TableFormat,
};
use crate::retrieve::{select_motives, synthesize_queries, MotiveCatalog, MotiveSelection, QueryPlan};
use crate::search::{finalize, search_with_reflection, IterationAudit, RankedList};
use crate::index::VectorIndex;

/// Artifact paths under one root directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn items(&self) -> PathBuf {
        self.root.join("items.json")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.bin")
    }

    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }

    pub fn recommendations(&self) -> PathBuf {
        self.root.join("recommendations.jsonl")
    }

    pub fn eval_report_text(&self) -> PathBuf {
        self.root.join("eval_report.txt")
    }

    pub fn eval_report_json(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }

    pub fn ablation_report_text(&self) -> PathBuf {
        self.root.join("ablation_report.txt")
    }

    pub fn ablation_report_json(&self) -> PathBuf {
        self.root.join("ablation_report.json")
    }

    pub fn augment_cache(&self) -> PathBuf {
        self.root.join("cache").join("augment")
    }

    /// Sub-root holding one ablation variant's intermediate artifacts.
    pub fn ablation_variant(&self, variant: &str) -> Artifacts {
        Artifacts { root: self.root.join("ablation").join(variant) }
    }

    /// Errors with the stage that produces `path` when it is absent.
    fn require(&self, path: PathBuf, stage: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { artifact: path, stage })
        }
    }

    fn ensure_root(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }
}

/// Hex SHA-256 of the canonical JSON form of the configuration; logged by
/// every run and stamped into evaluation reports.
pub fn config_fingerprint(cfg: &PipelineConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Reads a config file — TOML by extension, JSON otherwise; absent path
/// means built-in defaults. The file may set any subset of fields; unknown
/// keys are rejected.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::default(),
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) => {
            PipelineConfig::from_toml_path(p)?
        }
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&raw)
                .map_err(|e| Error::format(p, format!("config parse: {e}")))?
        }
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    Mock,
    Http,
}

/// Builds the gateway for a run. `jobs` bounds in-flight backend requests.
pub fn build_gateway(choice: BackendChoice, cfg: &PipelineConfig, seed: u64, jobs: usize) -> Result<Gateway> {
    match choice {
        BackendChoice::Mock => Ok(Gateway::mock(seed, cfg.embedding_dim, jobs)),
        BackendChoice::Http => {
            let backend = Arc::new(HttpBackend::from_env(cfg.embedding_dim)?);
            Ok(Gateway::new(backend.clone(), backend, PromptSet::builtin(), RetryPolicy::default(), jobs))
        }
    }
}

/// Raw input files for the ingest stage.
#[derive(Debug, Clone)]
pub struct IngestInputs {
    pub interactions: PathBuf,
    pub items: Option<PathBuf>,
    pub users: Option<PathBuf>,
    pub format: TableFormat,
    pub columns: ColumnSpec,
}

/// Parses raw files, filters, splits, and persists the dataset bundle.
pub fn run_ingest(cfg: &PipelineConfig, artifacts: &Artifacts, inputs: &IngestInputs) -> Result<DatasetBundle> {
    let (events, event_report) = load_interactions(&inputs.interactions, &inputs.format, &inputs.columns)?;
    let (items, item_report) = match &inputs.items {
        Some(path) => load_items(path)?,
        None => (BTreeMap::new(), Default::default()),
    };
    let (users, user_report) = match &inputs.users {
        Some(path) => load_users(path)?,
        None => (BTreeMap::new(), Default::default()),
    };
    let rejected = event_report.rejected_total + item_report.rejected_total + user_report.rejected_total;
    let bundle = build_dataset(
        events,
        items,
        users,
        cfg.min_core,
        cfg.min_rating,
        cfg.split_ratios,
        rejected,
    )?;
    artifacts.ensure_root()?;
    bundle.save(&artifacts.dataset())?;
    Ok(bundle)
}

fn load_bundle(artifacts: &Artifacts) -> Result<DatasetBundle> {
    DatasetBundle::load(&artifacts.require(artifacts.dataset(), "ingest")?)
}

fn save_items(items: &BTreeMap<String, ItemRecord>, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(items)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn load_augmented_items(artifacts: &Artifacts) -> Result<BTreeMap<String, ItemRecord>> {
    let path = artifacts.require(artifacts.items(), "augment")?;
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::format(&path, format!("item store parse: {e}")))
}

/// Generates descriptions and item embeddings; persists the augmented item
/// store and the vector index. With `resume`, previously cached generations
/// are reused instead of re-calling the backend.
pub fn run_augment(artifacts: &Artifacts, gateway: &Gateway, resume: bool) -> Result<AugmentReport> {
    let bundle = load_bundle(artifacts)?;
    let mut items = bundle.items;
    let (index, report) = build_item_index(&mut items, gateway, &artifacts.augment_cache(), resume)?;
    save_items(&items, &artifacts.items())?;
    index.save(&artifacts.index())?;
    Ok(report)
}

/// Infers motive annotations over interaction bundles and persists them.
pub fn run_annotate(cfg: &PipelineConfig, artifacts: &Artifacts, gateway: &Gateway) -> Result<AnnotateReport> {
    let bundle = load_bundle(artifacts)?;
    let items = load_augmented_items(artifacts)?;
    let mut index = VectorIndex::load(&artifacts.require(artifacts.index(), "augment")?)?;
    let (annotations, report) = build_motive_index(&bundle.users, &items, cfg, gateway, &mut index)?;
    save_annotations(&annotations, &artifacts.annotations())?;
    Ok(report)
}

/// One user's persisted recommendation run: the finalized ranking plus the
/// full audit trail (plan, selected motives, per-iteration verdicts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRecord {
    pub user_id: String,
    /// The literal user query, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub ranking: RankedList,
    pub plan: QueryPlan,
    pub selection: MotiveSelection,
    pub iterations: Vec<IterationAudit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
}

pub fn load_recommendations(path: &Path) -> Result<Vec<RecommendationRecord>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, format!("record parse: {e}"))))
        .collect()
}

pub fn save_recommendations(records: &[RecommendationRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Batch recommendation outcome; users that could not be served are skipped
/// with a note rather than failing the stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub records: usize,
    pub skipped: Vec<String>,
}

/// In-memory pipeline state loaded from artifacts; serves ad-hoc and batch
/// recommendation and evaluation without re-reading files per call.
pub struct Engine {
    pub cfg: PipelineConfig,
    gateway: Arc<Gateway>,
    bundle: DatasetBundle,
    items: BTreeMap<String, ItemRecord>,
    index: VectorIndex,
    catalog: MotiveCatalog,
}

impl Engine {
    /// Loads dataset, augmented items, vector index, and annotations; motive
    /// vectors are re-inserted from the annotation store so `index.bin` stays
    /// owned by the augment stage alone.
    pub fn open(cfg: PipelineConfig, artifacts: &Artifacts, gateway: Arc<Gateway>) -> Result<Engine> {
        let bundle = load_bundle(artifacts)?;
        let items = load_augmented_items(artifacts)?;
        let mut index = VectorIndex::load(&artifacts.require(artifacts.index(), "augment")?)?;
        if index.dim() != gateway.dimension() {
            return Err(Error::DimensionMismatch { expected: index.dim(), got: gateway.dimension() });
        }
        let annotations = load_annotations(&artifacts.require(artifacts.annotations(), "annotate")?)?;
        index.clear_motives();
        for a in &annotations {
            index.insert_motive(a.user_id.clone(), a.bundle_index, a.motive_vector.clone())?;
        }
        let catalog = MotiveCatalog::new(annotations);
        Ok(Engine { cfg, gateway, bundle, items, index, catalog })
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.bundle.users.keys().map(String::as_str)
    }

    pub fn dataset(&self) -> &DatasetBundle {
        &self.bundle
    }

    /// Full retrieval -> synthesis -> reflective search chain for one user.
    pub fn recommend(&self, user_id: &str, query: Option<&str>) -> Result<RecommendationRecord> {
        let user = self
            .bundle
            .users
            .get(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?;
        let (selection, _query_vec) =
            select_motives(user_id, query, &self.cfg, &self.gateway, &self.index, &self.catalog)?;
        let plan = synthesize_queries(query, &selection, &self.gateway, self.cfg.queries_per_plan)?;
        let train_items: BTreeSet<String> =
            user.train_events().map(|e| e.item_id.clone()).collect();
        let exclude = if self.cfg.exclude_history { train_items.clone() } else { BTreeSet::new() };
        let outcome = search_with_reflection(
            query,
            &selection,
            plan,
            &exclude,
            &self.items,
            &self.index,
            &self.cfg,
            &self.gateway,
        )?;
        // Recommendation lists must reach the largest evaluation cutoff.
        let cutoff = self.cfg.top_k_eval.iter().copied().max().unwrap_or(10);
        let (ranking, filter_notice) =
            finalize(outcome.ranked, &train_items, self.cfg.exclude_history, cutoff);
        let mut notices = outcome.notices;
        notices.extend(filter_notice);
        Ok(RecommendationRecord {
            user_id: user_id.to_string(),
            query: query.map(str::to_string),
            ranking,
            plan: outcome.final_plan,
            selection,
            iterations: outcome.iterations,
            notices,
        })
    }

    /// Recommends for every user, in user-id order, without an explicit
    /// query. Per-user failures are skipped and noted; an empty outcome is
    /// an error.
    pub fn recommend_all(&self) -> Result<(Vec<RecommendationRecord>, BatchReport)> {
        let user_ids: Vec<&str> = self.bundle.users.keys().map(String::as_str).collect();
        let results: Vec<(&str, Result<RecommendationRecord>)> = user_ids
            .par_iter()
            .map(|user_id| (*user_id, self.recommend(user_id, None)))
            .collect();
        let mut records = Vec::new();
        let mut report = BatchReport::default();
        for (user_id, result) in results {
            match result {
                Ok(record) => records.push(record),
                Err(e) => report.skipped.push(format!("user {user_id}: {e}")),
            }
        }
        if records.is_empty() {
            return Err(Error::Invalid(format!(
                "recommendation failed for every user ({} skipped)",
                report.skipped.len()
            )));
        }
        report.records = records.len();
        Ok((records, report))
    }

    /// Metrics for a set of recommendation records against the test split.
    pub fn evaluate(&self, records: &[RecommendationRecord]) -> Result<EvalResult> {
        let (relevance, excluded) = relevance_sets(&self.bundle)?;
        let lists: BTreeMap<String, Vec<String>> = records
            .iter()
            .map(|r| {
                (r.user_id.clone(), r.ranking.entries.iter().map(|e| e.item_id.clone()).collect())
            })
            .collect();
        let mut result = metrics_at_k(&lists, &relevance, &self.bundle.items, &self.cfg.top_k_eval)?;
        result.excluded_users = excluded;
        result.config_fingerprint = config_fingerprint(&self.cfg);
        Ok(result)
    }
}

/// Batch stage: recommendations for all users, persisted one JSON per line.
pub fn run_recommend(cfg: &PipelineConfig, artifacts: &Artifacts, gateway: Arc<Gateway>) -> Result<BatchReport> {
    let engine = Engine::open(cfg.clone(), artifacts, gateway)?;
    let (records, report) = engine.recommend_all()?;
    save_recommendations(&records, &artifacts.recommendations())?;
    Ok(report)
}

/// Scores persisted recommendations against the test split and writes both
/// report forms.
pub fn run_evaluate(cfg: &PipelineConfig, artifacts: &Artifacts) -> Result<EvalResult> {
    let bundle = load_bundle(artifacts)?;
    let records =
        load_recommendations(&artifacts.require(artifacts.recommendations(), "recommend")?)?;
    let (relevance, excluded) = relevance_sets(&bundle)?;
    let lists: BTreeMap<String, Vec<String>> = records
        .iter()
        .map(|r| (r.user_id.clone(), r.ranking.entries.iter().map(|e| e.item_id.clone()).collect()))
        .collect();
    let mut result = metrics_at_k(&lists, &relevance, &bundle.items, &cfg.top_k_eval)?;
    result.excluded_users = excluded;
    result.config_fingerprint = config_fingerprint(cfg);
    let text = format_metrics_table(&result, &cfg.top_k_eval);
    std::fs::write(artifacts.eval_report_text(), text)
        .map_err(|e| Error::io(artifacts.eval_report_text(), e))?;
    let json = serde_json::to_vec_pretty(&result)?;
    std::fs::write(artifacts.eval_report_json(), json)
        .map_err(|e| Error::io(artifacts.eval_report_json(), e))?;
    Ok(result)
}

/// Runs the four-variant feature-removal grid end-to-end and persists the
/// delta report. The item index is shared across variants; motive indexes
/// are rebuilt once per distinct annotation setting and reused.
pub fn run_ablate(cfg: &PipelineConfig, artifacts: &Artifacts, gateway: Arc<Gateway>) -> Result<AblationReport> {
    let bundle = load_bundle(artifacts)?;
    let items = load_augmented_items(artifacts)?;
    let mut base_index = VectorIndex::load(&artifacts.require(artifacts.index(), "augment")?)?;
    base_index.clear_motives();

    let mut annotation_memo: BTreeMap<bool, Vec<MotiveAnnotation>> = BTreeMap::new();
    let report = run_ablation_grid(cfg, |variant, vcfg| {
        let annotations = match annotation_memo.get(&vcfg.ablation.annotation) {
            Some(cached) => cached.clone(),
            None => {
                let mut scratch = base_index.clone();
                let (annotations, _report) =
                    build_motive_index(&bundle.users, &items, vcfg, &gateway, &mut scratch)?;
                annotation_memo.insert(vcfg.ablation.annotation, annotations.clone());
                annotations
            }
        };

        let variant_dir = artifacts.ablation_variant(variant);
        variant_dir.ensure_root()?;
        save_annotations(&annotations, &variant_dir.annotations())?;

        let mut index = base_index.clone();
        for a in &annotations {
            index.insert_motive(a.user_id.clone(), a.bundle_index, a.motive_vector.clone())?;
        }
        let engine = Engine {
            cfg: vcfg.clone(),
            gateway: gateway.clone(),
            bundle: DatasetBundle {
                users: bundle.users.clone(),
                items: bundle.items.clone(),
                split_boundaries: bundle.split_boundaries,
                stats: bundle.stats.clone(),
            },
            items: items.clone(),
            index,
            catalog: MotiveCatalog::new(annotations),
        };
        let (records, _batch) = engine.recommend_all()?;
        save_recommendations(&records, &variant_dir.recommendations())?;
        engine.evaluate(&records)
    });

    let text = format_ablation_table(&report);
    std::fs::write(artifacts.ablation_report_text(), text)
        .map_err(|e| Error::io(artifacts.ablation_report_text(), e))?;
    let json = serde_json::to_vec_pretty(&report)?;
    std::fs::write(artifacts.ablation_report_json(), json)
        .map_err(|e| Error::io(artifacts.ablation_report_json(), e))?;
    Ok(report)
}
