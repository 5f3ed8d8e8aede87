//! Core data types shared across the pipeline and the configuration surface.
//!
//! All types are immutable after construction and cheap to clone; stages pass
//! them by value or behind shared references without interior mutability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How an item's augmented text came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationStatus {
    /// Not yet augmented; description and augmented_text are absent.
    Pending,
    /// Description generated; augmented_text = serialized metadata + separator + description.
    Generated,
    /// Generation failed after retries; augmented_text = serialized metadata exactly.
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    /// Raw key -> text metadata; keys are kept sorted by the map type.
    pub raw_metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_text: Option<String>,
    /// Unit-norm vector over the index dimension, set by the augment stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    /// Training-split interaction count; set by ingest, read by evaluation.
    #[serde(default)]
    pub popularity: u64,
    #[serde(default = "AugmentationStatus::pending")]
    pub augmentation: AugmentationStatus,
}

impl AugmentationStatus {
    fn pending() -> Self {
        AugmentationStatus::Pending
    }
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, raw_metadata: BTreeMap<String, String>) -> Self {
        ItemRecord {
            item_id: item_id.into(),
            raw_metadata,
            description: None,
            augmented_text: None,
            embedding: None,
            popularity: 0,
            augmentation: AugmentationStatus::Pending,
        }
    }

    /// Display title used in prompts and reports: `title` metadata, else the id.
    pub fn title(&self) -> &str {
        self.raw_metadata.get("title").map(String::as_str).unwrap_or(&self.item_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    /// Seconds since epoch; always finite and non-negative after ingest.
    pub timestamp: i64,
    #[serde(default = "SplitTag::unassigned")]
    pub split_tag: SplitTag,
}

impl SplitTag {
    fn unassigned() -> Self {
        SplitTag::Unassigned
    }
}

impl InteractionEvent {
    /// Total order within one user's history: (timestamp, item_id).
    pub fn user_order(a: &InteractionEvent, b: &InteractionEvent) -> Ordering {
        a.timestamp.cmp(&b.timestamp).then_with(|| a.item_id.cmp(&b.item_id))
    }

    /// Global total order used by the chronological split: (timestamp, user_id, item_id).
    pub fn global_order(a: &InteractionEvent, b: &InteractionEvent) -> Ordering {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.user_id.cmp(&b.user_id))
            .then_with(|| a.item_id.cmp(&b.item_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    /// User-side metadata (demographics etc.); may be empty.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    /// Full filtered history, sorted by [`InteractionEvent::user_order`].
    pub history: Vec<InteractionEvent>,
}

impl UserRecord {
    pub fn train_events(&self) -> impl Iterator<Item = &InteractionEvent> {
        self.history.iter().filter(|e| e.split_tag == SplitTag::Train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotiveAnnotation {
    pub user_id: String,
    /// 1-based position within the user's profile, ordered by time_span start.
    pub bundle_index: u32,
    /// Item ids of the bundle, in interaction order; never empty.
    pub bundle_items: Vec<String>,
    /// Natural-language motive; never empty.
    pub motive_text: String,
    /// Unit-norm vector over the index dimension.
    pub motive_vector: Vec<f32>,
    /// (first_ts, last_ts) of the bundle's events; first <= last.
    pub time_span: (i64, i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Off: motive texts are plain title concatenations (no inference).
    pub annotation: bool,
    /// Off: no diverse/social retrieval; queries derive from exploit motives only.
    pub exploration: bool,
    /// Off: single retrieval pass, no verdict calls.
    pub reflection: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { annotation: true, exploration: true, reflection: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dimensionality of every vector in the index.
    pub embedding_dim: usize,
    /// Events per bundle (sliding window size).
    pub bundle_window: usize,
    /// Window start step; 1 <= stride <= window. stride == window tiles disjointly.
    pub bundle_stride: usize,
    /// Adds one whole-history bundle per user ahead of the window bundles.
    pub whole_history_bundle: bool,
    /// Motives taken from the user's own profile by similarity/recency.
    pub k_exploit: usize,
    /// Diverse motives selected by MMR within the profile.
    pub k_div: usize,
    /// Motives borrowed from other users' profiles.
    pub k_social: usize,
    /// MMR trade-off: 1.0 = pure relevance, 0.0 = pure diversity.
    pub mmr_lambda: f32,
    /// Rank-fusion constant k0 in 1/(k0 + rank).
    pub rrf_constant: f64,
    /// Verdict score threshold tau in [0, 1].
    pub reflection_threshold: f32,
    /// Maximum verdict calls per user (T_max).
    pub max_reflections: u32,
    /// Upper bound on search queries per plan.
    pub queries_per_plan: usize,
    /// Per-query retrieval depth fed into rank fusion.
    pub retrieval_depth: usize,
    /// Candidates shown to the verdict call.
    pub verdict_depth: usize,
    /// Evaluation cutoffs; strictly increasing.
    pub top_k_eval: Vec<usize>,
    /// Train/valid/test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
    /// Iterative user/item core threshold.
    pub min_core: usize,
    /// Events below this rating (or unrated events) are dropped; None disables.
    pub min_rating: Option<f64>,
    /// Remove train-history items from recommendation lists.
    pub exclude_history: bool,
    pub ablation: AblationFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embedding_dim: 256,
            bundle_window: 5,
            bundle_stride: 5,
            whole_history_bundle: false,
            k_exploit: 3,
            k_div: 2,
            k_social: 2,
            mmr_lambda: 0.5,
            rrf_constant: 60.0,
            reflection_threshold: 0.8,
            max_reflections: 2,
            queries_per_plan: 4,
            retrieval_depth: 100,
            verdict_depth: 10,
            top_k_eval: vec![5, 10, 20],
            split_ratios: [0.8, 0.1, 0.1],
            min_core: 5,
            min_rating: Some(3.0),
            exclude_history: true,
            ablation: AblationFlags::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            toml::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Stable 16-hex-char digest of the canonical JSON form; printed on every
    /// run and embedded in evaluation reports.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        let digest = h.finalize();
        hex::encode(digest)[..16].to_string()
    }
}

/// Checks every config invariant and returns all violations at once; the Ok
/// value carries non-fatal warnings (currently: reflection enabled with
/// max_reflections = 0, which is equivalent to reflection off).
pub fn validate_config(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    if cfg.embedding_dim == 0 {
        errors.push("embedding_dim must be >= 1".to_string());
    }
    if cfg.bundle_window == 0 {
        errors.push("bundle_window must be >= 1".to_string());
    }
    if cfg.bundle_stride == 0 || cfg.bundle_stride > cfg.bundle_window {
        errors.push(format!(
            "bundle_stride must be in [1, bundle_window={}], got {}",
            cfg.bundle_window, cfg.bundle_stride
        ));
    }
    for (name, v) in [
        ("k_exploit", cfg.k_exploit),
        ("k_div", cfg.k_div),
        ("k_social", cfg.k_social),
        ("queries_per_plan", cfg.queries_per_plan),
        ("retrieval_depth", cfg.retrieval_depth),
        ("verdict_depth", cfg.verdict_depth),
        ("min_core", cfg.min_core),
    ] {
        if v == 0 {
            errors.push(format!("{name} must be >= 1"));
        }
    }
    if !cfg.mmr_lambda.is_finite() || !(0.0..=1.0).contains(&cfg.mmr_lambda) {
        errors.push(format!("mmr_lambda must be in [0, 1], got {}", cfg.mmr_lambda));
    }
    if !cfg.rrf_constant.is_finite() || cfg.rrf_constant <= 0.0 {
        errors.push(format!("rrf_constant must be positive, got {}", cfg.rrf_constant));
    }
    if !cfg.reflection_threshold.is_finite() || !(0.0..=1.0).contains(&cfg.reflection_threshold) {
        errors.push(format!(
            "reflection_threshold must be in [0, 1], got {}",
            cfg.reflection_threshold
        ));
    }
    if cfg.top_k_eval.is_empty() {
        errors.push("top_k_eval must not be empty".to_string());
    } else {
        if cfg.top_k_eval[0] == 0 {
            errors.push("top_k_eval cutoffs must be >= 1".to_string());
        }
        if cfg.top_k_eval.windows(2).any(|w| w[0] >= w[1]) {
            errors.push(format!("top_k_eval must be strictly increasing, got {:?}", cfg.top_k_eval));
        }
    }
    let ratio_sum: f64 = cfg.split_ratios.iter().sum();
    if cfg.split_ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        errors.push(format!("split_ratios must all be positive, got {:?}", cfg.split_ratios));
    } else if (ratio_sum - 1.0).abs() > 1e-9 {
        errors.push(format!("split_ratios must sum to 1, got {ratio_sum}"));
    }
    if let Some(r) = cfg.min_rating {
        if !r.is_finite() {
            errors.push(format!("min_rating must be finite, got {r}"));
        }
    }
    if cfg.ablation.reflection && cfg.max_reflections == 0 {
        warnings.push(
            "reflection is enabled but max_reflections = 0; behaves as reflection off".to_string(),
        );
    }

    if errors.is_empty() {
        Ok(warnings)
    } else {
        Err(Error::Config(errors))
    }
}
