//! Motive annotation: partition each user's train-split history into
//! chronological bundles, infer one motive text per bundle, embed it, and
//! populate the per-user and global motive namespaces.
//!
//! Only train events are bundled — later events would leak the future into
//! the profile. A failed bundle shrinks the profile and is reported; it never
//! aborts the run. With the annotation ablation off, motive text is the plain
//! concatenation of the bundle's item titles and no text backend is called.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{InteractionEvent, ItemRecord, MotiveAnnotation, PipelineConfig, UserRecord};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ParsedPayload, TemplateName};
use crate::index::VectorIndex;
use crate::text::serialize_metadata;

/// Separator between item blocks inside the annotate prompt.
pub const ITEM_BLOCK_SEPARATOR: &str = "\n---\n";

/// Sliding event-count windows over the ordered train events: starts at
/// 0, stride, 2*stride, ...; the final window may be short so no event is
/// left unbundled. Returns borrowed event lists, chronological within and
/// across bundles.
pub fn build_bundles(
    user: &UserRecord,
    window: usize,
    stride: usize,
) -> Vec<Vec<&InteractionEvent>> {
    assert!(window >= 1, "bundle window must be >= 1");
    assert!((1..=window).contains(&stride), "stride must be in [1, window]");
    let train: Vec<&InteractionEvent> = user.train_events().collect();
    let n = train.len();
    let mut bundles = Vec::new();
    let mut start = 0;
    while start < n {
        let len = window.min(n - start);
        bundles.push(train[start..start + len].to_vec());
        start += stride;
    }
    bundles
}

/// A bundle either yields motive text or is skipped with a reason; fatal
/// errors are reserved for precondition violations (empty bundle, items not
/// yet augmented, broken prompt).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BundleOutcome {
    Annotated(String),
    Skipped { reason: String },
}

fn bundle_blocks<'a>(
    bundle: &[&InteractionEvent],
    items: &'a BTreeMap<String, ItemRecord>,
) -> Result<Vec<&'a str>> {
    bundle
        .iter()
        .map(|e| {
            let item = items.get(&e.item_id).ok_or_else(|| {
                Error::Invalid(format!("bundle references unknown item {:?}", e.item_id))
            })?;
            item.augmented_text.as_deref().ok_or_else(|| {
                Error::Invalid(format!(
                    "item {:?} has no augmented text; run augmentation first",
                    e.item_id
                ))
            })
        })
        .collect()
}

/// Infers the motive text for one bundle. The output must never be a
/// verbatim copy of any single item's metadata or augmented block; such
/// outputs are rejected (the bundle is skipped).
pub fn annotate_bundle(
    user: &UserRecord,
    bundle: &[&InteractionEvent],
    items: &BTreeMap<String, ItemRecord>,
    gateway: &Gateway,
) -> Result<BundleOutcome> {
    if bundle.is_empty() {
        return Err(Error::Invalid("cannot annotate an empty bundle".to_string()));
    }
    let blocks = bundle_blocks(bundle, items)?;
    let user_text = {
        let s = serialize_metadata(&user.metadata);
        if s.is_empty() {
            "(none)".to_string()
        } else {
            s
        }
    };
    let bindings: BTreeMap<String, String> = [
        ("user".to_string(), user_text),
        ("items".to_string(), blocks.join(ITEM_BLOCK_SEPARATOR)),
    ]
    .into_iter()
    .collect();

    let motive = match gateway.generate(TemplateName::Annotate, bindings, 0) {
        Ok(resp) => match resp.payload {
            ParsedPayload::FreeText(text) => text,
            ParsedPayload::Failed { reason } => {
                return Ok(BundleOutcome::Skipped { reason });
            }
            _ => unreachable!("annotate template parses as free text"),
        },
        Err(Error::Gateway(reason)) => return Ok(BundleOutcome::Skipped { reason }),
        Err(e) => return Err(e),
    };

    let trimmed = motive.trim();
    let verbatim = bundle.iter().zip(&blocks).any(|(e, block)| {
        let item = &items[&e.item_id];
        trimmed == block.trim() || trimmed == serialize_metadata(&item.raw_metadata)
    });
    if verbatim {
        return Ok(BundleOutcome::Skipped {
            reason: "motive text copies an item block verbatim".to_string(),
        });
    }
    Ok(BundleOutcome::Annotated(trimmed.to_string()))
}

/// Ablation variant: the bundle's item titles in first-seen order, joined
/// with ", " — same artifact shape, no language model involved.
fn title_concat(bundle: &[&InteractionEvent], items: &BTreeMap<String, ItemRecord>) -> String {
    let mut seen = std::collections::BTreeSet::new();
    let mut titles = Vec::new();
    for e in bundle {
        let title =
            items.get(&e.item_id).map(|i| i.title().to_string()).unwrap_or_else(|| e.item_id.clone());
        if seen.insert(title.clone()) {
            titles.push(title);
        }
    }
    titles.join(", ")
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AnnotateReport {
    pub users_total: u64,
    pub users_without_train_events: u64,
    pub bundles_total: u64,
    pub bundles_annotated: u64,
    pub bundles_skipped: u64,
    /// Sample of skip reasons as "user/bundle: reason"; capped.
    pub notices: Vec<String>,
}

const MAX_NOTICES: usize = 50;

impl AnnotateReport {
    fn notice(&mut self, text: String) {
        if self.notices.len() < MAX_NOTICES {
            self.notices.push(text);
        }
    }
}

/// Annotates every user's bundles (concurrently across users and bundles),
/// embeds the motive texts, and rebuilds the motive namespaces of `index`.
/// Surviving bundles are renumbered consecutively from 1 per user, with the
/// optional whole-history bundle first, then window bundles in time order.
pub fn build_motive_index(
    users: &BTreeMap<String, UserRecord>,
    items: &BTreeMap<String, ItemRecord>,
    cfg: &PipelineConfig,
    gateway: &Gateway,
    index: &mut VectorIndex,
) -> Result<(Vec<MotiveAnnotation>, AnnotateReport)> {
    let mut report = AnnotateReport { users_total: users.len() as u64, ..Default::default() };

    struct Job<'a> {
        user: &'a UserRecord,
        events: Vec<&'a InteractionEvent>,
        whole_history: bool,
    }
    let mut jobs: Vec<Job> = Vec::new();
    for user in users.values() {
        let window_bundles =
            build_bundles(user, cfg.bundle_window, cfg.bundle_stride);
        if window_bundles.is_empty() {
            report.users_without_train_events += 1;
            report.notice(format!("{}: no train events, user skipped", user.user_id));
            continue;
        }
        if cfg.whole_history_bundle && window_bundles.len() > 1 {
            jobs.push(Job { user, events: user.train_events().collect(), whole_history: true });
        }
        for bundle in window_bundles {
            jobs.push(Job { user, events: bundle, whole_history: false });
        }
    }
    report.bundles_total = jobs.len() as u64;

    let annotation_on = cfg.ablation.annotation;
    let outcomes: Vec<Result<BundleOutcome>> = jobs
        .par_iter()
        .map(|job| {
            if annotation_on {
                annotate_bundle(job.user, &job.events, items, gateway)
            } else {
                Ok(BundleOutcome::Annotated(title_concat(&job.events, items)))
            }
        })
        .collect();

    // Renumber survivors per user in job order (whole-history bundle was
    // queued first, window bundles follow chronologically).
    let mut annotations: Vec<MotiveAnnotation> = Vec::new();
    let mut next_index: BTreeMap<&str, u32> = BTreeMap::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let ordinal = next_index.entry(job.user.user_id.as_str()).or_insert(0);
        match outcome? {
            BundleOutcome::Annotated(motive_text) => {
                *ordinal += 1;
                let first = job.events.first().expect("bundles are non-empty");
                let last = job.events.last().expect("bundles are non-empty");
                annotations.push(MotiveAnnotation {
                    user_id: job.user.user_id.clone(),
                    bundle_index: *ordinal,
                    bundle_items: job.events.iter().map(|e| e.item_id.clone()).collect(),
                    motive_text,
                    motive_vector: Vec::new(),
                    time_span: (first.timestamp, last.timestamp),
                });
                report.bundles_annotated += 1;
            }
            BundleOutcome::Skipped { reason } => {
                report.bundles_skipped += 1;
                let kind = if job.whole_history { "whole-history" } else { "window" };
                report.notice(format!(
                    "{}/bundle {} ({kind}): {reason}",
                    job.user.user_id,
                    *ordinal + 1
                ));
            }
        }
    }

    let texts: Vec<String> = annotations.iter().map(|a| a.motive_text.clone()).collect();
    let vectors = if texts.is_empty() { Vec::new() } else { gateway.embed(&texts)? };
    index.clear_motives();
    for (annotation, vector) in annotations.iter_mut().zip(vectors) {
        annotation.motive_vector = vector.clone();
        index.insert_motive(annotation.user_id.clone(), annotation.bundle_index, vector)?;
    }
    Ok((annotations, report))
}

/// One annotation per line, sorted by (user, bundle index).
pub fn save_annotations(annotations: &[MotiveAnnotation], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&serde_json::to_string(a)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &std::path::Path) -> Result<Vec<MotiveAnnotation>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
