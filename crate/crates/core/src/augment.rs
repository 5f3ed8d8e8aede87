//! Item augmentation: generate a natural-language description per item,
//! build the augmented text (serialized metadata + blank line + description),
//! and embed every item into the `Items` namespace.
//!
//! The index vector comes from the description alone; the augmented text is
//! the fuller document later stages read. Items whose generation fails after
//! retries are kept in degraded mode: their augmented text is the serialized
//! metadata and that text is what gets embedded, so the catalog stays fully
//! indexable. Embedding failures, by contrast, are fatal — a missing vector
//! would silently shrink the search space.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{AugmentationStatus, ItemRecord};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ParsedPayload, TemplateName};
use crate::index::VectorIndex;
use crate::text::{serialize_metadata, METADATA_SEPARATOR};

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AugmentReport {
    pub total: u64,
    pub generated: u64,
    pub degraded: u64,
    pub from_cache: u64,
}

/// Only successful generations are cached; degraded items are retried on
/// `--resume` so flaky real-API runs converge toward full coverage.
#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    description: String,
    embedding: Vec<f32>,
}

fn cache_key(template_text: &str, serialized_metadata: &str, text_id: &str, embed_id: &str) -> String {
    let mut h = Sha256::new();
    for part in [template_text, serialized_metadata, text_id, embed_id] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn degrade(item: &mut ItemRecord, serialized: String) {
    item.description = None;
    item.augmented_text = Some(serialized);
    item.augmentation = AugmentationStatus::Degraded;
}

/// Returns a copy of `item` with description, augmented text, embedding, and
/// status filled in. Generation failure (exhausted retries or unusable
/// output) degrades the item; embedding failure is fatal.
pub fn augment_item(item: &ItemRecord, gateway: &Gateway) -> Result<ItemRecord> {
    if item.raw_metadata.is_empty() {
        return Err(Error::Invalid(format!(
            "item {:?} has no metadata to augment",
            item.item_id
        )));
    }
    let serialized = serialize_metadata(&item.raw_metadata);
    let bindings: BTreeMap<String, String> =
        [("metadata".to_string(), serialized.clone())].into_iter().collect();

    let mut out = item.clone();
    match gateway.generate(TemplateName::Item, bindings, 0) {
        Ok(resp) => match resp.payload {
            ParsedPayload::FreeText(desc) => {
                out.augmented_text = Some(format!("{serialized}{METADATA_SEPARATOR}{desc}"));
                out.description = Some(desc);
                out.augmentation = AugmentationStatus::Generated;
            }
            _ => degrade(&mut out, serialized),
        },
        Err(Error::Gateway(_)) => degrade(&mut out, serialized),
        Err(e) => return Err(e),
    }

    let embed_source = match out.augmentation {
        AugmentationStatus::Generated => out.description.as_deref().expect("generated"),
        _ => out.augmented_text.as_deref().expect("degraded text set"),
    };
    out.embedding = Some(gateway.embed_one(embed_source)?);
    Ok(out)
}

fn try_read_cache(path: &Path, expected_dim: usize) -> Option<CacheRecord> {
    let raw = std::fs::read(path).ok()?;
    let record: CacheRecord = serde_json::from_slice(&raw).ok()?;
    (record.embedding.len() == expected_dim).then_some(record)
}

/// Augments every item (concurrently, up to the gateway's in-flight bound),
/// updates the records in place, and inserts one vector per item into a fresh
/// `Items` namespace. With `resume`, previously cached generations are reused
/// instead of calling the backend.
pub fn build_item_index(
    items: &mut BTreeMap<String, ItemRecord>,
    gateway: &Gateway,
    cache_dir: &Path,
    resume: bool,
) -> Result<(VectorIndex, AugmentReport)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("no items to augment".to_string()));
    }
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let template_text = gateway.template_text(TemplateName::Item).to_string();
    let text_id = gateway.text_backend_id();
    let embed_id = gateway.embed_backend_id();
    let dim = gateway.dimension();

    struct Job {
        item_id: String,
        cache_path: std::path::PathBuf,
        cached: Option<CacheRecord>,
    }
    let jobs: Vec<Job> = items
        .values()
        .map(|item| {
            let serialized = serialize_metadata(&item.raw_metadata);
            let key = cache_key(&template_text, &serialized, &text_id, &embed_id);
            let cache_path = cache_dir.join(format!("{key}.json"));
            let cached = if resume { try_read_cache(&cache_path, dim) } else { None };
            Job { item_id: item.item_id.clone(), cache_path, cached }
        })
        .collect();

    // Collect preserves job order, so downstream writes are deterministic.
    let outcomes: Vec<Result<(ItemRecord, bool)>> = jobs
        .par_iter()
        .map(|job| {
            let item = &items[&job.item_id];
            if let Some(cached) = &job.cached {
                let serialized = serialize_metadata(&item.raw_metadata);
                let mut out = item.clone();
                out.augmented_text =
                    Some(format!("{serialized}{METADATA_SEPARATOR}{}", cached.description));
                out.description = Some(cached.description.clone());
                out.augmentation = AugmentationStatus::Generated;
                out.embedding = Some(cached.embedding.clone());
                return Ok((out, true));
            }
            augment_item(item, gateway).map(|out| (out, false))
        })
        .collect();

    let mut report = AugmentReport { total: items.len() as u64, ..Default::default() };
    let mut index = VectorIndex::new(dim);
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let (record, from_cache) = outcome?;
        match record.augmentation {
            AugmentationStatus::Generated => {
                report.generated += 1;
                if from_cache {
                    report.from_cache += 1;
                } else {
                    let cache_record = CacheRecord {
                        description: record.description.clone().expect("generated"),
                        embedding: record.embedding.clone().expect("embedded"),
                    };
                    let json = serde_json::to_vec(&cache_record)?;
                    std::fs::write(&job.cache_path, json)
                        .map_err(|e| Error::io(&job.cache_path, e))?;
                }
            }
            _ => report.degraded += 1,
        }
        index.insert_item(
            record.item_id.clone(),
            record.embedding.clone().expect("every outcome embedded"),
        )?;
        items.insert(job.item_id.clone(), record);
    }

    if report.degraded == report.total {
        return Err(Error::Gateway(format!(
            "augmentation failed for every item ({} of {})",
            report.degraded, report.total
        )));
    }
    Ok((index, report))
}
