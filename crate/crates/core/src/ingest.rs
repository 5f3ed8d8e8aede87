//! Dataset loading, filtering (rating gate then iterative core pruning),
//! global chronological splitting, and popularity computation.
//!
//! File formats (bit-exact):
//! - interactions: delimited text, one event per row; the delimiter is any
//!   string (multi-character supported, e.g. "::"); an optional header row
//!   names columns, otherwise columns are addressed by 0-based index.
//! - items / users: one JSON object per line; items carry "item_id", users
//!   "user_id"; every other key becomes metadata text (string kept verbatim,
//!   array of strings joined with ", ", other values compact JSON).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{InteractionEvent, ItemRecord, SplitTag, UserRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    Index(usize),
}

impl ColumnRef {
    /// CLI form: all-digits strings are indexes, everything else is a name.
    pub fn parse(s: &str) -> ColumnRef {
        if !s.is_empty() && s.chars().all(|c| c.is_ascii_digit()) {
            ColumnRef::Index(s.parse().expect("digits fit usize"))
        } else {
            ColumnRef::Name(s.to_string())
        }
    }
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnRef::Name(n) => write!(f, "{n}"),
            ColumnRef::Index(i) => write!(f, "#{i}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TableFormat {
    pub delimiter: String,
    pub has_header: bool,
}

impl Default for TableFormat {
    fn default() -> Self {
        TableFormat { delimiter: "\t".to_string(), has_header: true }
    }
}

#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub user: ColumnRef,
    pub item: ColumnRef,
    pub rating: Option<ColumnRef>,
    pub timestamp: ColumnRef,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            user: ColumnRef::Name("user_id".to_string()),
            item: ColumnRef::Name("item_id".to_string()),
            rating: Some(ColumnRef::Name("rating".to_string())),
            timestamp: ColumnRef::Name("timestamp".to_string()),
        }
    }
}

/// Row-level problems are counted and sampled, never silently dropped.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LoadReport {
    pub rows: u64,
    pub loaded: u64,
    pub rejected_total: u64,
    /// First rejections as (1-based line number, reason); capped.
    pub rejections: Vec<(u64, String)>,
}

const MAX_SAMPLED_REJECTIONS: usize = 20;

/// Per-record metadata: id -> (field -> value).
pub type MetadataTable = BTreeMap<String, BTreeMap<String, String>>;

impl LoadReport {
    fn reject(&mut self, line_no: u64, reason: impl Into<String>) {
        self.rejected_total += 1;
        if self.rejections.len() < MAX_SAMPLED_REJECTIONS {
            self.rejections.push((line_no, reason.into()));
        }
    }
}

fn resolve(
    col: &ColumnRef,
    header: Option<&BTreeMap<String, usize>>,
    path: &Path,
) -> Result<usize> {
    match col {
        ColumnRef::Index(i) => Ok(*i),
        ColumnRef::Name(name) => match header {
            Some(h) => h.get(name).copied().ok_or_else(|| Error::MissingColumn {
                column: name.clone(),
                path: path.to_path_buf(),
            }),
            None => Err(Error::MissingColumn {
                column: format!("{name} (file has no header; use a column index)"),
                path: path.to_path_buf(),
            }),
        },
    }
}

pub fn load_interactions(
    path: &Path,
    format: &TableFormat,
    columns: &ColumnSpec,
) -> Result<(Vec<InteractionEvent>, LoadReport)> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines().enumerate();
    let mut report = LoadReport::default();

    let header: Option<BTreeMap<String, usize>> = if format.has_header {
        lines.next().map(|(_, line)| {
            line.split(format.delimiter.as_str())
                .enumerate()
                .map(|(i, name)| (name.trim().to_string(), i))
                .collect()
        })
    } else {
        None
    };

    let user_col = resolve(&columns.user, header.as_ref(), path)?;
    let item_col = resolve(&columns.item, header.as_ref(), path)?;
    let time_col = resolve(&columns.timestamp, header.as_ref(), path)?;
    let rating_col = match &columns.rating {
        Some(c) => Some(resolve(c, header.as_ref(), path)?),
        None => None,
    };

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line_no = idx as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.rows += 1;
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).map(str::trim).collect();
        let field = |col: usize| fields.get(col).copied().unwrap_or("");

        let user_id = field(user_col);
        let item_id = field(item_col);
        if user_id.is_empty() {
            report.reject(line_no, "empty user field");
            continue;
        }
        if item_id.is_empty() {
            report.reject(line_no, "empty item field");
            continue;
        }
        let timestamp: i64 = match field(time_col).parse() {
            Ok(t) => t,
            Err(_) => {
                report.reject(line_no, format!("unparsable timestamp {:?}", field(time_col)));
                continue;
            }
        };
        if timestamp < 0 {
            report.reject(line_no, format!("negative timestamp {timestamp}"));
            continue;
        }
        let rating: Option<f64> = match rating_col {
            None => None,
            Some(col) => {
                let s = field(col);
                if s.is_empty() {
                    None
                } else {
                    match s.parse::<f64>() {
                        Ok(r) if r.is_finite() => Some(r),
                        _ => {
                            report.reject(line_no, format!("unparsable rating {s:?}"));
                            continue;
                        }
                    }
                }
            }
        };
        events.push(InteractionEvent {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            rating,
            timestamp,
            split_tag: SplitTag::Unassigned,
        });
        report.loaded += 1;
    }
    Ok((events, report))
}

fn metadata_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(arr) if arr.iter().all(|x| x.is_string()) => arr
            .iter()
            .map(|x| x.as_str().expect("checked string").to_string())
            .collect::<Vec<_>>()
            .join(", "),
        other => other.to_string(),
    }
}

fn load_jsonl_records(
    path: &Path,
    id_key: &str,
) -> Result<(MetadataTable, LoadReport)> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    let mut report = LoadReport::default();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.rows += 1;
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                report.reject(line_no, format!("bad json: {e}"));
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            report.reject(line_no, "not a json object");
            continue;
        };
        let id = match obj.get(id_key) {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => {
                report.reject(line_no, format!("missing {id_key}"));
                continue;
            }
        };
        if out.contains_key(&id) {
            report.reject(line_no, format!("duplicate {id_key} {id:?}"));
            continue;
        }
        let metadata: BTreeMap<String, String> = obj
            .iter()
            .filter(|(k, _)| k.as_str() != id_key)
            .map(|(k, v)| (k.clone(), metadata_value(v)))
            .collect();
        out.insert(id, metadata);
        report.loaded += 1;
    }
    Ok((out, report))
}

/// Items file: one JSON object per line keyed "item_id".
pub fn load_items(path: &Path) -> Result<(BTreeMap<String, ItemRecord>, LoadReport)> {
    let (records, report) = load_jsonl_records(path, "item_id")?;
    let items = records.into_iter().map(|(id, md)| (id.clone(), ItemRecord::new(id, md))).collect();
    Ok((items, report))
}

/// Users file: one JSON object per line keyed "user_id"; values become the
/// user-side metadata available to motive annotation.
pub fn load_users(path: &Path) -> Result<(MetadataTable, LoadReport)> {
    load_jsonl_records(path, "user_id")
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FilterReport {
    pub input_events: u64,
    pub removed_by_rating: u64,
    pub removed_by_core: u64,
    pub rounds: u64,
}

/// Rating gate first (events with rating below `min_rating`, or with no
/// rating at all, are dropped), then iterative pruning of users/items with
/// fewer than `min_count` events until the fixed point.
pub fn apply_core_filter(
    events: Vec<InteractionEvent>,
    min_count: usize,
    min_rating: Option<f64>,
) -> Result<(Vec<InteractionEvent>, FilterReport)> {
    if events.is_empty() {
        return Err(Error::EmptyDataset("no interactions to filter".to_string()));
    }
    let mut report = FilterReport { input_events: events.len() as u64, ..Default::default() };

    let mut kept: Vec<InteractionEvent> = match min_rating {
        None => events,
        Some(min) => events
            .into_iter()
            .filter(|e| e.rating.map(|r| r >= min).unwrap_or(false))
            .collect(),
    };
    report.removed_by_rating = report.input_events - kept.len() as u64;
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "every interaction fell below min_rating {min_rating:?}"
        )));
    }

    loop {
        report.rounds += 1;
        let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &kept {
            *user_counts.entry(&e.user_id).or_insert(0) += 1;
            *item_counts.entry(&e.item_id).or_insert(0) += 1;
        }
        let bad_users: BTreeSet<String> = user_counts
            .iter()
            .filter(|(_, c)| **c < min_count)
            .map(|(u, _)| u.to_string())
            .collect();
        let bad_items: BTreeSet<String> = item_counts
            .iter()
            .filter(|(_, c)| **c < min_count)
            .map(|(i, _)| i.to_string())
            .collect();
        if bad_users.is_empty() && bad_items.is_empty() {
            break;
        }
        let before = kept.len();
        kept.retain(|e| !bad_users.contains(&e.user_id) && !bad_items.contains(&e.item_id));
        report.removed_by_core += (before - kept.len()) as u64;
        if kept.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "core filter (min {min_count}) removed every interaction"
            )));
        }
    }
    Ok((kept, report))
}

/// Exclusive upper timestamp bounds: train = ts < t_train_end,
/// valid = t_train_end <= ts < t_valid_end, test = ts >= t_valid_end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub t_train_end: i64,
    pub t_valid_end: i64,
}

/// Tags every event. `events` must be sorted by the global total order.
/// Cut positions start at round(ratio * n) and are extended forward past
/// timestamp ties, so tied events always land on the earlier side.
pub fn chronological_split(
    events: &mut [InteractionEvent],
    ratios: [f64; 3],
) -> Result<SplitBoundaries> {
    let n = events.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 events to form three non-empty splits, got {n}"
        )));
    }
    debug_assert!(events
        .windows(2)
        .all(|w| InteractionEvent::global_order(&w[0], &w[1]) != std::cmp::Ordering::Greater));

    let extend_past_ties = |mut cut: usize| {
        while cut < n && events[cut].timestamp == events[cut - 1].timestamp {
            cut += 1;
        }
        cut
    };
    let c1 = {
        let raw = (ratios[0] * n as f64).round() as usize;
        extend_past_ties(raw.clamp(1, n - 2))
    };
    if c1 >= n - 1 {
        return Err(Error::Invalid(
            "timestamp ties leave an empty validation or test split".to_string(),
        ));
    }
    let c2 = {
        let raw = ((ratios[0] + ratios[1]) * n as f64).round() as usize;
        extend_past_ties(raw.clamp(c1 + 1, n - 1))
    };
    if c2 >= n {
        return Err(Error::Invalid(
            "timestamp ties leave an empty validation or test split".to_string(),
        ));
    }

    let boundaries =
        SplitBoundaries { t_train_end: events[c1].timestamp, t_valid_end: events[c2].timestamp };
    for (i, e) in events.iter_mut().enumerate() {
        e.split_tag = if i < c1 {
            SplitTag::Train
        } else if i < c2 {
            SplitTag::Valid
        } else {
            SplitTag::Test
        };
    }
    Ok(boundaries)
}

/// popularity = exact train-split count; items unseen in train get 0.
pub fn compute_popularity(events: &[InteractionEvent], items: &mut BTreeMap<String, ItemRecord>) {
    for item in items.values_mut() {
        item.popularity = 0;
    }
    for e in events {
        if e.split_tag == SplitTag::Train {
            if let Some(item) = items.get_mut(&e.item_id) {
                item.popularity += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetStats {
    pub users: u64,
    pub items: u64,
    pub interactions: u64,
    pub train_events: u64,
    pub valid_events: u64,
    pub test_events: u64,
    pub rejected_rows: u64,
    pub removed_by_rating: u64,
    pub removed_by_core: u64,
    pub filter_rounds: u64,
    /// Items present in the metadata file but absent from filtered events.
    pub dropped_metadata_items: u64,
    /// Filtered events whose item had no metadata record (placeholder used).
    pub placeholder_items: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetBundle {
    pub users: BTreeMap<String, UserRecord>,
    pub items: BTreeMap<String, ItemRecord>,
    pub split_boundaries: SplitBoundaries,
    pub stats: DatasetStats,
}

impl DatasetBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Each user's test-split items; users without test events are absent.
    pub fn relevance_candidates(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for user in self.users.values() {
            let set: BTreeSet<String> = user
                .history
                .iter()
                .filter(|e| e.split_tag == SplitTag::Test)
                .map(|e| e.item_id.clone())
                .collect();
            if !set.is_empty() {
                out.insert(user.user_id.clone(), set);
            }
        }
        out
    }
}

/// Filter -> sort -> split -> popularity -> per-user assembly. `raw_items`
/// may be empty: items seen only in events get a minimal placeholder record.
pub fn build_dataset(
    raw_events: Vec<InteractionEvent>,
    mut raw_items: BTreeMap<String, ItemRecord>,
    user_metadata: MetadataTable,
    min_core: usize,
    min_rating: Option<f64>,
    split_ratios: [f64; 3],
    rejected_rows: u64,
) -> Result<DatasetBundle> {
    let (mut events, filter_report) = apply_core_filter(raw_events, min_core, min_rating)?;
    events.sort_by(InteractionEvent::global_order);
    let split_boundaries = chronological_split(&mut events, split_ratios)?;

    let event_items: BTreeSet<&str> = events.iter().map(|e| e.item_id.as_str()).collect();
    let metadata_items = raw_items.len() as u64;
    raw_items.retain(|id, _| event_items.contains(id.as_str()));
    let dropped_metadata_items = metadata_items - raw_items.len() as u64;
    let mut placeholder_items = 0u64;
    for id in &event_items {
        if !raw_items.contains_key(*id) {
            placeholder_items += 1;
            let md: BTreeMap<String, String> =
                [("id".to_string(), id.to_string())].into_iter().collect();
            raw_items.insert(id.to_string(), ItemRecord::new(id.to_string(), md));
        }
    }
    compute_popularity(&events, &mut raw_items);

    let mut stats = DatasetStats {
        interactions: events.len() as u64,
        rejected_rows,
        removed_by_rating: filter_report.removed_by_rating,
        removed_by_core: filter_report.removed_by_core,
        filter_rounds: filter_report.rounds,
        dropped_metadata_items,
        placeholder_items,
        ..Default::default()
    };
    for e in &events {
        match e.split_tag {
            SplitTag::Train => stats.train_events += 1,
            SplitTag::Valid => stats.valid_events += 1,
            SplitTag::Test => stats.test_events += 1,
            SplitTag::Unassigned => unreachable!("split tagged every event"),
        }
    }

    let mut users: BTreeMap<String, UserRecord> = BTreeMap::new();
    for e in events {
        users
            .entry(e.user_id.clone())
            .or_insert_with(|| UserRecord {
                user_id: e.user_id.clone(),
                metadata: user_metadata.get(&e.user_id).cloned().unwrap_or_default(),
                history: Vec::new(),
            })
            .history
            .push(e);
    }
    for user in users.values_mut() {
        user.history.sort_by(InteractionEvent::user_order);
    }
    stats.users = users.len() as u64;
    stats.items = raw_items.len() as u64;

    Ok(DatasetBundle { users, items: raw_items, split_boundaries, stats })
}
