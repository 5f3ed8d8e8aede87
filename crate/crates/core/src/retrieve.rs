//! Dual retrieval: select motives from the user's own profile (exploit),
//! from its less-similar remainder (diverse, via MMR), and from other users'
//! profiles (social), then synthesize the search-query set for the plan.
//!
//! The three strategy lists are pairwise disjoint by motive key and social
//! picks never belong to the target user. When no explicit query is given,
//! similarity-based selection uses a pseudo-query: the normalized mean of the
//! user's most recent motive vectors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::MotiveAnnotation;
use crate::domain::PipelineConfig;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ParsedPayload, TemplateName};
use crate::index::{l2_normalize, EntryKey, Namespace, VectorIndex};
use crate::text::token_set;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Own profile, ranked by similarity to the explicit query.
    ExploitQuery,
    /// Own profile, most recent bundles (no query present).
    ExploitLatest,
    Diverse,
    Social,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMotive {
    pub user_id: String,
    pub bundle_index: u32,
    pub strategy: Strategy,
    /// Similarity (exploit/social) or MMR objective (diverse); None for
    /// recency picks, which are not scored.
    pub score: Option<f32>,
    pub motive_text: String,
}

impl SelectedMotive {
    fn key(&self) -> (String, u32) {
        (self.user_id.clone(), self.bundle_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MotiveSelection {
    pub exploit: Vec<SelectedMotive>,
    pub diverse: Vec<SelectedMotive>,
    pub social: Vec<SelectedMotive>,
}

impl MotiveSelection {
    pub fn is_empty(&self) -> bool {
        self.exploit.is_empty() && self.diverse.is_empty() && self.social.is_empty()
    }

    /// Exploit, then diverse, then social — the order prompts see.
    pub fn iter_all(&self) -> impl Iterator<Item = &SelectedMotive> {
        self.exploit.iter().chain(&self.diverse).chain(&self.social)
    }

    /// Motive texts in selection order, deduplicated, newlines flattened so
    /// each motive occupies exactly one prompt line.
    pub fn motive_lines(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut lines = Vec::new();
        for m in self.iter_all() {
            let line = m.motive_text.split_whitespace().collect::<Vec<_>>().join(" ");
            if !line.is_empty() && seen.insert(line.clone()) {
                lines.push(line);
            }
        }
        lines
    }
}

/// Motive texts and time spans by (user, bundle) key — the side of the
/// annotation artifact the vector index does not carry.
#[derive(Debug, Clone, Default)]
pub struct MotiveCatalog {
    by_key: BTreeMap<(String, u32), MotiveAnnotation>,
}

impl MotiveCatalog {
    pub fn new(annotations: impl IntoIterator<Item = MotiveAnnotation>) -> Self {
        MotiveCatalog {
            by_key: annotations
                .into_iter()
                .map(|a| ((a.user_id.clone(), a.bundle_index), a))
                .collect(),
        }
    }

    pub fn get(&self, user: &str, bundle: u32) -> Option<&MotiveAnnotation> {
        self.by_key.get(&(user.to_string(), bundle))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    fn user_annotations(&self, user: &str) -> impl Iterator<Item = &MotiveAnnotation> {
        self.by_key
            .range((user.to_string(), 0)..=(user.to_string(), u32::MAX))
            .map(|(_, a)| a)
    }

    /// The user's k most recent motives: bundle end time desc, then start
    /// time desc, then bundle index desc.
    pub fn user_latest(&self, user: &str, k: usize) -> Vec<&MotiveAnnotation> {
        let mut all: Vec<&MotiveAnnotation> = self.user_annotations(user).collect();
        all.sort_by(|a, b| {
            (b.time_span.1, b.time_span.0, b.bundle_index).cmp(&(
                a.time_span.1,
                a.time_span.0,
                a.bundle_index,
            ))
        });
        all.truncate(k);
        all
    }
}

fn text_for(catalog: &MotiveCatalog, user: &str, bundle: u32) -> String {
    catalog
        .get(user, bundle)
        .map(|a| a.motive_text.clone())
        .unwrap_or_default()
}

fn motive_entry(
    key: &EntryKey,
    score: f32,
    strategy: Strategy,
    catalog: &MotiveCatalog,
) -> SelectedMotive {
    match key {
        EntryKey::Motive { user, bundle } => SelectedMotive {
            user_id: user.clone(),
            bundle_index: *bundle,
            strategy,
            score: Some(score),
            motive_text: text_for(catalog, user, *bundle),
        },
        EntryKey::Item(_) => unreachable!("motive namespaces never yield item keys"),
    }
}

/// From the user's own profile: top-k by similarity when a query vector is
/// present, otherwise the k most recent motives. No motives → empty list.
pub fn retrieve_exploit(
    user_id: &str,
    query_vec: Option<&[f32]>,
    k: usize,
    index: &VectorIndex,
    catalog: &MotiveCatalog,
) -> Result<Vec<SelectedMotive>> {
    match query_vec {
        Some(q) => {
            let hits = index.top_k(Namespace::MotivesOfUser(user_id), q, k, &BTreeSet::new())?;
            Ok(hits
                .iter()
                .map(|(key, score)| motive_entry(key, *score, Strategy::ExploitQuery, catalog))
                .collect())
        }
        None => Ok(catalog
            .user_latest(user_id, k)
            .into_iter()
            .map(|a| SelectedMotive {
                user_id: a.user_id.clone(),
                bundle_index: a.bundle_index,
                strategy: Strategy::ExploitLatest,
                score: None,
                motive_text: a.motive_text.clone(),
            })
            .collect()),
    }
}

/// MMR over the user's own profile with the exploit picks as the seed set:
/// prefers motives that are relevant to the query but semantically far from
/// what exploit already covers.
pub fn retrieve_diverse(
    user_id: &str,
    query_vec: &[f32],
    exploit: &[SelectedMotive],
    k: usize,
    lambda: f32,
    index: &VectorIndex,
    catalog: &MotiveCatalog,
) -> Result<Vec<SelectedMotive>> {
    let seeds: BTreeSet<EntryKey> = exploit
        .iter()
        .map(|m| EntryKey::Motive { user: m.user_id.clone(), bundle: m.bundle_index })
        .collect();
    let hits =
        index.mmr_select(Namespace::MotivesOfUser(user_id), query_vec, &seeds, k, lambda)?;
    Ok(hits
        .iter()
        .map(|(key, score)| motive_entry(key, *score, Strategy::Diverse, catalog))
        .collect())
}

/// Top-k over every other user's motives; the target user's own motives are
/// excluded wholesale. A single-user dataset therefore yields an empty list.
pub fn retrieve_social(
    user_id: &str,
    query_vec: &[f32],
    k: usize,
    index: &VectorIndex,
    catalog: &MotiveCatalog,
) -> Result<Vec<SelectedMotive>> {
    let own: BTreeSet<EntryKey> = index
        .iter_namespace(Namespace::MotivesOfUser(user_id))
        .map(|(key, _)| key)
        .collect();
    let hits = index.top_k(Namespace::MotivesGlobal, query_vec, k, &own)?;
    Ok(hits
        .iter()
        .map(|(key, score)| motive_entry(key, *score, Strategy::Social, catalog))
        .collect())
}

/// Normalized mean of the user's `k` most recent motive vectors; None when
/// the user has no motives or the mean collapses to (near) zero.
pub fn pseudo_query(
    user_id: &str,
    k: usize,
    index: &VectorIndex,
    catalog: &MotiveCatalog,
) -> Option<Vec<f32>> {
    let latest = catalog.user_latest(user_id, k);
    if latest.is_empty() {
        return None;
    }
    let mut mean = vec![0.0f32; index.dim()];
    let mut count = 0usize;
    for a in &latest {
        let key = EntryKey::Motive { user: a.user_id.clone(), bundle: a.bundle_index };
        if let Some(v) = index.get(&key) {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f32;
    for m in &mut mean {
        *m *= inv;
    }
    l2_normalize(&mut mean).then_some(mean)
}

/// Exploit + diverse + social per the configured ks. With the exploration
/// ablation off, diverse and social stay empty. Returns the query vector
/// (explicit or pseudo) for downstream reuse.
///
/// Errors with [`Error::NoSignal`] when the user has no motives and no
/// explicit query — there is nothing to search from.
pub fn select_motives(
    user_id: &str,
    q: Option<&str>,
    cfg: &PipelineConfig,
    gateway: &Gateway,
    index: &VectorIndex,
    catalog: &MotiveCatalog,
) -> Result<(MotiveSelection, Option<Vec<f32>>)> {
    let has_own_motives = index.iter_namespace(Namespace::MotivesOfUser(user_id)).next().is_some();
    if !has_own_motives && q.is_none() {
        return Err(Error::NoSignal { user_id: user_id.to_string() });
    }

    let query_vec: Option<Vec<f32>> = match q {
        Some(text) => Some(gateway.embed_one(text)?),
        None => pseudo_query(user_id, cfg.k_exploit, index, catalog),
    };

    let exploit = retrieve_exploit(
        user_id,
        q.and(query_vec.as_deref()),
        cfg.k_exploit,
        index,
        catalog,
    )?;

    let mut selection = MotiveSelection { exploit, ..Default::default() };
    if cfg.ablation.exploration {
        if let Some(qv) = query_vec.as_deref() {
            selection.diverse = retrieve_diverse(
                user_id,
                qv,
                &selection.exploit,
                cfg.k_div,
                cfg.mmr_lambda,
                index,
                catalog,
            )?;
            selection.social = retrieve_social(user_id, qv, cfg.k_social, index, catalog)?;
        }
    }

    debug_assert!(
        {
            let keys: Vec<_> = selection.iter_all().map(SelectedMotive::key).collect();
            let set: BTreeSet<_> = keys.iter().cloned().collect();
            keys.len() == set.len()
        },
        "strategy lists must be pairwise disjoint"
    );
    Ok((selection, query_vec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub queries: Vec<String>,
    /// 0 = initial synthesis; incremented by each accepted refinement.
    pub iteration: u32,
    pub last_verdict: Option<f32>,
    /// Synthesis parse failure made the plan fall back to raw motive texts.
    pub synth_fallback: bool,
    /// The fidelity guard had to re-insert the explicit query.
    pub guard_applied: bool,
}

/// Appends `q` when no query covers all its tokens; at capacity the last
/// query is replaced. Idempotent once satisfied. Returns true if it acted.
pub fn apply_fidelity_guard(queries: &mut Vec<String>, q: &str, capacity: usize) -> bool {
    let wanted = token_set(q);
    if wanted.is_empty() {
        return false;
    }
    if queries.iter().any(|query| {
        let have = token_set(query);
        wanted.is_subset(&have)
    }) {
        return false;
    }
    if queries.len() >= capacity.max(1) {
        queries.truncate(capacity.max(1) - 1);
    }
    queries.push(q.to_string());
    true
}

/// Builds the query plan from the selection (and the explicit query, when
/// given). Parse failure after retries falls back to the motive texts
/// themselves; the explicit query always survives via the fidelity guard.
pub fn synthesize_queries(
    q: Option<&str>,
    selection: &MotiveSelection,
    gateway: &Gateway,
    n: usize,
) -> Result<QueryPlan> {
    let lines = selection.motive_lines();
    if lines.is_empty() {
        return match q {
            Some(text) => Ok(QueryPlan {
                queries: vec![text.to_string()],
                iteration: 0,
                last_verdict: None,
                synth_fallback: false,
                guard_applied: false,
            }),
            None => Err(Error::Invalid(
                "cannot synthesize queries from an empty selection without a query".to_string(),
            )),
        };
    }

    let bindings: BTreeMap<String, String> = [
        ("query".to_string(), q.unwrap_or("").to_string()),
        ("motives".to_string(), lines.join("\n")),
        ("limit".to_string(), n.to_string()),
    ]
    .into_iter()
    .collect();

    let mut synth_fallback = false;
    let mut queries: Vec<String> = match gateway.generate(TemplateName::Query, bindings, n)?.payload
    {
        ParsedPayload::Queries(qs) => qs,
        ParsedPayload::Failed { .. } => {
            synth_fallback = true;
            lines.iter().take(n).cloned().collect()
        }
        _ => unreachable!("query template parses as a query list"),
    };
    queries.retain(|s| !s.trim().is_empty());
    queries.truncate(n);
    if queries.is_empty() {
        synth_fallback = true;
        queries = lines.iter().take(n).cloned().collect();
    }

    let guard_applied = match q {
        Some(text) => apply_fidelity_guard(&mut queries, text, n),
        None => false,
    };
    Ok(QueryPlan { queries, iteration: 0, last_verdict: None, synth_fallback, guard_applied })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{
        FaultAction, FaultInjector, FaultRule, Gateway, MockBackend, PromptSet, RetryPolicy,
    };
    use crate::index::dot;
    use std::sync::Arc;

    /// Inserts motives for `user` with the given texts; bundle i+1 spans
    /// (base + 10*i, base + 10*i + 9) so later bundles are more recent.
    fn seed_user(
        index: &mut VectorIndex,
        annotations: &mut Vec<MotiveAnnotation>,
        gw: &Gateway,
        user: &str,
        texts: &[&str],
        base_ts: i64,
    ) {
        for (i, text) in texts.iter().enumerate() {
            let bundle = i as u32 + 1;
            let vec = gw.embed_one(text).unwrap();
            index.insert_motive(user.to_string(), bundle, vec.clone()).unwrap();
            annotations.push(MotiveAnnotation {
                user_id: user.to_string(),
                bundle_index: bundle,
                bundle_items: vec![format!("item{i}")],
                motive_text: text.to_string(),
                motive_vector: vec,
                time_span: (base_ts + 10 * i as i64, base_ts + 10 * i as i64 + 9),
            });
        }
    }

    fn fixture() -> (VectorIndex, MotiveCatalog, Gateway) {
        let gw = Gateway::mock(11, 64, 4);
        let mut index = VectorIndex::new(64);
        let mut annotations = Vec::new();
        seed_user(
            &mut index,
            &mut annotations,
            &gw,
            "u1",
            &[
                "gritty war films",
                "slow burn crime dramas",
                "space exploration epics",
                "quiet family stories",
            ],
            100,
        );
        seed_user(
            &mut index,
            &mut annotations,
            &gw,
            "u2",
            &["gritty war films", "baking competition shows"],
            200,
        );
        seed_user(
            &mut index,
            &mut annotations,
            &gw,
            "u3",
            &["space exploration epics", "noir detective mysteries"],
            300,
        );
        (index, MotiveCatalog::new(annotations), gw)
    }

    fn cfg_for(dim: usize) -> PipelineConfig {
        PipelineConfig { embedding_dim: dim, ..Default::default() }
    }

    #[test]
    fn exploit_self_match_ranks_first_with_unit_score() {
        let (index, catalog, gw) = fixture();
        let qv = gw.embed_one("slow burn crime dramas").unwrap();
        let got = retrieve_exploit("u1", Some(&qv), 2, &index, &catalog).unwrap();
        assert_eq!(got[0].bundle_index, 2);
        assert_eq!(got[0].strategy, Strategy::ExploitQuery);
        assert!((got[0].score.unwrap() - 1.0).abs() < 1e-5, "score {:?}", got[0].score);
        assert_eq!(got[0].motive_text, "slow burn crime dramas");
    }

    #[test]
    fn latest_k_returns_most_recent_bundles_first() {
        let (index, catalog, _) = fixture();
        let got = retrieve_exploit("u1", None, 2, &index, &catalog).unwrap();
        let indices: Vec<u32> = got.iter().map(|m| m.bundle_index).collect();
        assert_eq!(indices, [4, 3]);
        assert!(got.iter().all(|m| m.strategy == Strategy::ExploitLatest && m.score.is_none()));
    }

    #[test]
    fn exploit_matches_brute_force_cosine_oracle() {
        let (index, catalog, gw) = fixture();
        let qv = gw.embed_one("wartime heroics").unwrap();
        let got = retrieve_exploit("u1", Some(&qv), 3, &index, &catalog).unwrap();

        let mut oracle: Vec<(u32, f32)> = (1..=4u32)
            .map(|b| {
                let key = EntryKey::Motive { user: "u1".to_string(), bundle: b };
                (b, dot(index.get(&key).unwrap(), &qv))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let expected: Vec<(u32, f32)> = oracle.into_iter().take(3).collect();
        let actual: Vec<(u32, f32)> =
            got.iter().map(|m| (m.bundle_index, m.score.unwrap())).collect();
        assert_eq!(actual, expected);
    }

    #[test]
    fn cold_user_yields_empty_exploit() {
        let (index, catalog, gw) = fixture();
        let qv = gw.embed_one("anything").unwrap();
        assert!(retrieve_exploit("nobody", Some(&qv), 3, &index, &catalog).unwrap().is_empty());
        assert!(retrieve_exploit("nobody", None, 3, &index, &catalog).unwrap().is_empty());
    }

    #[test]
    fn diverse_lambda_one_degenerates_to_next_best() {
        let (index, catalog, gw) = fixture();
        let qv = gw.embed_one("gritty war films").unwrap();
        let exploit = retrieve_exploit("u1", Some(&qv), 1, &index, &catalog).unwrap();
        assert_eq!(exploit[0].bundle_index, 1);
        let diverse =
            retrieve_diverse("u1", &qv, &exploit, 2, 1.0, &index, &catalog).unwrap();
        let seeds: BTreeSet<EntryKey> =
            [EntryKey::Motive { user: "u1".to_string(), bundle: 1 }].into_iter().collect();
        let expected = index.top_k(Namespace::MotivesOfUser("u1"), &qv, 2, &seeds).unwrap();
        let expected_indices: Vec<u32> = expected
            .iter()
            .map(|(k, _)| match k {
                EntryKey::Motive { bundle, .. } => *bundle,
                _ => unreachable!(),
            })
            .collect();
        let got_indices: Vec<u32> = diverse.iter().map(|m| m.bundle_index).collect();
        assert_eq!(got_indices, expected_indices);
        assert!(diverse.iter().all(|m| m.bundle_index != 1), "seed never reselected");
    }

    #[test]
    fn duplicate_of_exploit_pick_is_chosen_last() {
        let gw = Gateway::mock(11, 256, 4);
        let mut index = VectorIndex::new(256);
        let mut annotations = Vec::new();
        // Bundles 1 and 2 share a vector (identical text); 3 differs. The
        // query overlaps the twins partially so relevance and penalty differ.
        seed_user(
            &mut index,
            &mut annotations,
            &gw,
            "u",
            &["gritty war films", "gritty war films", "baking shows"],
            0,
        );
        let catalog = MotiveCatalog::new(annotations);
        let qv = gw.embed_one("war films tonight").unwrap();
        let exploit = retrieve_exploit("u", Some(&qv), 1, &index, &catalog).unwrap();
        assert_eq!(exploit[0].bundle_index, 1, "tie broken by key order");

        // One slot: the dissimilar motive wins over the exploit twin.
        let one = retrieve_diverse("u", &qv, &exploit, 1, 0.5, &index, &catalog).unwrap();
        assert_eq!(one[0].bundle_index, 3);
        // Pool exhaustion: asking for two returns the twin last.
        let two = retrieve_diverse("u", &qv, &exploit, 2, 0.5, &index, &catalog).unwrap();
        let indices: Vec<u32> = two.iter().map(|m| m.bundle_index).collect();
        assert_eq!(indices, [3, 2]);
    }

    #[test]
    fn social_twin_profile_ranks_first_and_never_self() {
        let (index, catalog, gw) = fixture();
        let qv = gw.embed_one("gritty war films").unwrap();
        let got = retrieve_social("u1", &qv, 3, &index, &catalog).unwrap();
        assert_eq!((got[0].user_id.as_str(), got[0].bundle_index), ("u2", 1));
        assert!((got[0].score.unwrap() - 1.0).abs() < 1e-5);
        assert!(got.iter().all(|m| m.user_id != "u1"));
    }

    #[test]
    fn social_is_empty_for_single_user_dataset() {
        let gw = Gateway::mock(11, 64, 4);
        let mut index = VectorIndex::new(64);
        let mut annotations = Vec::new();
        seed_user(&mut index, &mut annotations, &gw, "solo", &["anything at all"], 0);
        let catalog = MotiveCatalog::new(annotations);
        let qv = gw.embed_one("anything at all").unwrap();
        assert!(retrieve_social("solo", &qv, 5, &index, &catalog).unwrap().is_empty());
    }

    #[test]
    fn social_matches_brute_force_oracle_excluding_self() {
        let (index, catalog, gw) = fixture();
        let qv = gw.embed_one("space exploration epics").unwrap();
        let got = retrieve_social("u1", &qv, 4, &index, &catalog).unwrap();

        let mut oracle: Vec<((String, u32), f32)> = index
            .iter_namespace(Namespace::MotivesGlobal)
            .filter_map(|(key, v)| match key {
                EntryKey::Motive { user, bundle } if user != "u1" => {
                    Some(((user, bundle), dot(v, &qv)))
                }
                _ => None,
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let expected: Vec<(String, u32)> =
            oracle.into_iter().take(4).map(|(k, _)| k).collect();
        let actual: Vec<(String, u32)> =
            got.iter().map(|m| (m.user_id.clone(), m.bundle_index)).collect();
        assert_eq!(actual, expected);
    }

    #[test]
    fn selection_lists_are_pairwise_disjoint() {
        let (index, catalog, gw) = fixture();
        let cfg = cfg_for(64);
        for q in [Some("war stories"), None] {
            let (selection, _) = select_motives("u1", q, &cfg, &gw, &index, &catalog).unwrap();
            let keys: Vec<(String, u32)> = selection.iter_all().map(SelectedMotive::key).collect();
            let set: BTreeSet<_> = keys.iter().cloned().collect();
            assert_eq!(keys.len(), set.len(), "q={q:?}");
            assert!(selection.social.iter().all(|m| m.user_id != "u1"));
            assert!(!selection.diverse.is_empty(), "pseudo/real query drives diversity");
            assert!(!selection.social.is_empty());
        }
    }

    #[test]
    fn no_motives_and_no_query_is_a_no_signal_error() {
        let (index, catalog, gw) = fixture();
        let cfg = cfg_for(64);
        let err = select_motives("ghost", None, &cfg, &gw, &index, &catalog).unwrap_err();
        assert!(matches!(err, Error::NoSignal { ref user_id } if user_id == "ghost"));
    }

    #[test]
    fn cold_user_with_query_falls_back_to_social_only() {
        let (index, catalog, gw) = fixture();
        let cfg = cfg_for(64);
        let (selection, qv) =
            select_motives("ghost", Some("space exploration epics"), &cfg, &gw, &index, &catalog)
                .unwrap();
        assert!(qv.is_some());
        assert!(selection.exploit.is_empty());
        assert!(selection.diverse.is_empty());
        assert!(!selection.social.is_empty());
    }

    #[test]
    fn exploration_off_keeps_only_exploit() {
        let (index, catalog, gw) = fixture();
        let mut cfg = cfg_for(64);
        cfg.ablation.exploration = false;
        let (selection, _) =
            select_motives("u1", Some("war stories"), &cfg, &gw, &index, &catalog).unwrap();
        assert!(!selection.exploit.is_empty());
        assert!(selection.diverse.is_empty());
        assert!(selection.social.is_empty());

        // Queries then derive only from exploit texts.
        let plan = synthesize_queries(Some("war stories"), &selection, &gw, 4).unwrap();
        let exploit_texts: BTreeSet<String> =
            selection.exploit.iter().map(|m| m.motive_text.clone()).collect();
        for query in &plan.queries {
            let from_exploit = exploit_texts
                .iter()
                .any(|t| crate::text::truncate_tokens(t, 8) == *query);
            assert!(from_exploit || query == "war stories", "unexpected query {query:?}");
        }
    }

    #[test]
    fn pseudo_query_is_normalized_mean_of_recent_vectors() {
        let (index, catalog, _gw) = fixture();
        let pq = pseudo_query("u1", 3, &index, &catalog).unwrap();
        // Mirror the implementation's float order: sum, then scale by 1/n.
        let mut expected = vec![0.0f32; 64];
        for bundle in [4u32, 3, 2] {
            let key = EntryKey::Motive { user: "u1".to_string(), bundle };
            for (e, x) in expected.iter_mut().zip(index.get(&key).unwrap()) {
                *e += x;
            }
        }
        let inv = 1.0f32 / 3.0;
        for e in &mut expected {
            *e *= inv;
        }
        assert!(l2_normalize(&mut expected));
        assert_eq!(pq, expected);
        assert!(pseudo_query("nobody", 3, &index, &catalog).is_none());
    }

    #[test]
    fn mock_queries_derive_from_motive_lines() {
        let (index, catalog, gw) = fixture();
        let cfg = cfg_for(64);
        let (selection, _) = select_motives("u1", None, &cfg, &gw, &index, &catalog).unwrap();
        let plan = synthesize_queries(None, &selection, &gw, 3).unwrap();
        assert!(!plan.queries.is_empty() && plan.queries.len() <= 3);
        let lines = selection.motive_lines();
        for query in &plan.queries {
            assert!(
                lines.iter().any(|l| crate::text::truncate_tokens(l, 8) == *query),
                "query {query:?} not derived from any motive line"
            );
        }
        assert!(!plan.synth_fallback);
        assert!(!plan.guard_applied);
        assert_eq!(plan.iteration, 0);
    }

    #[test]
    fn fidelity_guard_appends_disjoint_query() {
        let (index, catalog, gw) = fixture();
        let cfg = cfg_for(64);
        // Tokens of q are disjoint from every motive text, so the mock's
        // motive-derived queries can never cover them.
        let q = "Zzyzx unobtainium";
        let (selection, _) = select_motives("u1", Some(q), &cfg, &gw, &index, &catalog).unwrap();
        let plan = synthesize_queries(Some(q), &selection, &gw, 4).unwrap();
        assert!(plan.guard_applied);
        assert_eq!(plan.queries.last().map(String::as_str), Some(q));
        assert!(plan.queries.len() <= 4);
    }

    #[test]
    fn fidelity_guard_is_idempotent_and_respects_capacity() {
        let mut queries = vec!["alpha beta".to_string(), "gamma".to_string()];
        assert!(apply_fidelity_guard(&mut queries, "delta", 2));
        assert_eq!(queries, ["alpha beta", "delta"]);
        assert!(!apply_fidelity_guard(&mut queries, "delta", 2), "already satisfied");
        // Covering tokens inside a longer query counts.
        let mut queries = vec!["alpha beta gamma".to_string()];
        assert!(!apply_fidelity_guard(&mut queries, "beta alpha", 4));
    }

    #[test]
    fn empty_selection_with_query_uses_query_directly() {
        let gw = Gateway::mock(11, 64, 4);
        let plan =
            synthesize_queries(Some("exact request"), &MotiveSelection::default(), &gw, 4).unwrap();
        assert_eq!(plan.queries, ["exact request"]);
        assert!(!plan.synth_fallback);
        let err = synthesize_queries(None, &MotiveSelection::default(), &gw, 4).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn parse_failure_falls_back_to_verbatim_motives() {
        let (index, catalog, _) = fixture();
        let backend = FaultInjector::new(MockBackend::new(11, 64)).with_text_rule(FaultRule {
            template: Some(TemplateName::Query),
            prompt_contains: None,
            remaining: u32::MAX,
            action: FaultAction::Respond(String::new()),
        });
        let backend = Arc::new(backend);
        let gw =
            Gateway::new(backend.clone(), backend, PromptSet::builtin(), RetryPolicy::fast(), 4);
        let cfg = cfg_for(64);
        let (selection, _) = select_motives("u1", None, &cfg, &gw, &index, &catalog).unwrap();
        let plan = synthesize_queries(None, &selection, &gw, 2).unwrap();
        assert!(plan.synth_fallback);
        let lines = selection.motive_lines();
        assert_eq!(plan.queries, lines[..2].to_vec());
    }

    #[test]
    fn exploit_is_invariant_to_insertion_order() {
        let gw = Gateway::mock(11, 64, 4);
        let texts = ["war films", "crime dramas", "space epics"];
        let build = |order: &[usize]| {
            let mut index = VectorIndex::new(64);
            let mut annotations = Vec::new();
            for &i in order {
                let vec = gw.embed_one(texts[i]).unwrap();
                index.insert_motive("u".to_string(), i as u32 + 1, vec.clone()).unwrap();
                annotations.push(MotiveAnnotation {
                    user_id: "u".to_string(),
                    bundle_index: i as u32 + 1,
                    bundle_items: vec![],
                    motive_text: texts[i].to_string(),
                    motive_vector: vec,
                    time_span: (i as i64, i as i64),
                });
            }
            let catalog = MotiveCatalog::new(annotations);
            let qv = gw.embed_one("war films").unwrap();
            retrieve_exploit("u", Some(&qv), 3, &index, &catalog).unwrap()
        };
        assert_eq!(build(&[0, 1, 2]), build(&[2, 0, 1]));
    }
}
