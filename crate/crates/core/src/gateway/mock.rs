//! Deterministic backend used by every test: hashed bag-of-tokens embeddings
//! and rule-based text generation that exercises every pipeline branch
//! (shared-token motives, query truncation, verdict scoring, query
//! refinement) without any network or model.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::text::{token_set, tokenize};

use super::{EmbedBackend, GenerationRequest, TemplateName, TextBackend};

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    dim: usize,
}

/// FNV-1a over the seed's little-endian bytes followed by the input bytes.
fn fnv1a64(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().into_iter().chain(s.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl MockBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockBackend { seed, dim: dim.max(1) }
    }

    fn binding<'r>(req: &'r GenerationRequest, key: &str) -> &'r str {
        req.bindings.get(key).map(String::as_str).unwrap_or("")
    }

    /// Item description: the metadata VALUE tokens in first-seen order,
    /// deduplicated — guarantees the description echoes dominant metadata
    /// tokens ("Sci-Fi Horror" -> description contains both).
    fn describe_item(metadata: &str) -> String {
        let mut seen = BTreeSet::new();
        let mut out: Vec<String> = Vec::new();
        for line in metadata.lines() {
            let value = match line.split_once(": ") {
                Some((_, v)) => v,
                None => line,
            };
            for tok in tokenize(value) {
                if seen.insert(tok.clone()) {
                    out.push(tok);
                }
            }
        }
        if out.is_empty() {
            "unremarkable".to_string()
        } else {
            out.join(" ")
        }
    }

    /// Bundle motive: the tokens shared by the most item blocks (>= 2 blocks),
    /// ranked by (block count, total count, token), top 3. Falls back to the
    /// single most frequent token overall, then to a fixed word.
    fn annotate_bundle(items: &str) -> String {
        let blocks: Vec<&str> = items.split("\n---\n").collect();
        let mut block_count: BTreeMap<String, usize> = BTreeMap::new();
        let mut total_count: BTreeMap<String, usize> = BTreeMap::new();
        for block in &blocks {
            for tok in token_set(block) {
                *block_count.entry(tok).or_insert(0) += 1;
            }
            for tok in tokenize(block) {
                *total_count.entry(tok).or_insert(0) += 1;
            }
        }
        let mut shared: Vec<(&String, &usize)> =
            block_count.iter().filter(|(_, c)| **c >= 2).collect();
        if !shared.is_empty() {
            shared.sort_by(|a, b| {
                b.1.cmp(a.1)
                    .then_with(|| total_count[b.0].cmp(&total_count[a.0]))
                    .then_with(|| a.0.cmp(b.0))
            });
            return shared.iter().take(3).map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(" ");
        }
        total_count
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(t, _)| t.clone())
            .unwrap_or_else(|| "varied".to_string())
    }

    /// Search queries: each motive line truncated to its first 8 tokens,
    /// emitted as a numbered list (so the caller's prefix-stripper is always
    /// exercised), capped at the request's query limit. Deliberately ignores
    /// the explicit request binding so the caller-side fidelity guard has
    /// real work to do.
    fn synthesize_queries(req: &GenerationRequest) -> String {
        let motives = Self::binding(req, "motives");
        let mut out = Vec::new();
        for line in motives.lines() {
            let q = crate::text::truncate_tokens(line, 8);
            if q.is_empty() {
                continue;
            }
            out.push(format!("{}. {}", out.len() + 1, q));
            if out.len() == req.query_limit {
                break;
            }
        }
        out.join("\n")
    }

    /// Verdict: target token set T = tokens(queries) ∪ tokens(motives);
    /// score = mean over candidate lines of |tokens(line) ∩ T| / |T|
    /// (1.0 when T is empty, 0.0 when there are no candidates). Refined
    /// queries append the motive token with the highest inverse document
    /// frequency over the candidate lines among those not yet present in any
    /// query; when every motive token is covered the queries are repeated
    /// unchanged.
    fn reflect(req: &GenerationRequest) -> String {
        let query = Self::binding(req, "query");
        let motives = Self::binding(req, "motives");
        let candidates = Self::binding(req, "candidates");

        let query_tokens = token_set(query);
        let motive_tokens = token_set(motives);
        let target: BTreeSet<String> =
            query_tokens.union(&motive_tokens).cloned().collect();

        let cand_lines: Vec<&str> =
            candidates.lines().filter(|l| !l.trim().is_empty()).collect();
        let score = if target.is_empty() {
            1.0
        } else if cand_lines.is_empty() {
            0.0
        } else {
            let mut total = 0.0f64;
            for line in &cand_lines {
                let toks = token_set(line);
                let hit = target.intersection(&toks).count();
                total += hit as f64 / target.len() as f64;
            }
            total / cand_lines.len() as f64
        };

        let uncovered: Vec<&String> =
            motive_tokens.iter().filter(|t| !query_tokens.contains(*t)).collect();
        let queries: Vec<&str> = query.lines().filter(|l| !l.trim().is_empty()).collect();

        let (feedback, refined): (String, Vec<String>) = if uncovered.is_empty() {
            (
                "queries already cover the motive vocabulary".to_string(),
                queries.iter().map(|q| q.to_string()).collect(),
            )
        } else {
            // idf = ln((1 + n) / (1 + df)) over candidate lines; rarest wins,
            // ties broken by the lexicographically smallest token.
            let n = cand_lines.len() as f64;
            let mut best: Option<(&String, f64)> = None;
            for tok in &uncovered {
                let df = cand_lines.iter().filter(|l| token_set(l).contains(*tok)).count() as f64;
                let idf = ((1.0 + n) / (1.0 + df)).ln();
                let better = match best {
                    None => true,
                    Some((bt, bi)) => idf > bi || (idf == bi && tok.as_str() < bt.as_str()),
                };
                if better {
                    best = Some((tok, idf));
                }
            }
            let tok = best.expect("uncovered is non-empty").0.clone();
            (
                format!("candidates underrepresent '{tok}'; expanding queries"),
                queries.iter().map(|q| format!("{q} {tok}")).collect(),
            )
        };

        let mut out = format!("SCORE: {score:.6}\nFEEDBACK: {feedback}\nQUERIES:\n");
        for (i, q) in refined.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, q));
        }
        out
    }
}

impl TextBackend for MockBackend {
    fn generate_text(&self, req: &GenerationRequest) -> Result<String> {
        Ok(match req.template {
            TemplateName::Item => Self::describe_item(Self::binding(req, "metadata")),
            TemplateName::Annotate => Self::annotate_bundle(Self::binding(req, "items")),
            TemplateName::Query => Self::synthesize_queries(req),
            TemplateName::Reflect => Self::reflect(req),
        })
    }

    fn id(&self) -> String {
        format!("mock-text:seed={}", self.seed)
    }
}

impl EmbedBackend for MockBackend {
    /// Hashed bag of tokens: each token adds 1.0 at fnv1a64(seed, token) mod
    /// dim. Token-free text lights the fnv1a64(seed, "") slot so that every
    /// non-empty text embeds to something normalizable. Raw counts — the
    /// gateway normalizes.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0f32; self.dim];
                let toks = tokenize(t);
                if toks.is_empty() {
                    v[(fnv1a64(self.seed, "") % self.dim as u64) as usize] = 1.0;
                } else {
                    for tok in toks {
                        v[(fnv1a64(self.seed, &tok) % self.dim as u64) as usize] += 1.0;
                    }
                }
                v
            })
            .collect())
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("mock-embed:seed={}:dim={}", self.seed, self.dim)
    }
}
