//! Exact-search vector index over unit-norm embeddings.
//!
//! Two keyed namespaces: item vectors and per-user motive vectors (the global
//! motive namespace is the union of the per-user ones by construction).
//! Similarity is cosine, computed as a dot product because every stored vector
//! and every query is L2-normalized. Search is exhaustive and exact: catalog
//! sizes here never justify ANN, and exactness is what makes the oracle tests
//! meaningful.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Key of one stored vector. Derived `Ord` (items before motives, then field
/// order) is the pipeline-wide tie-break for equal scores.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryKey {
    Item(String),
    Motive { user: String, bundle: u32 },
}

impl fmt::Display for EntryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryKey::Item(id) => write!(f, "item:{id}"),
            EntryKey::Motive { user, bundle } => write!(f, "motive:{user}#{bundle}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Namespace<'a> {
    Items,
    MotivesGlobal,
    MotivesOfUser(&'a str),
}

/// Dot product accumulated in f64 for stability, returned as f32. Both the
/// index and the test oracles must use this exact function so that score
/// comparisons are bitwise-meaningful.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc as f32
}

/// Scales `v` to unit L2 norm (norm computed in f64). Returns false and leaves
/// `v` untouched when the norm is too small to normalize.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

fn check_unit_norm(v: &[f32]) -> Result<()> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("vector is not unit-norm (norm = {norm})")));
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"MRIX";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    items: BTreeMap<String, Vec<f32>>,
    motives: BTreeMap<(String, u32), Vec<f32>>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex { dim, items: BTreeMap::new(), motives: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn motive_count(&self) -> usize {
        self.motives.len()
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    pub fn insert_item(&mut self, item_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        self.check_dim(&vector)?;
        check_unit_norm(&vector)?;
        let id = item_id.into();
        if self.items.contains_key(&id) {
            return Err(Error::Invalid(format!("duplicate item key {id:?}")));
        }
        self.items.insert(id, vector);
        Ok(())
    }

    pub fn insert_motive(
        &mut self,
        user: impl Into<String>,
        bundle: u32,
        vector: Vec<f32>,
    ) -> Result<()> {
        self.check_dim(&vector)?;
        check_unit_norm(&vector)?;
        let key = (user.into(), bundle);
        if self.motives.contains_key(&key) {
            return Err(Error::Invalid(format!("duplicate motive key {}#{}", key.0, key.1)));
        }
        self.motives.insert(key, vector);
        Ok(())
    }

    /// Drops every motive vector; used when the annotate stage rebuilds.
    pub fn clear_motives(&mut self) {
        self.motives.clear();
    }

    pub fn get(&self, key: &EntryKey) -> Option<&[f32]> {
        match key {
            EntryKey::Item(id) => self.items.get(id).map(Vec::as_slice),
            EntryKey::Motive { user, bundle } => {
                self.motives.get(&(user.clone(), *bundle)).map(Vec::as_slice)
            }
        }
    }

    pub fn iter_namespace<'a>(
        &'a self,
        ns: Namespace<'a>,
    ) -> Box<dyn Iterator<Item = (EntryKey, &'a [f32])> + 'a> {
        match ns {
            Namespace::Items => Box::new(
                self.items.iter().map(|(id, v)| (EntryKey::Item(id.clone()), v.as_slice())),
            ),
            Namespace::MotivesGlobal => Box::new(self.motives.iter().map(|((u, b), v)| {
                (EntryKey::Motive { user: u.clone(), bundle: *b }, v.as_slice())
            })),
            Namespace::MotivesOfUser(user) => Box::new(
                self.motives
                    .range((user.to_string(), 0)..=(user.to_string(), u32::MAX))
                    .map(|((u, b), v)| (EntryKey::Motive { user: u.clone(), bundle: *b }, v.as_slice())),
            ),
        }
    }

    /// Exact k highest cosine scores in the namespace, descending, ties broken
    /// by ascending key; `exclude` keys never appear. Returns fewer than k when
    /// the namespace is smaller.
    pub fn top_k(
        &self,
        ns: Namespace<'_>,
        query: &[f32],
        k: usize,
        exclude: &BTreeSet<EntryKey>,
    ) -> Result<Vec<(EntryKey, f32)>> {
        self.check_dim(query)?;
        if k == 0 {
            return Ok(Vec::new());
        }
        // Min-heap by "keep-worthiness": the heap max is the entry that loses
        // first (lowest score, then largest key — ascending-key tie-break
        // means the larger key is the weaker entry).
        struct HeapEntry {
            score: f32,
            key: EntryKey,
        }
        impl PartialEq for HeapEntry {
            fn eq(&self, other: &Self) -> bool {
                self.cmp(other) == std::cmp::Ordering::Equal
            }
        }
        impl Eq for HeapEntry {}
        impl PartialOrd for HeapEntry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for HeapEntry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                other
                    .score
                    .total_cmp(&self.score)
                    .then_with(|| self.key.cmp(&other.key))
            }
        }

        let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
        for (key, vector) in self.iter_namespace(ns) {
            if exclude.contains(&key) {
                continue;
            }
            let entry = HeapEntry { score: dot(query, vector), key };
            if heap.len() < k {
                heap.push(entry);
            } else if let Some(worst) = heap.peek() {
                if entry < *worst {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        let mut out: Vec<(EntryKey, f32)> =
            heap.into_iter().map(|e| (e.key, e.score)).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    /// Greedy maximal-marginal-relevance selection: repeatedly picks the
    /// candidate maximizing `lambda * sim(v, query) - (1 - lambda) * max_sim`
    /// where `max_sim` is the candidate's highest similarity to anything in
    /// `seeds` or already selected (0.0 when that set is empty, so the first
    /// pick without seeds is pure relevance). Seeds are penalized against but
    /// never selected. Ties break by ascending key. Returns the selection
    /// score alongside each key; shorter than k when the pool runs out.
    pub fn mmr_select(
        &self,
        ns: Namespace<'_>,
        query: &[f32],
        seeds: &BTreeSet<EntryKey>,
        k: usize,
        lambda: f32,
    ) -> Result<Vec<(EntryKey, f32)>> {
        self.check_dim(query)?;
        if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Invalid(format!("mmr lambda must be in [0, 1], got {lambda}")));
        }
        struct Candidate<'v> {
            key: EntryKey,
            vector: &'v [f32],
            relevance: f32,
            /// Max similarity to selected ∪ seeds; None while that set is
            /// empty (the penalty term is then 0). Kept as a true maximum —
            /// negative similarities are NOT clamped — so it matches a literal
            /// recomputation over the set.
            max_sim: Option<f32>,
        }
        let mut pool: Vec<Candidate<'_>> = Vec::new();
        for (key, vector) in self.iter_namespace(ns) {
            if seeds.contains(&key) {
                continue;
            }
            let mut max_sim: Option<f32> = None;
            for seed in seeds {
                if let Some(sv) = self.get(seed) {
                    let s = dot(vector, sv);
                    max_sim = Some(max_sim.map_or(s, |m| m.max(s)));
                }
            }
            pool.push(Candidate { key, vector, relevance: dot(query, vector), max_sim });
        }

        let mut selected = Vec::with_capacity(k.min(pool.len()));
        for _ in 0..k {
            let mut best: Option<(usize, f32)> = None;
            for (i, c) in pool.iter().enumerate() {
                let score = lambda * c.relevance - (1.0 - lambda) * c.max_sim.unwrap_or(0.0);
                let better = match &best {
                    None => true,
                    Some((bi, bs)) => {
                        score > *bs || (score == *bs && c.key < pool[*bi].key)
                    }
                };
                if better {
                    best = Some((i, score));
                }
            }
            let Some((idx, score)) = best else { break };
            let picked = pool.swap_remove(idx);
            for c in pool.iter_mut() {
                let s = dot(c.vector, picked.vector);
                c.max_sim = Some(c.max_sim.map_or(s, |m| m.max(s)));
            }
            selected.push((picked.key, score));
        }
        Ok(selected)
    }

    /// Binary format: magic "MRIX", version u16, dim u32, item count u64,
    /// motive count u64, then length-prefixed keys with little-endian f32
    /// vectors, both sections in ascending key order. Fully deterministic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.items.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.motives.len() as u64).to_le_bytes()).map_err(io_err)?;
        for (id, v) in &self.items {
            w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(id.as_bytes()).map_err(io_err)?;
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
        }
        for ((user, bundle), v) in &self.motives {
            w.write_all(&(user.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(user.as_bytes()).map_err(io_err)?;
            w.write_all(&bundle.to_le_bytes()).map_err(io_err)?;
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let fmt_err = |m: &str| Error::format(path, m);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(fmt_err("bad magic; not an index file"));
        }
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(io_err)?;
        let version = u16::from_le_bytes(u16buf);
        if version != FORMAT_VERSION {
            return Err(fmt_err(&format!("unsupported index version {version}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(io_err)?;
        let item_count = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf).map_err(io_err)?;
        let motive_count = u64::from_le_bytes(u64buf) as usize;

        let read_string = |r: &mut BufReader<std::fs::File>| -> Result<String> {
            let mut lenbuf = [0u8; 4];
            r.read_exact(&mut lenbuf).map_err(|e| Error::io(path, e))?;
            let len = u32::from_le_bytes(lenbuf) as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            String::from_utf8(buf).map_err(|_| Error::format(path, "non-utf8 key"))
        };
        let read_vector = |r: &mut BufReader<std::fs::File>| -> Result<Vec<f32>> {
            let mut v = Vec::with_capacity(dim);
            let mut buf = [0u8; 4];
            for _ in 0..dim {
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                v.push(f32::from_le_bytes(buf));
            }
            check_unit_norm(&v)?;
            Ok(v)
        };

        let mut index = VectorIndex::new(dim);
        for _ in 0..item_count {
            let id = read_string(&mut r)?;
            let v = read_vector(&mut r)?;
            if index.items.insert(id, v).is_some() {
                return Err(fmt_err("duplicate item key"));
            }
        }
        for _ in 0..motive_count {
            let user = read_string(&mut r)?;
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let bundle = u32::from_le_bytes(u32buf);
            let v = read_vector(&mut r)?;
            if index.motives.insert((user, bundle), v).is_some() {
                return Err(fmt_err("duplicate motive key"));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io_err)? != 0 {
            return Err(fmt_err("trailing bytes after last record"));
        }
        Ok(index)
    }
}
