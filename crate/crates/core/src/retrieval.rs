//! Exact maximum-inner-product retrieval over unit-normalized embeddings.
//!
//! Index file layout (little endian):
//!
//! ```text
//! magic  "EXPIDX01"
//! u32    embedder id length, then the id bytes (UTF-8)
//! u32    dimension D
//! u32    entry count N
//! N*D    f32 vector components, entry-major
//! N x    (u64 pool index, u32 key length, key bytes)
//! ```

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ExperiencePool;

pub const DEFAULT_DIMENSION: usize = 256;
const MAGIC: &[u8; 8] = b"EXPIDX01";
const NORM_TOLERANCE: f64 = 1e-6;
const BUCKETS_PER_TOKEN: u64 = 4;

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Raw, not necessarily normalized, embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Seeded feature hashing of lowercase alphanumeric tokens. Each token adds
/// weight to several buckets, which keeps distinct words from colliding outright.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    id: String,
    dimension: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            id: format!("hash-d{dimension}-s{seed}"),
            dimension,
            seed,
        }
    }

    fn bucket(&self, token: &str, salt: u64) -> usize {
        // FNV-1a over seed, salt and token bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self
            .seed
            .to_le_bytes()
            .into_iter()
            .chain(salt.to_le_bytes())
            .chain(token.bytes())
        {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.dimension as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION, 0)
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = vec![0f32; self.dimension];
        for token in tokenize(text) {
            for salt in 1..=BUCKETS_PER_TOKEN {
                v[self.bucket(&token, salt)] += 1.0;
            }
        }
        Ok(v)
    }
}

pub fn embed_normalized(embedder: &dyn Embedder, text: &str) -> Result<Vec<f32>> {
    if text.trim().is_empty() {
        return Err(Error::usage("cannot embed empty text"));
    }
    let raw = embedder.embed(text)?;
    if raw.len() != embedder.dimension() {
        return Err(Error::InvalidData(format!(
            "embedder {} returned {} dimensions, expected {}",
            embedder.id(),
            raw.len(),
            embedder.dimension()
        )));
    }
    let norm = raw
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroEmbedding(text.to_string()));
    }
    Ok(raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Inner product accumulated in f64 in component order.
pub fn inner_product(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    /// Position of the trajectory in the experience pool.
    pub pool_index: usize,
    pub key: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub pool_index: usize,
    pub entry: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embedder_id: String,
    dimension: usize,
    entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    pub fn new(embedder_id: impl Into<String>, dimension: usize) -> Self {
        Self {
            embedder_id: embedder_id.into(),
            dimension,
            entries: Vec::new(),
        }
    }

    /// Adds an already normalized vector.
    pub fn push(
        &mut self,
        pool_index: usize,
        key: impl Into<String>,
        vector: Vec<f32>,
    ) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::InvalidData(format!(
                "vector has {} dimensions, index expects {}",
                vector.len(),
                self.dimension
            )));
        }
        let norm = inner_product(&vector, &vector).sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidData(format!("vector norm {norm} is not 1")));
        }
        self.entries.push(IndexEntry {
            pool_index,
            key: key.into(),
            vector,
        });
        Ok(())
    }

    pub fn insert_text(
        &mut self,
        embedder: &dyn Embedder,
        pool_index: usize,
        key: &str,
    ) -> Result<()> {
        let vector = embed_normalized(embedder, key)?;
        self.push(pool_index, key, vector)
    }

    /// One entry per success, keyed by its task description.
    pub fn build(
        pool: &ExperiencePool,
        embedder: &dyn Embedder,
        include_manual: bool,
    ) -> Result<Self> {
        let mut index = Self::new(embedder.id(), embedder.dimension());
        for (i, trajectory) in pool.successes(include_manual) {
            index.insert_text(embedder, i, &trajectory.task_description)?;
        }
        Ok(index)
    }

    /// One entry per thought of every success; queries return distinct trajectories.
    pub fn build_over_thoughts(
        pool: &ExperiencePool,
        embedder: &dyn Embedder,
        include_manual: bool,
    ) -> Result<Self> {
        let mut index = Self::new(embedder.id(), embedder.dimension());
        for (i, trajectory) in pool.successes(include_manual) {
            for thought in trajectory.thoughts().filter(|t| !t.trim().is_empty()) {
                index.insert_text(embedder, i, thought)?;
            }
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Exact top-`k` by inner product with `query`. Ties keep insertion order;
    /// each pool trajectory appears at most once.
    pub fn search_vector(&self, query: &[f32], k: usize) -> Vec<Hit> {
        let mut scored: Vec<Hit> = self
            .entries
            .iter()
            .enumerate()
            .map(|(entry, e)| Hit {
                pool_index: e.pool_index,
                entry,
                score: inner_product(&e.vector, query),
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry.cmp(&b.entry)));
        let mut seen = std::collections::HashSet::new();
        scored
            .into_iter()
            .filter(|h| seen.insert(h.pool_index))
            .take(k)
            .collect()
    }

    pub fn query_topk(
        &self,
        embedder: &dyn Embedder,
        query_text: &str,
        k: usize,
    ) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::usage("k must be at least 1"));
        }
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        self.check_embedder(embedder)?;
        let query = embed_normalized(embedder, query_text)?;
        Ok(self.search_vector(&query, k))
    }

    /// Reason-similarity retrieval over an index from [`Self::build_over_thoughts`].
    pub fn query_by_reason(
        &self,
        embedder: &dyn Embedder,
        latest_thought: &str,
        k: usize,
    ) -> Result<Vec<Hit>> {
        self.query_topk(embedder, latest_thought, k)
    }

    /// `k` distinct trajectories drawn uniformly with a fixed seed.
    pub fn sample_random(&self, k: usize, seed: u64) -> Vec<Hit> {
        let mut distinct: Vec<(usize, usize)> = Vec::new();
        for (entry, e) in self.entries.iter().enumerate() {
            if !distinct.iter().any(|&(p, _)| p == e.pool_index) {
                distinct.push((e.pool_index, entry));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amount = k.min(distinct.len());
        sample(&mut rng, distinct.len(), amount)
            .into_iter()
            .map(|i| Hit {
                pool_index: distinct[i].0,
                entry: distinct[i].1,
                score: 0.0,
            })
            .collect()
    }

    fn check_embedder(&self, embedder: &dyn Embedder) -> Result<()> {
        if embedder.id() != self.embedder_id || embedder.dimension() != self.dimension {
            return Err(Error::Config(format!(
                "index was built with {} (D={}), queried with {} (D={})",
                self.embedder_id,
                self.dimension,
                embedder.id(),
                embedder.dimension()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.entries.len() * (self.dimension * 4 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.embedder_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.embedder_id.as_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for e in &self.entries {
            out.extend_from_slice(&(e.pool_index as u64).to_le_bytes());
            out.extend_from_slice(&(e.key.len() as u32).to_le_bytes());
            out.extend_from_slice(e.key.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::InvalidData("not an embedding index file".into()));
        }
        let id_len = r.u32()? as usize;
        let embedder_id = r.string(id_len)?;
        let dimension = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = r.take(dimension * 4)?;
            vectors.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect::<Vec<_>>(),
            );
        }
        let mut index = Self::new(embedder_id, dimension);
        for vector in vectors {
            let pool_index = r.u64()? as usize;
            let key_len = r.u32()? as usize;
            let key = r.string(key_len)?;
            index.push(pool_index, key, vector)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes in index file",
                bytes.len() - r.pos
            )));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading index {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::InvalidData(format!("index file truncated at byte {}", self.pos))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::InvalidData(format!("bad UTF-8 in index: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{Outcome, Step, Task, Trajectory};

    fn pool(successes: &[&str], failures: &[&str]) -> ExperiencePool {
        let mut pool = ExperiencePool::new();
        for (i, d) in successes.iter().enumerate() {
            let task = Task::new(format!("s{i}"), "toyqa", *d);
            let mut t = Trajectory::new(&task, 0, "");
            t.append_step(
                Step::new("Finish[x]", "done", 1.0, true)
                    .with_thoughts(vec![format!("thinking about {d}")]),
            )
            .unwrap();
            t.finalize(Outcome::Success).unwrap();
            pool.insert(t).unwrap();
        }
        for (i, d) in failures.iter().enumerate() {
            let task = Task::new(format!("f{i}"), "toyqa", *d);
            let mut t = Trajectory::new(&task, 0, "");
            t.finalize(Outcome::Failure).unwrap();
            pool.insert(t).unwrap();
        }
        pool
    }

    #[test]
    fn normalized_and_deterministic() {
        let e = HashEmbedder::default();
        let v = embed_normalized(&e, "buy a red mug").unwrap();
        assert!((inner_product(&v, &v).sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(v, embed_normalized(&e, "buy a red mug").unwrap());
        assert_ne!(
            embed_normalized(&e, "abc").unwrap(),
            embed_normalized(&e, "abd").unwrap()
        );
    }

    #[test]
    fn zero_and_empty_inputs() {
        let e = HashEmbedder::default();
        assert!(
            matches!(embed_normalized(&e, "!!! ???"), Err(Error::ZeroEmbedding(t)) if t == "!!! ???")
        );
        assert!(matches!(embed_normalized(&e, "  "), Err(Error::Usage(_))));
    }

    #[test]
    fn fixture_vocabulary_does_not_collide() {
        let mut vocab = std::collections::BTreeSet::new();
        for text in [
            include_str!("../data/envs/docstore.json"),
            include_str!("../data/envs/qa_tasks.json"),
            include_str!("../data/envs/shop_catalog.json"),
            include_str!("../data/envs/shop_tasks.json"),
            include_str!("../data/envs/household.json"),
            include_str!("../data/envs/fever_tasks.json"),
        ] {
            vocab.extend(tokenize(text));
        }
        let e = HashEmbedder::default();
        let mut seen = std::collections::HashMap::new();
        for word in &vocab {
            let v = embed_normalized(&e, word).unwrap();
            let key: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            if let Some(other) = seen.insert(key, word.clone()) {
                panic!("{word} and {other} embed identically");
            }
        }
        assert!(vocab.len() > 200);
    }

    #[test]
    fn builds_over_successes_only() {
        let e = HashEmbedder::default();
        let p = pool(&["a b", "c d", "e f"], &["g", "h", "i", "j", "k"]);
        let index = EmbeddingIndex::build(&p, &e, true).unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(
            index.to_bytes(),
            EmbeddingIndex::build(&p, &e, true).unwrap().to_bytes()
        );

        let empty = EmbeddingIndex::build(&pool(&[], &["x"]), &e, true).unwrap();
        assert!(empty.is_empty());
        assert!(empty.query_topk(&e, "anything", 3).unwrap().is_empty());
    }

    #[test]
    fn single_entry_and_self_similarity() {
        let e = HashEmbedder::default();
        let one = EmbeddingIndex::build(&pool(&["only task"], &[]), &e, true).unwrap();
        assert_eq!(one.query_topk(&e, "unrelated words", 4).unwrap().len(), 1);

        let texts = [
            "find a red mug",
            "buy running shoes",
            "what is the capital of arvenia",
            "lamp for desk",
        ];
        let p = pool(&texts, &[]);
        let index = EmbeddingIndex::build(&p, &e, true).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let hits = index.query_topk(&e, t, 2).unwrap();
            assert_eq!(hits[0].pool_index, i);
            assert!((hits[0].score - 1.0).abs() < 1e-6);
        }
        assert!(index.query_topk(&e, "x", 0).is_err());
    }

    #[test]
    fn reason_index() {
        let e = HashEmbedder::default();
        let p = pool(&["a", "b", "c"], &[]);
        let index = EmbeddingIndex::build_over_thoughts(&p, &e, true).unwrap();
        let hits = index.query_by_reason(&e, "thinking about b", 3).unwrap();
        assert_eq!(hits[0].pool_index, 1);
        let empty = EmbeddingIndex::build_over_thoughts(&ExperiencePool::new(), &e, true).unwrap();
        assert!(empty.query_by_reason(&e, "thinking", 2).unwrap().is_empty());
    }

    #[test]
    fn duplicates_rank_adjacent_in_insertion_order() {
        let e = HashEmbedder::default();
        let mut index = EmbeddingIndex::new(e.id(), e.dimension());
        index.insert_text(&e, 0, "red mug").unwrap();
        index.insert_text(&e, 1, "blue shoes").unwrap();
        index.insert_text(&e, 2, "red mug").unwrap();
        index.insert_text(&e, 3, "red lamp").unwrap();
        let hits = index.query_topk(&e, "red mug please", 4).unwrap();
        let order: Vec<usize> = hits.iter().map(|h| h.pool_index).collect();
        assert_eq!(&order[..2], &[0, 2]);
    }

    #[test]
    fn random_sampling_is_seeded() {
        let e = HashEmbedder::default();
        let p = pool(&["a", "b", "c", "d", "e"], &[]);
        let index = EmbeddingIndex::build(&p, &e, true).unwrap();
        let a = index.sample_random(3, 7);
        assert_eq!(a, index.sample_random(3, 7));
        assert_eq!(a.len(), 3);
        assert_eq!(index.sample_random(10, 7).len(), 5);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let e = HashEmbedder::default();
        let index = EmbeddingIndex::build(&pool(&["a b", "ünïcødé key"], &[]), &e, true).unwrap();
        let bytes = index.to_bytes();
        assert_eq!(EmbeddingIndex::from_bytes(&bytes).unwrap(), index);
        assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(EmbeddingIndex::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn embedder_mismatch_is_rejected() {
        let p = pool(&["a"], &[]);
        let index = EmbeddingIndex::build(&p, &HashEmbedder::new(256, 0), true).unwrap();
        assert!(index
            .query_topk(&HashEmbedder::new(256, 1), "a", 1)
            .is_err());
    }

    struct Scaled(HashEmbedder, f32);

    impl Embedder for Scaled {
        fn id(&self) -> &str {
            self.0.id()
        }
        fn dimension(&self) -> usize {
            self.0.dimension()
        }
        fn embed(&self, text: &str) -> Result<Vec<f32>> {
            Ok(self
                .0
                .embed(text)?
                .into_iter()
                .map(|x| x * self.1)
                .collect())
        }
    }

    proptest! {
        #[test]
        fn positive_scaling_leaves_rankings_unchanged(
            words in proptest::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,3}", 1..20),
            query in "[a-e]{1,3}( [a-e]{1,3}){0,2}",
            scale in prop::sample::select(vec![0.5f32, 2.0, 4.0, 0.25]),
        ) {
            let base = HashEmbedder::default();
            let scaled = Scaled(base.clone(), scale);
            let mut a = EmbeddingIndex::new(base.id(), base.dimension());
            let mut b = EmbeddingIndex::new(base.id(), base.dimension());
            for (i, w) in words.iter().enumerate() {
                a.insert_text(&base, i, w).unwrap();
                b.insert_text(&scaled, i, w).unwrap();
            }
            let ra: Vec<usize> = a.query_topk(&base, &query, words.len()).unwrap().iter().map(|h| h.pool_index).collect();
            let rb: Vec<usize> = b.query_topk(&scaled, &query, words.len()).unwrap().iter().map(|h| h.pool_index).collect();
            prop_assert_eq!(ra, rb);
        }
    }
}
