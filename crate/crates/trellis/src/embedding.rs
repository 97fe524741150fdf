//! Embeddings: vector math, providers, and a keyed store with binary
//! persistence.
//!
//! Providers L2-normalize their outputs, so cosine between stored text
//! vectors is a plain dot product. Derived vectors (keyword nodes store the
//! mean of their sentence vectors) are kept as computed, without
//! re-normalization; cosine is scale-invariant so ranking is unaffected.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Cosine similarity. Degenerate input (zero vector, dimension mismatch)
/// yields 0 with a warning rather than NaN.
pub fn cosine(a: &Embedding, b: &Embedding) -> f32 {
    if a.dim() != b.dim() {
        log::warn!("cosine over mismatched dimensions {} vs {}", a.dim(), b.dim());
        return 0.0;
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine over zero-norm vector");
        return 0.0;
    }
    let dot: f32 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Euclidean distance. Kept separate from cosine: seed selection ranks by
/// distance, everything else ranks by cosine.
pub fn euclidean(a: &Embedding, b: &Embedding) -> f32 {
    debug_assert_eq!(a.dim(), b.dim());
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Arithmetic mean of vectors. Errors on an empty slice or mixed dimensions.
pub fn mean(vectors: &[&Embedding]) -> Result<Embedding> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Embedding("mean of zero vectors".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0f32; dim];
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::Embedding(format!(
                "mean over mixed dimensions {} vs {dim}",
                v.dim()
            )));
        }
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
    }
    let n = vectors.len() as f32;
    for a in &mut acc {
        *a /= n;
    }
    Ok(Embedding(acc))
}

/// Scales to unit L2 norm. A zero vector becomes the first basis vector so
/// downstream math never sees a zero norm.
pub fn l2_normalize(mut v: Embedding) -> Embedding {
    let n = v.norm();
    if n == 0.0 {
        if !v.0.is_empty() {
            v.0[0] = 1.0;
        }
        return v;
    }
    for x in &mut v.0 {
        *x /= n;
    }
    v
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier recorded in index manifests.
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One unit-norm vector per input text, in order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>>;
    fn deterministic(&self) -> bool {
        false
    }
}

/// Offline deterministic provider: sha256(text), first 8 bytes little-endian
/// as a ChaCha8 seed, `dim` draws uniform in [-1, 1), L2-normalized. The
/// same text maps to the same vector on every platform. Carries no semantic
/// signal; it exists so indexing and retrieval run without a network.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    name: String,
}

pub const DEFAULT_HASH_DIM: usize = 64;

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, name: format!("hash-v1/{dim}") }
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        l2_normalize(Embedding(values))
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Key scheme for the embedding store. One namespace per item kind.
pub mod keys {
    pub fn chunk(id: usize) -> String {
        format!("chunk:{id}")
    }
    pub fn sub(id: usize) -> String {
        format!("sub:{id}")
    }
    pub fn sentence(id: usize) -> String {
        format!("sent:{id}")
    }
    pub fn entity(id: usize) -> String {
        format!("ent:{id}")
    }
    pub fn relation(id: usize) -> String {
        format!("rel:{id}")
    }
    pub fn keyword(kw: &str) -> String {
        format!("kw:{kw}")
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    count: usize,
    keys: Vec<String>,
}

/// Fixed-dimension keyed vector store. Iteration order is key order, so
/// persistence is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    map: BTreeMap<String, Embedding>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, map: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, key: String, embedding: Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::Embedding(format!(
                "vector for '{key}' has dimension {}, store holds {}",
                embedding.dim(),
                self.dim
            )));
        }
        if !embedding.is_finite() {
            return Err(Error::Embedding(format!("vector for '{key}' has non-finite values")));
        }
        self.map.insert(key, embedding);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Embedding> {
        self.map.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Writes vectors as row-major little-endian f32 plus a JSON sidecar
    /// `{dim, count, keys}`; row order is the sidecar key order.
    pub fn save(&self, bin_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.map.len() * self.dim * 4);
        for emb in self.map.values() {
            for x in &emb.0 {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(bin_path, bytes).map_err(io_at(bin_path))?;
        let sidecar = Sidecar {
            dim: self.dim,
            count: self.map.len(),
            keys: self.map.keys().cloned().collect(),
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        std::fs::write(sidecar_path, json).map_err(io_at(sidecar_path))?;
        Ok(())
    }

    pub fn load(bin_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let corrupted = |detail: String| Error::Corrupted {
            file: bin_path.display().to_string(),
            detail,
        };
        let sidecar_raw = std::fs::read_to_string(sidecar_path).map_err(io_at(sidecar_path))?;
        let sidecar: Sidecar = serde_json::from_str(&sidecar_raw).map_err(|e| Error::Corrupted {
            file: sidecar_path.display().to_string(),
            detail: e.to_string(),
        })?;
        if sidecar.keys.len() != sidecar.count {
            return Err(Error::Corrupted {
                file: sidecar_path.display().to_string(),
                detail: format!("{} keys but count {}", sidecar.keys.len(), sidecar.count),
            });
        }
        let bytes = std::fs::read(bin_path).map_err(io_at(bin_path))?;
        let expected = sidecar.count * sidecar.dim * 4;
        if bytes.len() != expected {
            return Err(corrupted(format!("{} bytes, expected {expected}", bytes.len())));
        }
        let mut store = Self::new(sidecar.dim);
        for (row, key) in sidecar.keys.into_iter().enumerate() {
            let offset = row * sidecar.dim * 4;
            let values = (0..sidecar.dim)
                .map(|i| {
                    let at = offset + i * 4;
                    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("bounds checked"))
                })
                .collect();
            let emb = Embedding(values);
            if !emb.is_finite() {
                return Err(corrupted(format!("non-finite value in row for '{key}'")));
            }
            store.map.insert(key, emb);
        }
        Ok(store)
    }
}
