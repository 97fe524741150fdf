//! End-to-end index construction, the indexing cost estimator, and index
//! persistence.
//!
//! A build runs chunking → vocabulary → chunk KNN graph → core-chunk
//! selection → skeleton extraction over the core chunks → sub-chunk split →
//! bipartite build → skeleton rewiring, and produces a [`GraphIndex`] that
//! round-trips losslessly through a directory of line-oriented files whose
//! hashes the manifest pins.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bipartite::{build_bipartite, BipartiteGraph, KeywordNode};
use crate::corpus::{
    build_vocabulary, chunk_corpus, normalize_words, segment_sentences, split_subchunks, Chunk,
    ChunkingConfig, SubChunk,
};
use crate::embedding::{keys, Embedding, EmbeddingProvider, EmbeddingStore};
use crate::error::{io_at, Error, Result};
use crate::extraction::{
    build_skeleton, Entity, Granularity, Relation, SkeletonGraph, TripletExtractor,
};
use crate::gateway::PriceTable;
use crate::graph::{build_knn_graph, pagerank, select_core_chunks, CoreMode};
use crate::retrieval::{retrieve, Context, RetrievalConfig};
use crate::tokenizer::{resolve, Tokenizer};

pub const FORMAT_VERSION: u32 = 1;

/// Recorded in the manifest so a reader can tell how links were rewired.
pub const REWIRE_RULE: &str = "entity links attach to the sub-chunks of the linked chunk whose \
text contains the entity name as a contiguous normalized word sequence; relation links match \
either endpoint name; if no sub-chunk of a chunk matches, all of its sub-chunks are linked";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// Chunk length in tokens.
    pub chunk_tokens: usize,
    /// Each chunk splits into 2^split_depth sub-chunks.
    pub split_depth: u32,
    /// KNN graph degree budget per chunk (half lexical, half semantic).
    pub knn_k: usize,
    pub alpha: f64,
    pub pagerank_tol: f64,
    pub pagerank_max_iter: usize,
    /// Fraction of chunks receiving full skeleton extraction.
    pub core_fraction: f64,
    pub core_mode: CoreMode,
    pub seed: u64,
    /// Provenance names, overwritten at build time from the live instances.
    pub extractor: String,
    pub embedder: String,
    pub tokenizer: String,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 1200,
            split_depth: 3,
            knn_k: 2,
            alpha: 0.15,
            pagerank_tol: 1e-8,
            pagerank_max_iter: 200,
            core_fraction: 0.8,
            core_mode: CoreMode::PageRank,
            seed: 0,
            extractor: "mock-v1".into(),
            embedder: "hash-v1/64".into(),
            tokenizer: "word-v1".into(),
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_tokens == 0 {
            return Err(Error::Config("chunk size must be at least 1 token".into()));
        }
        if self.split_depth < usize::BITS && self.chunk_tokens < (1usize << self.split_depth) {
            return Err(Error::Config(format!(
                "chunk size {} cannot be split into 2^{} sub-chunks",
                self.chunk_tokens, self.split_depth
            )));
        }
        if self.knn_k == 0 || self.knn_k % 2 != 0 {
            return Err(Error::Config(format!(
                "knn degree k must be positive and even, got {}",
                self.knn_k
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.pagerank_tol <= 0.0 || self.pagerank_max_iter == 0 {
            return Err(Error::Config("pagerank tolerance and iteration cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.core_fraction) {
            return Err(Error::Config(format!(
                "core fraction must be in [0, 1], got {}",
                self.core_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexStats {
    pub documents: usize,
    pub chunks: usize,
    pub core_chunks: usize,
    pub subchunks: usize,
    pub sentences: usize,
    pub keywords: usize,
    pub entities: usize,
    pub relations: usize,
    pub bipartite_edges: usize,
    pub embeddings: usize,
    pub pagerank_iterations: Option<usize>,
    pub pagerank_converged: Option<bool>,
    pub rewire_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: IndexConfig,
    pub embedding_dim: usize,
    pub granularity: Granularity,
    pub rewire_rule: String,
    pub stats: IndexStats,
    pub warnings: Vec<String>,
    pub extraction_issues: Vec<String>,
    /// Payload file name → sha256 hex, filled in by [`save_index`].
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIndex {
    pub subchunks: Vec<SubChunk>,
    pub skeleton: SkeletonGraph,
    pub bipartite: BipartiteGraph,
    pub store: EmbeddingStore,
    pub manifest: Manifest,
}

impl GraphIndex {
    pub fn retrieve(&self, query: &Embedding, cfg: &RetrievalConfig) -> Result<Context> {
        retrieve(&self.skeleton, &self.bipartite, &self.subchunks, &self.store, query, cfg)
    }

    pub fn retrieve_text(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        cfg: &RetrievalConfig,
    ) -> Result<Context> {
        let embedded = provider
            .embed_batch(&[query])?
            .pop()
            .ok_or_else(|| Error::Embedding("provider returned nothing for the query".into()))?;
        self.retrieve(&embedded, cfg)
    }
}

/// Builds a complete index over `docs`. The extractor only ever sees the
/// selected core chunks, so `core_fraction = 0` performs no extraction at
/// all. `parallelism` bounds concurrent extraction calls.
pub fn build_index(
    docs: &[(String, String)],
    cfg: &IndexConfig,
    stopwords: BTreeSet<String>,
    tokenizer: &dyn Tokenizer,
    provider: &dyn EmbeddingProvider,
    extractor: &dyn TripletExtractor,
    parallelism: usize,
) -> Result<GraphIndex> {
    cfg.validate()?;
    let chunking = ChunkingConfig::new(cfg.chunk_tokens, cfg.split_depth, stopwords)?;

    let (chunks, mut warnings) = chunk_corpus(docs, tokenizer, &chunking);
    if chunks.is_empty() {
        return Err(Error::Corpus("corpus produced no chunks".into()));
    }
    let (subchunks, split_warnings) = split_subchunks(&chunks, &chunking);
    warnings.extend(split_warnings);
    let sentences = segment_sentences(&subchunks, &chunking);
    let vocab = build_vocabulary(&sentences);

    let mut store = EmbeddingStore::new(provider.dim());
    let chunk_texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    for (chunk, embedding) in chunks.iter().zip(provider.embed_batch(&chunk_texts)?) {
        store.insert(keys::chunk(chunk.chunk_id), embedding)?;
    }
    let sub_texts: Vec<&str> = subchunks.iter().map(|s| s.text.as_str()).collect();
    for (sub, embedding) in subchunks.iter().zip(provider.embed_batch(&sub_texts)?) {
        store.insert(keys::sub(sub.sub_id), embedding)?;
    }

    let knn = build_knn_graph(&chunks, &vocab, &store, cfg.knn_k)?;
    let mut pagerank_iterations = None;
    let mut pagerank_converged = None;
    let core_ids = if cfg.core_fraction == 0.0 {
        Vec::new()
    } else {
        let scores = match cfg.core_mode {
            CoreMode::PageRank => {
                let pr = pagerank(&knn, cfg.alpha, cfg.pagerank_tol, cfg.pagerank_max_iter);
                pagerank_iterations = Some(pr.iterations);
                pagerank_converged = Some(pr.converged);
                pr.scores
            }
            CoreMode::Uniform => vec![0.0; chunks.len()],
        };
        let mut ids = select_core_chunks(&scores, cfg.core_fraction, cfg.core_mode, cfg.seed)?;
        // skeleton merging walks chunks in corpus order
        ids.sort_unstable();
        ids
    };
    let core_chunks: Vec<Chunk> = core_ids.iter().map(|&id| chunks[id].clone()).collect();

    let (mut skeleton, extraction_issues) =
        build_skeleton(&core_chunks, extractor, provider, &mut store, tokenizer, parallelism)?;
    let bipartite = build_bipartite(&subchunks, &sentences, &vocab, provider, &mut store)?;
    let rewire_fallbacks = rewire_skeleton(&mut skeleton, &subchunks);

    let stats = IndexStats {
        documents: docs.len(),
        chunks: chunks.len(),
        core_chunks: core_chunks.len(),
        subchunks: subchunks.len(),
        sentences: sentences.len(),
        keywords: bipartite.keyword_count(),
        entities: skeleton.entities.len(),
        relations: skeleton.relations.len(),
        bipartite_edges: bipartite.edge_count(),
        embeddings: store.len(),
        pagerank_iterations,
        pagerank_converged,
        rewire_fallbacks,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: IndexConfig {
            extractor: extractor.name().to_string(),
            embedder: provider.name().to_string(),
            tokenizer: tokenizer.id().to_string(),
            ..cfg.clone()
        },
        embedding_dim: store.dim(),
        granularity: skeleton.granularity,
        rewire_rule: REWIRE_RULE.to_string(),
        stats,
        warnings: warnings.iter().map(|w| w.to_string()).collect(),
        extraction_issues,
        files: BTreeMap::new(),
    };

    Ok(GraphIndex { subchunks, skeleton, bipartite, store, manifest })
}

/// True when `phrase` occurs as a contiguous subsequence of `words`.
fn contains_phrase(words: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() {
        return false;
    }
    words.windows(phrase.len()).any(|w| w == phrase)
}

/// Redirects chunk-level links to sub-chunk ids by name containment, with
/// an all-sub-chunks fallback per chunk when nothing matches (counted in
/// the return value). Idempotent on already-rewired skeletons.
pub fn rewire_skeleton(skeleton: &mut SkeletonGraph, subchunks: &[SubChunk]) -> usize {
    if skeleton.granularity == Granularity::SubChunk {
        return 0;
    }
    let mut subs_of_chunk: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for sub in subchunks {
        subs_of_chunk.entry(sub.chunk_id).or_default().push(sub.sub_id);
    }
    let sub_words: Vec<Vec<String>> =
        subchunks.iter().map(|s| normalize_words(&s.text)).collect();

    let mut fallbacks = 0usize;
    let mut rewire = |links: &mut Vec<usize>, phrases: &[Vec<String>]| {
        let mut new_links: BTreeSet<usize> = BTreeSet::new();
        for &chunk_id in links.iter() {
            let subs = subs_of_chunk.get(&chunk_id).map_or(&[][..], Vec::as_slice);
            let matching: Vec<usize> = subs
                .iter()
                .copied()
                .filter(|&sub| phrases.iter().any(|p| contains_phrase(&sub_words[sub], p)))
                .collect();
            if matching.is_empty() {
                fallbacks += 1;
                new_links.extend(subs.iter().copied());
            } else {
                new_links.extend(matching);
            }
        }
        *links = new_links.into_iter().collect();
    };

    let entity_phrases: Vec<Vec<String>> =
        skeleton.entities.iter().map(|e| normalize_words(&e.name)).collect();
    for (entity, links) in skeleton.entities.iter().zip(skeleton.entity_links.iter_mut()) {
        rewire(links, std::slice::from_ref(&entity_phrases[entity.entity_id]));
    }
    for (relation, links) in skeleton.relations.iter().zip(skeleton.relation_links.iter_mut()) {
        let endpoints =
            [entity_phrases[relation.source].clone(), entity_phrases[relation.target].clone()];
        rewire(links, &endpoints);
    }
    skeleton.granularity = Granularity::SubChunk;
    fallbacks
}

/// Inputs for the closed-form indexing cost estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CostInputs {
    pub num_chunks: u64,
    pub chunk_tokens: u64,
    pub entity_prompt_tokens: u64,
    pub relation_prompt_tokens: u64,
    /// Prior: extracted items (entities + relations) per chunk.
    pub items_per_chunk: f64,
    /// Prior: description tokens per extracted item.
    pub desc_tokens_per_item: f64,
    pub core_fraction: f64,
}

impl Default for CostInputs {
    fn default() -> Self {
        Self {
            num_chunks: 0,
            chunk_tokens: 1200,
            entity_prompt_tokens: 0,
            relation_prompt_tokens: 0,
            items_per_chunk: 15.0,
            desc_tokens_per_item: 30.0,
            core_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostVariant {
    /// Full knowledge-graph index over every chunk.
    Kg,
    /// Skeleton over the core fraction plus multi-granular text embeddings.
    Ket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub llm_tokens: f64,
    pub embed_tokens: f64,
    pub cost: f64,
}

/// Evaluates the closed-form token/cost model.
///
/// kg: every chunk is sent through both extraction prompts
/// (2ℓ + prompt overheads per chunk) and everything is embedded once
/// (chunk text plus the estimated description tokens).
/// ket: the kg term scales by the core fraction, plus embedding chunks,
/// sub-chunks, and sentences — three full passes over the corpus text.
pub fn estimate_cost(inputs: &CostInputs, prices: &PriceTable, variant: CostVariant) -> CostEstimate {
    let chunks = inputs.num_chunks as f64;
    let chunk_tokens = inputs.chunk_tokens as f64;
    let corpus_tokens = chunk_tokens * chunks;
    let description_tokens = inputs.items_per_chunk * inputs.desc_tokens_per_item * chunks;

    let kg_llm = (2.0 * inputs.chunk_tokens as f64
        + inputs.entity_prompt_tokens as f64
        + inputs.relation_prompt_tokens as f64)
        * chunks;
    let kg_embed = corpus_tokens + description_tokens;

    let (llm_tokens, embed_tokens) = match variant {
        CostVariant::Kg => (kg_llm, kg_embed),
        CostVariant::Ket => (
            inputs.core_fraction * kg_llm,
            inputs.core_fraction * kg_embed + 3.0 * corpus_tokens,
        ),
    };
    CostEstimate {
        llm_tokens,
        embed_tokens,
        cost: llm_tokens * prices.llm_input_per_token + embed_tokens * prices.embed_per_token,
    }
}

const MANIFEST_FILE: &str = "manifest.json";
const PAYLOAD_FILES: [&str; 7] = [
    "subchunks.jsonl",
    "skeleton_nodes.jsonl",
    "skeleton_edges.jsonl",
    "keywords.jsonl",
    "bipartite_edges.jsonl",
    "embeddings.bin",
    "embeddings.json",
];

#[derive(Serialize, Deserialize)]
struct EntityRow {
    #[serde(flatten)]
    entity: Entity,
    links: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RelationRow {
    #[serde(flatten)]
    relation: Relation,
    links: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct KeywordEdgeRow {
    keyword: String,
    subs: Vec<usize>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn jsonl<T: Serialize>(rows: impl Iterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(file: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Corrupted {
        file: file.to_string(),
        detail: format!("not utf-8: {e}"),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Corrupted {
                file: file.to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Writes the index under `dir` (created if needed) and returns the
/// manifest as persisted, payload hashes included. Output is
/// byte-deterministic for equal inputs.
pub fn save_index(index: &GraphIndex, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut files = BTreeMap::new();
    let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io_at(&path))?;
        files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    };

    write("subchunks.jsonl", &jsonl(index.subchunks.iter())?)?;
    write(
        "skeleton_nodes.jsonl",
        &jsonl(index.skeleton.entities.iter().zip(&index.skeleton.entity_links).map(
            |(entity, links)| EntityRow { entity: entity.clone(), links: links.clone() },
        ))?,
    )?;
    write(
        "skeleton_edges.jsonl",
        &jsonl(index.skeleton.relations.iter().zip(&index.skeleton.relation_links).map(
            |(relation, links)| RelationRow { relation: relation.clone(), links: links.clone() },
        ))?,
    )?;
    write("keywords.jsonl", &jsonl(index.bipartite.nodes.iter())?)?;
    write(
        "bipartite_edges.jsonl",
        &jsonl(index.bipartite.nodes.iter().zip(&index.bipartite.edges).map(|(node, subs)| {
            KeywordEdgeRow { keyword: node.keyword.clone(), subs: subs.clone() }
        }))?,
    )?;

    let bin_path = dir.join("embeddings.bin");
    let sidecar_path = dir.join("embeddings.json");
    index.store.save(&bin_path, &sidecar_path)?;
    for (name, path) in [("embeddings.bin", &bin_path), ("embeddings.json", &sidecar_path)] {
        let bytes = std::fs::read(path).map_err(io_at(path))?;
        files.insert(name.to_string(), sha256_hex(&bytes));
    }

    let manifest = Manifest { files, ..index.manifest.clone() };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, &manifest_bytes).map_err(io_at(&manifest_path))?;
    Ok(manifest)
}

/// Loads an index directory, verifying the format version, that the
/// recorded tokenizer is available, and every payload hash.
pub fn load_index(dir: &Path) -> Result<GraphIndex> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Persistence(format!(
            "{} is not an index directory (no {MANIFEST_FILE})",
            dir.display()
        )));
    }
    let manifest_bytes = std::fs::read(&manifest_path).map_err(io_at(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Corrupted {
            file: MANIFEST_FILE.to_string(),
            detail: e.to_string(),
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    resolve(&manifest.config.tokenizer)?;

    let mut payload: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for name in PAYLOAD_FILES {
        let path = dir.join(name);
        let expected = manifest.files.get(name).ok_or_else(|| Error::Corrupted {
            file: MANIFEST_FILE.to_string(),
            detail: format!("manifest lists no hash for {name}"),
        })?;
        if !path.exists() {
            return Err(Error::Corrupted { file: name.to_string(), detail: "file is missing".into() });
        }
        let bytes = std::fs::read(&path).map_err(io_at(&path))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::Corrupted {
                file: name.to_string(),
                detail: format!("hash mismatch: manifest says {expected}, file is {actual}"),
            });
        }
        payload.insert(name, bytes);
    }

    let subchunks: Vec<SubChunk> = parse_jsonl("subchunks.jsonl", &payload["subchunks.jsonl"])?;
    for (i, sub) in subchunks.iter().enumerate() {
        if sub.sub_id != i {
            return Err(Error::Corrupted {
                file: "subchunks.jsonl".into(),
                detail: format!("sub_id {} at row {i}", sub.sub_id),
            });
        }
    }

    let entity_rows: Vec<EntityRow> =
        parse_jsonl("skeleton_nodes.jsonl", &payload["skeleton_nodes.jsonl"])?;
    let relation_rows: Vec<RelationRow> =
        parse_jsonl("skeleton_edges.jsonl", &payload["skeleton_edges.jsonl"])?;
    let mut skeleton = SkeletonGraph::empty();
    skeleton.granularity = manifest.granularity;
    for (i, row) in entity_rows.into_iter().enumerate() {
        if row.entity.entity_id != i {
            return Err(Error::Corrupted {
                file: "skeleton_nodes.jsonl".into(),
                detail: format!("entity_id {} at row {i}", row.entity.entity_id),
            });
        }
        skeleton.entities.push(row.entity);
        skeleton.entity_links.push(row.links);
    }
    for (i, row) in relation_rows.into_iter().enumerate() {
        if row.relation.relation_id != i
            || row.relation.source >= skeleton.entities.len()
            || row.relation.target >= skeleton.entities.len()
        {
            return Err(Error::Corrupted {
                file: "skeleton_edges.jsonl".into(),
                detail: format!("bad relation row {i}"),
            });
        }
        skeleton.relations.push(row.relation);
        skeleton.relation_links.push(row.links);
    }
    for links in skeleton.entity_links.iter().chain(&skeleton.relation_links) {
        if let Some(&bad) = links.iter().find(|&&s| s >= subchunks.len()) {
            return Err(Error::Corrupted {
                file: "skeleton_nodes.jsonl".into(),
                detail: format!("link to nonexistent sub-chunk {bad}"),
            });
        }
    }

    let nodes: Vec<KeywordNode> = parse_jsonl("keywords.jsonl", &payload["keywords.jsonl"])?;
    let edge_rows: Vec<KeywordEdgeRow> =
        parse_jsonl("bipartite_edges.jsonl", &payload["bipartite_edges.jsonl"])?;
    if nodes.len() != edge_rows.len() {
        return Err(Error::Corrupted {
            file: "bipartite_edges.jsonl".into(),
            detail: format!("{} edge rows for {} keywords", edge_rows.len(), nodes.len()),
        });
    }
    let mut bipartite = BipartiteGraph::empty(subchunks.len());
    for (i, (node, edges)) in nodes.into_iter().zip(edge_rows).enumerate() {
        if node.keyword != edges.keyword {
            return Err(Error::Corrupted {
                file: "bipartite_edges.jsonl".into(),
                detail: format!("row {i} keyword '{}' does not match '{}'", edges.keyword, node.keyword),
            });
        }
        if let Some(&bad) = edges.subs.iter().find(|&&s| s >= subchunks.len()) {
            return Err(Error::Corrupted {
                file: "bipartite_edges.jsonl".into(),
                detail: format!("edge to nonexistent sub-chunk {bad}"),
            });
        }
        bipartite.index.insert(node.keyword.clone(), i);
        bipartite.nodes.push(node);
        bipartite.edges.push(edges.subs);
    }

    let store = EmbeddingStore::load(&dir.join("embeddings.bin"), &dir.join("embeddings.json"))?;
    if store.dim() != manifest.embedding_dim {
        return Err(Error::Corrupted {
            file: "embeddings.json".into(),
            detail: format!(
                "dimension {} does not match the manifest's {}",
                store.dim(),
                manifest.embedding_dim
            ),
        });
    }

    Ok(GraphIndex { subchunks, skeleton, bipartite, store, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_stopwords;
    use crate::embedding::HashEmbedder;
    use crate::extraction::{MeteringExtractor, MockExtractor};
    use crate::tokenizer::WordTokenizer;

    fn docs() -> Vec<(String, String)> {
        vec![
            (
                "d0".to_string(),
                "Alice met Bob in Paris. The two walked along the river and talked about maps. \
                 Bob showed Alice an old compass. They agreed to meet again after the storm."
                    .to_string(),
            ),
            (
                "d1".to_string(),
                "Carol visited Rome with David. David photographed ruins while Carol sketched \
                 arches. A guide told Carol about tunnels. The group left Rome before sunset."
                    .to_string(),
            ),
            (
                "d2".to_string(),
                "Paris hosted a fair. Erin sold maps near the fountain. Frank bought a compass \
                 from Erin. The fair closed when rain arrived and streets emptied quickly."
                    .to_string(),
            ),
        ]
    }

    fn small_cfg() -> IndexConfig {
        IndexConfig {
            chunk_tokens: 16,
            split_depth: 2,
            knn_k: 2,
            core_fraction: 0.5,
            seed: 7,
            ..IndexConfig::default()
        }
    }

    fn build(cfg: &IndexConfig) -> GraphIndex {
        let provider = HashEmbedder::new(8);
        build_index(
            &docs(),
            cfg,
            default_stopwords(),
            &WordTokenizer,
            &provider,
            &MockExtractor::new(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn build_produces_a_consistent_index() {
        let index = build(&small_cfg());
        let stats = &index.manifest.stats;
        assert_eq!(stats.documents, 3);
        assert!(stats.chunks >= 6);
        assert_eq!(stats.core_chunks, stats.chunks.div_ceil(2));
        assert_eq!(stats.subchunks, index.subchunks.len());
        assert!(stats.entities > 0);
        assert!(stats.keywords > 10);
        assert_eq!(index.skeleton.granularity, Granularity::SubChunk);
        assert_eq!(stats.pagerank_converged, Some(true));
        assert_eq!(index.manifest.config.extractor, "mock-v1");
        assert_eq!(index.manifest.config.embedder, "hash-v1/8");
        assert_eq!(index.manifest.config.tokenizer, "word-v1");

        // every link points at a live sub-chunk, every sub is embedded
        for links in index.skeleton.entity_links.iter().chain(&index.skeleton.relation_links) {
            assert!(!links.is_empty());
            for &sub in links {
                assert!(sub < index.subchunks.len());
            }
        }
        for sub in &index.subchunks {
            assert!(index.store.get(&keys::sub(sub.sub_id)).is_some());
        }
        // sub-chunk texts reassemble their chunks' text
        let mut rebuilt: BTreeMap<usize, String> = BTreeMap::new();
        for sub in &index.subchunks {
            rebuilt.entry(sub.chunk_id).or_default().push_str(&sub.text);
        }
        assert_eq!(rebuilt.len(), stats.chunks);
    }

    #[test]
    fn zero_core_fraction_skips_extraction_entirely() {
        let metered = MeteringExtractor::new(Box::new(MockExtractor::new()), 10, 10);
        let provider = HashEmbedder::new(8);
        let cfg = IndexConfig { core_fraction: 0.0, ..small_cfg() };
        let index = build_index(
            &docs(),
            &cfg,
            default_stopwords(),
            &WordTokenizer,
            &provider,
            &metered,
            1,
        )
        .unwrap();
        assert_eq!(metered.calls(), 0, "no chunk ever reaches the extractor");
        assert!(index.skeleton.is_empty());
        assert!(index.bipartite.keyword_count() > 0, "keyword side still built");
        assert_eq!(index.manifest.stats.pagerank_iterations, None);
    }

    #[test]
    fn full_fraction_with_no_split_keeps_chunk_shape() {
        let cfg = IndexConfig { core_fraction: 1.0, split_depth: 0, ..small_cfg() };
        let index = build(&cfg);
        let stats = &index.manifest.stats;
        assert_eq!(stats.core_chunks, stats.chunks);
        assert_eq!(stats.subchunks, stats.chunks);
        for sub in &index.subchunks {
            assert_eq!(sub.sub_id, sub.chunk_id, "depth 0 sub-chunks mirror chunks");
        }
    }

    #[test]
    fn rewiring_links_by_containment_with_fallback() {
        let tokenizer = WordTokenizer;
        let mk_sub = |sub_id: usize, chunk_id: usize, text: &str| SubChunk {
            sub_id,
            chunk_id,
            doc_id: "d".into(),
            split_index: sub_id,
            text: text.to_string(),
            token_count: tokenizer.count(text),
        };
        let subs = vec![
            mk_sub(0, 0, "Alice waved kindly here "),
            mk_sub(1, 0, "while Bob watched quietly"),
        ];
        let entity = |id: usize, name: &str| Entity {
            entity_id: id,
            name: name.into(),
            type_label: "T".into(),
            description: String::new(),
            description_tokens: 0,
        };
        let mut skeleton = SkeletonGraph::empty();
        skeleton.entities = vec![entity(0, "ALICE"), entity(1, "BOB"), entity(2, "CAROL")];
        skeleton.entity_links = vec![vec![0], vec![0], vec![0]];
        skeleton.relations = vec![Relation {
            relation_id: 0,
            source: 0,
            target: 1,
            description: String::new(),
            description_tokens: 0,
            self_loop: false,
        }];
        skeleton.relation_links = vec![vec![0]];

        let fallbacks = rewire_skeleton(&mut skeleton, &subs);
        assert_eq!(skeleton.granularity, Granularity::SubChunk);
        assert_eq!(skeleton.entity_links[0], vec![0], "ALICE appears only in sub 0");
        assert_eq!(skeleton.entity_links[1], vec![1], "BOB appears only in sub 1");
        assert_eq!(skeleton.entity_links[2], vec![0, 1], "CAROL matches nothing: fallback");
        assert_eq!(skeleton.relation_links[0], vec![0, 1], "either endpoint matches");
        assert_eq!(fallbacks, 1);

        // second rewire is a no-op
        let again = rewire_skeleton(&mut skeleton, &subs);
        assert_eq!(again, 0);
        assert_eq!(skeleton.entity_links[0], vec![0]);
    }

    #[test]
    fn phrase_containment_is_contiguous() {
        let words = |s: &str| normalize_words(s);
        assert!(contains_phrase(&words("the acme corp office"), &words("Acme Corp")));
        assert!(!contains_phrase(&words("acme shipping corp"), &words("Acme Corp")));
        assert!(!contains_phrase(&words("acme"), &words("Acme Corp")));
        assert!(!contains_phrase(&words("anything"), &[]));
    }

    #[test]
    fn cost_model_matches_hand_computed_values() {
        let prices = PriceTable { llm_input_per_token: 1.0, llm_output_per_token: 0.0, embed_per_token: 0.0 };
        let inputs = CostInputs {
            num_chunks: 100,
            chunk_tokens: 1200,
            entity_prompt_tokens: 600,
            relation_prompt_tokens: 600,
            items_per_chunk: 0.0,
            desc_tokens_per_item: 0.0,
            core_fraction: 0.8,
        };
        let kg = estimate_cost(&inputs, &prices, CostVariant::Kg);
        assert_eq!(kg.llm_tokens, 360_000.0, "(2*1200 + 600 + 600) * 100");
        assert_eq!(kg.embed_tokens, 120_000.0);
        assert_eq!(kg.cost, 360_000.0);
    }

    #[test]
    fn cost_model_identities_hold_exactly() {
        let prices = PriceTable { llm_input_per_token: 0.25, llm_output_per_token: 0.0, embed_per_token: 0.125 };
        let base = CostInputs {
            num_chunks: 64,
            chunk_tokens: 1024,
            entity_prompt_tokens: 512,
            relation_prompt_tokens: 256,
            items_per_chunk: 16.0,
            desc_tokens_per_item: 32.0,
            core_fraction: 0.0,
        };
        let corpus_tokens = 64.0 * 1024.0;

        let ket0 = estimate_cost(&base, &prices, CostVariant::Ket);
        assert_eq!(ket0.llm_tokens, 0.0);
        assert_eq!(ket0.embed_tokens, 3.0 * corpus_tokens);
        assert_eq!(ket0.cost, 3.0 * corpus_tokens * prices.embed_per_token);

        let full = CostInputs { core_fraction: 1.0, ..base };
        let kg = estimate_cost(&full, &prices, CostVariant::Kg);
        let ket1 = estimate_cost(&full, &prices, CostVariant::Ket);
        assert_eq!(ket1.llm_tokens, kg.llm_tokens);
        assert_eq!(ket1.embed_tokens - 3.0 * corpus_tokens, kg.embed_tokens);
        assert_eq!(ket1.cost - 3.0 * corpus_tokens * prices.embed_per_token, kg.cost);
    }

    #[test]
    fn estimator_prices_both_token_kinds() {
        let prices = PriceTable { llm_input_per_token: 2.0, llm_output_per_token: 0.0, embed_per_token: 0.5 };
        let inputs = CostInputs {
            num_chunks: 10,
            chunk_tokens: 100,
            entity_prompt_tokens: 50,
            relation_prompt_tokens: 50,
            items_per_chunk: 2.0,
            desc_tokens_per_item: 10.0,
            core_fraction: 0.5,
        };
        let kg = estimate_cost(&inputs, &prices, CostVariant::Kg);
        // llm: (200 + 100) * 10 = 3000; embed: 1000 + 200 = 1200
        assert_eq!(kg.cost, 3000.0 * 2.0 + 1200.0 * 0.5);
        let ket = estimate_cost(&inputs, &prices, CostVariant::Ket);
        assert_eq!(ket.llm_tokens, 1500.0);
        assert_eq!(ket.embed_tokens, 600.0 + 3000.0);
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let index = build(&small_cfg());
        let dir = tempfile::tempdir().unwrap();
        let saved = save_index(&index, dir.path()).unwrap();
        assert_eq!(saved.files.len(), 7);

        let loaded = load_index(dir.path()).unwrap();
        assert_eq!(loaded.subchunks, index.subchunks);
        assert_eq!(loaded.skeleton, index.skeleton);
        assert_eq!(loaded.bipartite, index.bipartite);
        assert_eq!(loaded.store, index.store);
        assert_eq!(loaded.manifest, saved);

        // a loaded index saves to byte-identical files
        let dir2 = tempfile::tempdir().unwrap();
        save_index(&loaded, dir2.path()).unwrap();
        for name in PAYLOAD_FILES.iter().chain([&MANIFEST_FILE]) {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn two_builds_persist_byte_identically() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_index(&build(&small_cfg()), dir_a.path()).unwrap();
        save_index(&build(&small_cfg()), dir_b.path()).unwrap();
        for name in PAYLOAD_FILES.iter().chain([&MANIFEST_FILE]) {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical builds");
        }
    }

    #[test]
    fn tampered_and_missing_files_are_rejected() {
        let index = build(&small_cfg());
        let dir = tempfile::tempdir().unwrap();
        save_index(&index, dir.path()).unwrap();

        // flip a byte
        let path = dir.path().join("skeleton_nodes.jsonl");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0x20;
        std::fs::write(&path, &bytes).unwrap();
        match load_index(dir.path()) {
            Err(Error::Corrupted { file, .. }) => assert_eq!(file, "skeleton_nodes.jsonl"),
            other => panic!("expected corruption error, got {other:?}"),
        }

        // truncation of the embedding payload
        let dir = tempfile::tempdir().unwrap();
        save_index(&index, dir.path()).unwrap();
        let bin = dir.path().join("embeddings.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_index(dir.path()), Err(Error::Corrupted { .. })));

        // removal
        let dir = tempfile::tempdir().unwrap();
        save_index(&index, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("keywords.jsonl")).unwrap();
        assert!(matches!(load_index(dir.path()), Err(Error::Corrupted { .. })));
    }

    #[test]
    fn version_and_tokenizer_guards_fire() {
        let index = build(&small_cfg());
        let dir = tempfile::tempdir().unwrap();
        save_index(&index, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let raw = std::fs::read_to_string(&manifest_path).unwrap();

        let mut doc: serde_json::Value = serde_json::from_str(&raw).unwrap();
        doc["format_version"] = serde_json::json!(99);
        std::fs::write(&manifest_path, serde_json::to_string(&doc).unwrap()).unwrap();
        match load_index(dir.path()) {
            Err(Error::UnsupportedVersion { found: 99, supported }) => {
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }

        let mut doc: serde_json::Value = serde_json::from_str(&raw).unwrap();
        doc["config"]["tokenizer"] = serde_json::json!("nonexistent-v9");
        std::fs::write(&manifest_path, serde_json::to_string(&doc).unwrap()).unwrap();
        match load_index(dir.path()) {
            Err(Error::UnknownTokenizer { id }) => assert_eq!(id, "nonexistent-v9"),
            other => panic!("expected tokenizer error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(IndexConfig { knn_k: 3, ..IndexConfig::default() }.validate().is_err());
        assert!(IndexConfig { core_fraction: 1.2, ..IndexConfig::default() }.validate().is_err());
        assert!(
            IndexConfig { chunk_tokens: 149, split_depth: 8, ..IndexConfig::default() }
                .validate()
                .is_err(),
            "149 tokens cannot split into 256 pieces"
        );
        assert!(IndexConfig::default().validate().is_ok());
        assert!(IndexConfig { chunk_tokens: 256, split_depth: 8, ..IndexConfig::default() }
            .validate()
            .is_ok());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let provider = HashEmbedder::new(8);
        let err = build_index(
            &[],
            &small_cfg(),
            default_stopwords(),
            &WordTokenizer,
            &provider,
            &MockExtractor::new(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Corpus(_)));
    }

    #[test]
    fn index_retrieval_end_to_end() {
        let index = build(&small_cfg());
        let provider = HashEmbedder::new(8);
        let cfg = RetrievalConfig { budget: 60, skeleton_ratio: 0.4, k_seed: 3 };
        let context = index.retrieve_text(&provider, "who bought a compass", &cfg).unwrap();
        assert!(context.total_tokens <= 60);
        assert!(!context.segments.is_empty());
    }
}
