//! Entity/relation extraction and skeleton-graph assembly.
//!
//! Extractors implement [`TripletExtractor`]: the offline [`MockExtractor`]
//! pulls capitalized spans out of sentences, while [`LlmExtractor`] drives a
//! chat model through the shipped prompt templates. [`build_skeleton`]
//! merges per-chunk extractions into a deduplicated graph with chunk links
//! and embedded descriptions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{default_stopwords, sentence_ranges, Chunk};
use crate::embedding::{keys, EmbeddingProvider, EmbeddingStore};
use crate::error::{io_at, Error, Result};
use crate::gateway::{Gateway, Stage};
use crate::tokenizer::Tokenizer;

pub const ENTITY_PROMPT_TEMPLATE: &str = include_str!("../data/prompts/entity_extraction.txt");
pub const RELATION_PROMPT_TEMPLATE: &str = include_str!("../data/prompts/relation_extraction.txt");

const EXTRACTION_SYSTEM_PROMPT: &str = "You are a careful information extraction engine. \
Follow the requested record format exactly.";

/// Placeholder each prompt template must contain exactly once.
pub const INPUT_SLOT: &str = "{input_text}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntity {
    pub name: String,
    pub type_label: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRelation {
    pub source: String,
    pub target: String,
    pub description: String,
}

/// One chunk's worth of extractor output, before dedup/merging.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExtraction {
    pub entities: Vec<RawEntity>,
    pub relations: Vec<RawRelation>,
}

impl RawExtraction {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }
}

pub trait TripletExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Same chunk text in, same extraction out.
    fn deterministic(&self) -> bool {
        false
    }
    fn extract(&self, chunk: &Chunk) -> Result<RawExtraction>;
}

/// Offline extractor: entities are maximal runs of capitalized words within
/// a sentence (stopword heads dropped, names uppercased, type "MOCK");
/// relations pair distinct co-sentence entities in occurrence order, earlier
/// mention as source. Descriptions are the containing sentence.
pub struct MockExtractor {
    stopwords: BTreeSet<String>,
}

impl Default for MockExtractor {
    fn default() -> Self {
        Self { stopwords: default_stopwords() }
    }
}

impl MockExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_stopwords(stopwords: BTreeSet<String>) -> Self {
        Self { stopwords }
    }

    fn capitalized_runs(&self, sentence: &str) -> Vec<String> {
        let mut runs: Vec<Vec<&str>> = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for raw in sentence.split_whitespace() {
            let core = raw.trim_matches(|c: char| !c.is_alphanumeric());
            let capitalized = core.chars().next().is_some_and(char::is_uppercase);
            if capitalized {
                current.push(core);
            }
            // punctuation after a word ends the phrase: "Paris, London" is
            // two names, not one
            let run_breaks = !capitalized || raw.ends_with(|c: char| !c.is_alphanumeric());
            if run_breaks && !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            runs.push(current);
        }
        runs.into_iter()
            .filter_map(|mut words| {
                while let Some(head) = words.first() {
                    if self.stopwords.contains(&head.to_lowercase()) {
                        words.remove(0);
                    } else {
                        break;
                    }
                }
                if words.is_empty() {
                    None
                } else {
                    Some(words.join(" ").to_uppercase())
                }
            })
            .collect()
    }
}

impl TripletExtractor for MockExtractor {
    fn name(&self) -> &str {
        "mock-v1"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn extract(&self, chunk: &Chunk) -> Result<RawExtraction> {
        let mut out = RawExtraction::default();
        for (start, end) in sentence_ranges(&chunk.text) {
            let sentence = chunk.text[start..end].trim();
            if sentence.is_empty() {
                continue;
            }
            let mut seen_here: Vec<String> = Vec::new();
            for name in self.capitalized_runs(sentence) {
                if !seen_here.contains(&name) {
                    seen_here.push(name.clone());
                    out.entities.push(RawEntity {
                        name,
                        type_label: "MOCK".into(),
                        description: sentence.to_string(),
                    });
                }
            }
            for i in 0..seen_here.len() {
                for j in (i + 1)..seen_here.len() {
                    out.relations.push(RawRelation {
                        source: seen_here[i].clone(),
                        target: seen_here[j].clone(),
                        description: sentence.to_string(),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Parses delimited records of the forms
/// `("entity"|NAME|TYPE|DESCRIPTION)` and
/// `("relationship"|SOURCE|TARGET|DESCRIPTION)`, one per line.
/// Lines that match neither shape are ignored.
pub fn parse_records(text: &str) -> RawExtraction {
    let mut out = RawExtraction::default();
    for line in text.lines() {
        let line = line.trim().trim_end_matches(',');
        let Some(inner) = line.strip_prefix('(').and_then(|s| s.strip_suffix(')')) else {
            continue;
        };
        let fields: Vec<&str> = inner.split('|').collect();
        if fields.len() < 4 {
            continue;
        }
        let tag = fields[0].trim().trim_matches('"').to_lowercase();
        let a = fields[1].trim();
        let b = fields[2].trim();
        // descriptions may themselves contain the delimiter
        let description = fields[3..].join("|").trim().to_string();
        if a.is_empty() || b.is_empty() {
            continue;
        }
        match tag.as_str() {
            "entity" => out.entities.push(RawEntity {
                name: a.to_string(),
                type_label: b.to_string(),
                description,
            }),
            "relationship" => out.relations.push(RawRelation {
                source: a.to_string(),
                target: b.to_string(),
                description,
            }),
            _ => {}
        }
    }
    out
}

/// Two-pass chat extractor: an entity prompt, then a relation prompt, both
/// filled from templates with an `{input_text}` slot.
pub struct LlmExtractor {
    gateway: Arc<Gateway>,
    entity_prompt: String,
    relation_prompt: String,
    name: String,
}

impl LlmExtractor {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self::with_templates(
            gateway,
            ENTITY_PROMPT_TEMPLATE.to_string(),
            RELATION_PROMPT_TEMPLATE.to_string(),
        )
        .expect("shipped templates carry the input slot")
    }

    pub fn with_templates(
        gateway: Arc<Gateway>,
        entity_prompt: String,
        relation_prompt: String,
    ) -> Result<Self> {
        for (label, template) in [("entity", &entity_prompt), ("relation", &relation_prompt)] {
            if template.matches(INPUT_SLOT).count() != 1 {
                return Err(Error::Config(format!(
                    "{label} prompt template must contain {INPUT_SLOT} exactly once"
                )));
            }
        }
        let name = format!("llm/{}", gateway.config().chat_model);
        Ok(Self { gateway, entity_prompt, relation_prompt, name })
    }

    /// Runs one pass; on zero parsed records retries once with an extra
    /// instruction line (so a cached identical response is not replayed).
    fn pass(&self, template: &str, chunk_text: &str) -> Result<(RawExtraction, bool)> {
        let user = template.replace(INPUT_SLOT, chunk_text);
        let (text, _) = self.gateway.chat_complete(Stage::Extraction, EXTRACTION_SYSTEM_PROMPT, &user)?;
        let parsed = parse_records(&text);
        if !parsed.is_empty() {
            return Ok((parsed, true));
        }
        let nudged = format!("{user}\nList every record explicitly in the requested format.");
        let (text, _) =
            self.gateway.chat_complete(Stage::Extraction, EXTRACTION_SYSTEM_PROMPT, &nudged)?;
        let parsed = parse_records(&text);
        let ok = !parsed.is_empty();
        Ok((parsed, ok))
    }
}

impl TripletExtractor for LlmExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, chunk: &Chunk) -> Result<RawExtraction> {
        let (entities, entities_parsed) = self.pass(&self.entity_prompt, &chunk.text)?;
        if !entities_parsed {
            return Err(Error::Extraction(format!(
                "chunk {}: no parseable entity records after retry",
                chunk.chunk_id
            )));
        }
        // an empty relation pass is plausible output, not a failure
        let (relations, _) = self.pass(&self.relation_prompt, &chunk.text)?;
        Ok(RawExtraction { entities: entities.entities, relations: relations.relations })
    }
}

/// Token counts of the shipped prompt templates with the input slot removed:
/// the per-chunk prompt overhead of each pass.
pub fn shipped_prompt_overheads(tokenizer: &dyn Tokenizer) -> (usize, usize) {
    let entity = tokenizer.count(&ENTITY_PROMPT_TEMPLATE.replace(INPUT_SLOT, ""));
    let relation = tokenizer.count(&RELATION_PROMPT_TEMPLATE.replace(INPUT_SLOT, ""));
    (entity, relation)
}

/// Transparent wrapper that accounts the LLM input tokens an extraction
/// pass consumes: two copies of the chunk text plus both prompt overheads.
pub struct MeteringExtractor {
    inner: Box<dyn TripletExtractor>,
    entity_prompt_tokens: u64,
    relation_prompt_tokens: u64,
    llm_tokens: AtomicU64,
    calls: AtomicU64,
}

impl MeteringExtractor {
    pub fn new(
        inner: Box<dyn TripletExtractor>,
        entity_prompt_tokens: usize,
        relation_prompt_tokens: usize,
    ) -> Self {
        Self {
            inner,
            entity_prompt_tokens: entity_prompt_tokens as u64,
            relation_prompt_tokens: relation_prompt_tokens as u64,
            llm_tokens: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn llm_tokens(&self) -> u64 {
        self.llm_tokens.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TripletExtractor for MeteringExtractor {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }

    fn extract(&self, chunk: &Chunk) -> Result<RawExtraction> {
        let spent =
            2 * chunk.token_count() as u64 + self.entity_prompt_tokens + self.relation_prompt_tokens;
        self.llm_tokens.fetch_add(spent, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.extract(chunk)
    }
}

#[derive(Serialize, Deserialize)]
struct ExtractionCacheRow {
    key: String,
    output: RawExtraction,
}

/// Append-only JSONL cache of raw extractions, keyed by extractor name and
/// chunk content hash.
struct ExtractionCache {
    entries: HashMap<String, RawExtraction>,
    file: std::fs::File,
}

impl ExtractionCache {
    fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = std::fs::read_to_string(path).map_err(io_at(path))?;
            for line in raw.lines().filter(|l| !l.trim().is_empty()) {
                let row: ExtractionCacheRow =
                    serde_json::from_str(line).map_err(|e| Error::Corrupted {
                        file: path.display().to_string(),
                        detail: format!("bad extraction cache row: {e}"),
                    })?;
                entries.insert(row.key, row.output);
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_at(path))?;
        Ok(Self { entries, file })
    }

    fn put(&mut self, key: String, output: RawExtraction) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Ok(());
        }
        let mut line = serde_json::to_string(&ExtractionCacheRow { key: key.clone(), output: output.clone() })?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.entries.insert(key, output);
        Ok(())
    }
}

/// Caching wrapper around any extractor. Re-running an index build replays
/// prior extractions without touching the inner extractor.
pub struct CachedExtractor {
    inner: Box<dyn TripletExtractor>,
    cache: Mutex<ExtractionCache>,
}

impl CachedExtractor {
    pub fn new(inner: Box<dyn TripletExtractor>, cache_path: &Path) -> Result<Self> {
        Ok(Self { inner, cache: Mutex::new(ExtractionCache::open(cache_path)?) })
    }

    fn key(&self, chunk: &Chunk) -> String {
        let digest = Sha256::digest(chunk.text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("{}\n{hex}", self.inner.name())
    }
}

impl TripletExtractor for CachedExtractor {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }

    fn extract(&self, chunk: &Chunk) -> Result<RawExtraction> {
        let key = self.key(chunk);
        if let Some(hit) = self.cache.lock().expect("extraction cache lock").entries.get(&key) {
            return Ok(hit.clone());
        }
        let output = self.inner.extract(chunk)?;
        self.cache
            .lock()
            .expect("extraction cache lock")
            .put(key, output.clone())?;
        Ok(output)
    }
}

/// Whether skeleton links point at whole chunks or at sub-chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Chunk,
    SubChunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: usize,
    pub name: String,
    pub type_label: String,
    pub description: String,
    pub description_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub relation_id: usize,
    pub source: usize,
    pub target: usize,
    pub description: String,
    pub description_tokens: usize,
    pub self_loop: bool,
}

/// Knowledge-graph skeleton: deduplicated entities and relations plus links
/// back to the text units they were extracted from. `links` slots align
/// with ids; link targets are chunk ids until rewiring, sub-chunk ids after.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub granularity: Granularity,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub entity_links: Vec<Vec<usize>>,
    pub relation_links: Vec<Vec<usize>>,
}

impl SkeletonGraph {
    pub fn empty() -> Self {
        Self {
            granularity: Granularity::Chunk,
            entities: Vec::new(),
            relations: Vec::new(),
            entity_links: Vec::new(),
            relation_links: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Uppercases and collapses whitespace: the dedup canonical form.
pub fn canonical_name(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_uppercase()
}

struct EntityDraft {
    name: String,
    type_label: String,
    descriptions: Vec<String>,
    links: BTreeSet<usize>,
}

struct RelationDraft {
    source: usize,
    target: usize,
    descriptions: Vec<String>,
    links: BTreeSet<usize>,
}

/// Runs the extractor over every chunk (in parallel up to `parallelism`),
/// then merges the outputs in chunk order: entities dedup by (name, type)
/// with descriptions concatenated, relations dedup by endpoint pair, and
/// every item records the chunks that emitted it. Descriptions are embedded
/// into `store` under `ent:{id}` / `rel:{id}`. Failed chunks become issue
/// strings and contribute nothing.
pub fn build_skeleton(
    chunks: &[Chunk],
    extractor: &dyn TripletExtractor,
    provider: &dyn EmbeddingProvider,
    store: &mut EmbeddingStore,
    tokenizer: &dyn Tokenizer,
    parallelism: usize,
) -> Result<(SkeletonGraph, Vec<String>)> {
    let mut issues: Vec<String> = Vec::new();
    if chunks.is_empty() {
        return Ok((SkeletonGraph::empty(), issues));
    }

    let extractions = extract_all(chunks, extractor, parallelism);

    let mut entities: Vec<EntityDraft> = Vec::new();
    let mut by_key: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
    let mut relations: Vec<RelationDraft> = Vec::new();
    let mut by_pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();

    for (chunk, outcome) in chunks.iter().zip(extractions) {
        let raw = match outcome {
            Ok(raw) => raw,
            Err(e) => {
                issues.push(format!("chunk {}: {e}", chunk.chunk_id));
                continue;
            }
        };
        for raw_entity in raw.entities {
            let name = canonical_name(&raw_entity.name);
            let type_label = canonical_name(&raw_entity.type_label);
            if name.is_empty() {
                continue;
            }
            let id = *by_key.entry((name.clone(), type_label.clone())).or_insert_with(|| {
                entities.push(EntityDraft {
                    name: name.clone(),
                    type_label,
                    descriptions: Vec::new(),
                    links: BTreeSet::new(),
                });
                entities.len() - 1
            });
            by_name.entry(name).or_insert(id);
            let draft = &mut entities[id];
            let description = raw_entity.description.trim().to_string();
            if !description.is_empty() && !draft.descriptions.contains(&description) {
                draft.descriptions.push(description);
            }
            draft.links.insert(chunk.chunk_id);
        }
        for raw_relation in raw.relations {
            let source = by_name.get(&canonical_name(&raw_relation.source)).copied();
            let target = by_name.get(&canonical_name(&raw_relation.target)).copied();
            let (Some(source), Some(target)) = (source, target) else {
                issues.push(format!(
                    "chunk {}: relation endpoint not among extracted entities: {} -> {}",
                    chunk.chunk_id, raw_relation.source, raw_relation.target
                ));
                continue;
            };
            let id = *by_pair.entry((source, target)).or_insert_with(|| {
                relations.push(RelationDraft {
                    source,
                    target,
                    descriptions: Vec::new(),
                    links: BTreeSet::new(),
                });
                relations.len() - 1
            });
            let draft = &mut relations[id];
            let description = raw_relation.description.trim().to_string();
            if !description.is_empty() && !draft.descriptions.contains(&description) {
                draft.descriptions.push(description);
            }
            draft.links.insert(chunk.chunk_id);
        }
    }

    let mut graph = SkeletonGraph::empty();
    for (id, draft) in entities.into_iter().enumerate() {
        let description = draft.descriptions.join("\n");
        graph.entities.push(Entity {
            entity_id: id,
            name: draft.name,
            type_label: draft.type_label,
            description_tokens: tokenizer.count(&description),
            description,
        });
        graph.entity_links.push(draft.links.into_iter().collect());
    }
    for (id, draft) in relations.into_iter().enumerate() {
        let description = draft.descriptions.join("\n");
        graph.relations.push(Relation {
            relation_id: id,
            source: draft.source,
            target: draft.target,
            self_loop: draft.source == draft.target,
            description_tokens: tokenizer.count(&description),
            description,
        });
        graph.relation_links.push(draft.links.into_iter().collect());
    }

    embed_descriptions(&graph, provider, store)?;
    Ok((graph, issues))
}

fn extract_all(
    chunks: &[Chunk],
    extractor: &dyn TripletExtractor,
    parallelism: usize,
) -> Vec<Result<RawExtraction>> {
    let workers = parallelism.max(1).min(chunks.len());
    if workers <= 1 {
        return chunks.iter().map(|c| extractor.extract(c)).collect();
    }
    let slots: Mutex<Vec<Option<Result<RawExtraction>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let outcome = extractor.extract(&chunks[i]);
                slots.lock().expect("slot lock")[i] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|slot| slot.expect("worker filled every slot"))
        .collect()
}

fn embed_descriptions(
    graph: &SkeletonGraph,
    provider: &dyn EmbeddingProvider,
    store: &mut EmbeddingStore,
) -> Result<()> {
    let entity_texts: Vec<&str> = graph.entities.iter().map(|e| e.description.as_str()).collect();
    for (entity, embedding) in graph.entities.iter().zip(provider.embed_batch(&entity_texts)?) {
        store.insert(keys::entity(entity.entity_id), embedding)?;
    }
    let relation_texts: Vec<&str> = graph.relations.iter().map(|r| r.description.as_str()).collect();
    for (relation, embedding) in graph.relations.iter().zip(provider.embed_batch(&relation_texts)?) {
        store.insert(keys::relation(relation.relation_id), embedding)?;
    }
    Ok(())
}
