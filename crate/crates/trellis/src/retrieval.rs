//! Dual-channel, token-budgeted context retrieval.
//!
//! The skeleton channel seeds on nearby entities, then adds entity
//! descriptions, relation descriptions, and linked sub-chunks under a
//! half/half budget split. The keyword channel grows a seed keyword set by
//! query similarity until the seeds' neighborhoods hold enough text, then
//! picks sub-chunks from that neighborhood. Both channels are greedy in
//! rank order: an item that would overflow the budget stops its stage (no
//! gap-filling with later, smaller items), which makes selections a prefix
//! of the ranking and hence monotone in the budget.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bipartite::BipartiteGraph;
use crate::corpus::SubChunk;
use crate::embedding::{cosine, euclidean, keys, Embedding, EmbeddingProvider, EmbeddingStore};
use crate::error::{Error, Result};
use crate::extraction::{Granularity, SkeletonGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Entity,
    Relation,
    Chunk,
    KeywordChunk,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Entity => "entity",
            Channel::Relation => "relation",
            Channel::Chunk => "chunk",
            Channel::KeywordChunk => "keyword-chunk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub channel: Channel,
    pub source_id: String,
    pub tokens: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub segments: Vec<Segment>,
    pub total_tokens: usize,
}

impl Context {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    fn push(&mut self, segment: Segment) {
        self.total_tokens += segment.tokens;
        self.segments.push(segment);
    }

    pub fn extend(&mut self, other: Context) {
        for segment in other.segments {
            self.push(segment);
        }
    }

    /// All segment texts, newline-joined, for coverage checks and prompts.
    pub fn concat(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// λ: total context token budget.
    pub budget: usize,
    /// θ: fraction of the budget given to the skeleton channel.
    pub skeleton_ratio: f64,
    pub k_seed: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { budget: 12_000, skeleton_ratio: 0.4, k_seed: 10 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("retrieval budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.skeleton_ratio) || !self.skeleton_ratio.is_finite() {
            return Err(Error::Config(format!(
                "skeleton ratio must lie in [0, 1], got {}",
                self.skeleton_ratio
            )));
        }
        if self.k_seed == 0 {
            return Err(Error::Config("k_seed must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of leading items that fit: walks `sizes` in order, accumulating
/// while the running sum stays within `budget`, and stops at the first item
/// that would overflow.
pub fn greedy_prefix_len(sizes: &[usize], budget: f64) -> usize {
    let mut used = 0usize;
    for (taken, &size) in sizes.iter().enumerate() {
        if (used + size) as f64 > budget {
            return taken;
        }
        used += size;
    }
    sizes.len()
}

fn require<'a>(store: &'a EmbeddingStore, key: &str) -> Result<&'a Embedding> {
    store
        .get(key)
        .ok_or_else(|| Error::Embedding(format!("index is missing the embedding for '{key}'")))
}

/// Skeleton-channel retrieval with budget `λ_s`.
///
/// Seeds are the `k_seed` entities nearest the query in Euclidean distance.
/// Entity descriptions are added in seed order within λ_s/2; relations
/// touching a seed follow, two-seed relations before one-seed relations,
/// within a class by summed closeness of their seed endpoints, while the
/// combined entity+relation text stays within λ_s/2. Sub-chunks linked to
/// the seeds and chosen relations fill an independent λ_s/2, most-linked
/// first, ties by query cosine and then id.
pub fn skeleton_search(
    skeleton: &SkeletonGraph,
    subchunks: &[SubChunk],
    store: &EmbeddingStore,
    query: &Embedding,
    budget: f64,
    k_seed: usize,
) -> Result<Context> {
    let mut context = Context::default();
    if budget <= 0.0 || skeleton.is_empty() {
        return Ok(context);
    }
    if skeleton.granularity != Granularity::SubChunk {
        return Err(Error::Config(
            "skeleton links must be rewired to sub-chunks before retrieval".into(),
        ));
    }
    let half = budget / 2.0;

    // seed entities: nearest first, ids break ties
    let mut by_distance: Vec<(f64, usize)> = skeleton
        .entities
        .iter()
        .map(|e| {
            Ok((f64::from(euclidean(query, require(store, &keys::entity(e.entity_id))?)), e.entity_id))
        })
        .collect::<Result<_>>()?;
    by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    by_distance.truncate(k_seed);
    let seed_distance: Vec<(usize, f64)> = by_distance.iter().map(|&(d, id)| (id, d)).collect();
    let seeds: BTreeSet<usize> = seed_distance.iter().map(|&(id, _)| id).collect();

    let entity_sizes: Vec<usize> = seed_distance
        .iter()
        .map(|&(id, _)| skeleton.entities[id].description_tokens)
        .collect();
    let chosen_entities = greedy_prefix_len(&entity_sizes, half);
    let mut text_tokens = 0usize;
    for &(id, _) in &seed_distance[..chosen_entities] {
        let entity = &skeleton.entities[id];
        text_tokens += entity.description_tokens;
        context.push(Segment {
            channel: Channel::Entity,
            source_id: keys::entity(id),
            tokens: entity.description_tokens,
            text: entity.description.clone(),
        });
    }

    // relations touching a seed; rank (seed endpoints, -summed distance, id)
    let closeness = |id: usize| -> f64 {
        seed_distance.iter().find(|&&(e, _)| e == id).map_or(0.0, |&(_, d)| -d)
    };
    let mut candidates: Vec<(usize, f64, usize)> = skeleton
        .relations
        .iter()
        .filter_map(|r| {
            let endpoint_seeds =
                usize::from(seeds.contains(&r.source)) + usize::from(seeds.contains(&r.target));
            if endpoint_seeds == 0 {
                return None;
            }
            let score = [r.source, r.target]
                .iter()
                .filter(|id| seeds.contains(id))
                .map(|&id| closeness(id))
                .sum();
            Some((endpoint_seeds, score, r.relation_id))
        })
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut chosen_relations: Vec<usize> = Vec::new();
    for &(_, _, id) in &candidates {
        let relation = &skeleton.relations[id];
        if (text_tokens + relation.description_tokens) as f64 > half {
            break;
        }
        text_tokens += relation.description_tokens;
        chosen_relations.push(id);
        context.push(Segment {
            channel: Channel::Relation,
            source_id: keys::relation(id),
            tokens: relation.description_tokens,
            text: relation.description.clone(),
        });
    }

    // sub-chunks by link count to the seeds and chosen relations
    let mut adjacency = vec![0usize; subchunks.len()];
    for &seed in &seeds {
        for &sub in &skeleton.entity_links[seed] {
            adjacency[sub] += 1;
        }
    }
    for &relation in &chosen_relations {
        for &sub in &skeleton.relation_links[relation] {
            adjacency[sub] += 1;
        }
    }
    let mut linked: Vec<(usize, f64, usize)> = adjacency
        .iter()
        .enumerate()
        .filter(|&(_, &count)| count > 0)
        .map(|(sub, &count)| {
            Ok((count, f64::from(cosine(query, require(store, &keys::sub(sub))?)), sub))
        })
        .collect::<Result<_>>()?;
    linked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut chunk_tokens = 0usize;
    for &(_, _, sub) in &linked {
        let sub_chunk = &subchunks[sub];
        if (chunk_tokens + sub_chunk.token_count) as f64 > half {
            break;
        }
        chunk_tokens += sub_chunk.token_count;
        context.push(Segment {
            channel: Channel::Chunk,
            source_id: keys::sub(sub),
            tokens: sub_chunk.token_count,
            text: sub_chunk.text.clone(),
        });
    }

    Ok(context)
}

/// Seed keywords for budget `λ_k`: keywords in descending query cosine
/// (ties by keyword), grown until their neighborhoods' combined sub-chunk
/// tokens first reach 2·λ_k, keeping the crossing keyword, or until
/// exhausted. Returns bipartite node ids in selection order.
pub fn select_seed_keywords(
    bipartite: &BipartiteGraph,
    subchunks: &[SubChunk],
    store: &EmbeddingStore,
    query: &Embedding,
    budget: f64,
) -> Result<Vec<usize>> {
    let mut ranked: Vec<(f64, &str, usize)> = bipartite
        .nodes
        .iter()
        .enumerate()
        .map(|(node, kw)| {
            let similarity = f64::from(cosine(query, require(store, &keys::keyword(&kw.keyword))?));
            Ok((similarity, kw.keyword.as_str(), node))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));

    let target = 2.0 * budget;
    let mut seeds = Vec::new();
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    let mut covered_tokens = 0usize;
    for (_, _, node) in ranked {
        seeds.push(node);
        for &sub in &bipartite.edges[node] {
            if covered.insert(sub) {
                covered_tokens += subchunks[sub].token_count;
            }
        }
        if covered_tokens as f64 >= target {
            break;
        }
    }
    Ok(seeds)
}

/// Keyword-channel retrieval with budget `λ_k`: sub-chunks adjacent to the
/// seed keywords, best query cosine first (ties by id), greedily within the
/// budget.
pub fn keyword_search(
    bipartite: &BipartiteGraph,
    subchunks: &[SubChunk],
    store: &EmbeddingStore,
    query: &Embedding,
    budget: f64,
) -> Result<Context> {
    let mut context = Context::default();
    if budget <= 0.0 {
        return Ok(context);
    }
    if bipartite.keyword_count() == 0 {
        log::warn!("keyword channel skipped: the index has no keywords");
        return Ok(context);
    }
    let seeds = select_seed_keywords(bipartite, subchunks, store, query, budget)?;
    let mut candidates: Vec<(f64, usize)> = bipartite
        .neighbors(&seeds)
        .into_iter()
        .map(|sub| Ok((f64::from(cosine(query, require(store, &keys::sub(sub))?)), sub)))
        .collect::<Result<_>>()?;
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut used = 0usize;
    for &(_, sub) in &candidates {
        let sub_chunk = &subchunks[sub];
        if (used + sub_chunk.token_count) as f64 > budget {
            break;
        }
        used += sub_chunk.token_count;
        context.push(Segment {
            channel: Channel::KeywordChunk,
            source_id: keys::sub(sub),
            tokens: sub_chunk.token_count,
            text: sub_chunk.text.clone(),
        });
    }
    Ok(context)
}

/// Dual-channel retrieval: the skeleton channel runs with budget θ·λ, the
/// keyword channel with (1−θ)·λ, and the contexts concatenate in that
/// order.
pub fn retrieve(
    skeleton: &SkeletonGraph,
    bipartite: &BipartiteGraph,
    subchunks: &[SubChunk],
    store: &EmbeddingStore,
    query: &Embedding,
    cfg: &RetrievalConfig,
) -> Result<Context> {
    cfg.validate()?;
    let budget = cfg.budget as f64;
    let skeleton_budget = cfg.skeleton_ratio * budget;
    let keyword_budget = (1.0 - cfg.skeleton_ratio) * budget;

    let mut context =
        skeleton_search(skeleton, subchunks, store, query, skeleton_budget, cfg.k_seed)?;
    context.extend(keyword_search(bipartite, subchunks, store, query, keyword_budget)?);
    if context.is_empty() {
        log::warn!("both retrieval channels returned nothing");
    }
    Ok(context)
}

/// Embeds the query with `provider`, then runs [`retrieve`].
pub fn retrieve_text(
    skeleton: &SkeletonGraph,
    bipartite: &BipartiteGraph,
    subchunks: &[SubChunk],
    store: &EmbeddingStore,
    provider: &dyn EmbeddingProvider,
    query: &str,
    cfg: &RetrievalConfig,
) -> Result<Context> {
    let embedded = provider
        .embed_batch(&[query])?
        .pop()
        .ok_or_else(|| Error::Embedding("provider returned nothing for the query".into()))?;
    retrieve(skeleton, bipartite, subchunks, store, &embedded, cfg)
}

/// Fills `template`'s `{context}` and `{question}` slots. Segments render
/// one per line as `[channel source_id] text`, in stored order.
pub fn assemble_prompt(context: &Context, question: &str, template: &str) -> Result<String> {
    for slot in ["{context}", "{question}"] {
        if !template.contains(slot) {
            return Err(Error::Config(format!("prompt template is missing the {slot} slot")));
        }
    }
    let rendered: String = context
        .segments
        .iter()
        .map(|s| format!("[{} {}] {}", s.channel, s.source_id, s.text))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(template.replace("{context}", &rendered).replace("{question}", question))
}
