//! Text–keyword bipartite graph over sub-chunks.
//!
//! One node per vocabulary keyword; an edge connects a keyword to every
//! sub-chunk whose text contains it under normalized word matching. Each
//! keyword carries a description (all sentences containing it) and an
//! embedding (the raw mean of those sentences' vectors) used to seed the
//! keyword retrieval channel.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_words, Sentence, SubChunk, Vocabulary};
use crate::embedding::{keys, mean, EmbeddingProvider, EmbeddingStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordNode {
    pub keyword: String,
    /// All sentences containing the keyword, joined in sentence order.
    pub description: String,
    pub sentence_count: usize,
}

/// Keyword nodes are ordered by keyword; `edges[i]` lists the sub-chunk
/// ids adjacent to node `i`, ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BipartiteGraph {
    pub nodes: Vec<KeywordNode>,
    pub index: BTreeMap<String, usize>,
    pub edges: Vec<Vec<usize>>,
    pub sub_count: usize,
}

impl BipartiteGraph {
    pub fn empty(sub_count: usize) -> Self {
        Self { sub_count, ..Self::default() }
    }

    pub fn keyword_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges[node].len()
    }

    pub fn node_id(&self, keyword: &str) -> Option<usize> {
        self.index.get(keyword).copied()
    }

    /// Union of sub-chunks adjacent to any of the given keyword nodes.
    pub fn neighbors(&self, keyword_nodes: &[usize]) -> BTreeSet<usize> {
        let mut subs = BTreeSet::new();
        for &node in keyword_nodes {
            subs.extend(self.edges[node].iter().copied());
        }
        subs
    }
}

/// Builds the bipartite graph. Sentences are embedded under `sent:{id}`,
/// keyword means under `kw:{keyword}`. An empty vocabulary yields a graph
/// with sub-chunk nodes only.
pub fn build_bipartite(
    subchunks: &[SubChunk],
    sentences: &[Sentence],
    vocab: &Vocabulary,
    provider: &dyn EmbeddingProvider,
    store: &mut EmbeddingStore,
) -> Result<BipartiteGraph> {
    let mut graph = BipartiteGraph::empty(subchunks.len());
    if vocab.is_empty() {
        return Ok(graph);
    }

    let sentence_texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    let sentence_embeddings = provider.embed_batch(&sentence_texts)?;
    for (sentence, embedding) in sentences.iter().zip(&sentence_embeddings) {
        store.insert(keys::sentence(sentence.sentence_id), embedding.clone())?;
    }

    // inverted index over sub-chunk text: word -> sub ids containing it
    let mut containing: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for sub in subchunks {
        for word in normalize_words(&sub.text).into_iter().collect::<BTreeSet<_>>() {
            containing.entry(word).or_default().push(sub.sub_id);
        }
    }

    for (keyword, postings) in &vocab.postings {
        let mut sentence_ids: Vec<usize> = postings.iter().map(|p| p.sentence_id).collect();
        sentence_ids.sort_unstable();
        sentence_ids.dedup();
        if sentence_ids.is_empty() {
            continue;
        }
        let posted: Vec<&Sentence> = sentence_ids
            .iter()
            .map(|&id| {
                sentences.get(id).filter(|s| s.sentence_id == id).ok_or_else(|| {
                    Error::Corpus(format!("keyword '{keyword}' posts to unknown sentence {id}"))
                })
            })
            .collect::<Result<_>>()?;

        let description =
            posted.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
        let posted_embeddings: Vec<&crate::embedding::Embedding> = posted
            .iter()
            .map(|s| {
                sentence_embeddings
                    .get(s.sentence_id)
                    .ok_or_else(|| Error::Corpus(format!("sentence {} not embedded", s.sentence_id)))
            })
            .collect::<Result<_>>()?;
        let embedding = mean(&posted_embeddings)?;
        store.insert(keys::keyword(keyword), embedding)?;

        let node = graph.nodes.len();
        graph.nodes.push(KeywordNode {
            keyword: keyword.clone(),
            description,
            sentence_count: sentence_ids.len(),
        });
        graph.index.insert(keyword.clone(), node);
        graph.edges.push(containing.get(keyword).cloned().unwrap_or_default());
    }

    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_vocabulary, chunk_corpus, default_stopwords, segment_sentences, split_subchunks,
        ChunkingConfig,
    };
    use crate::embedding::{Embedding, HashEmbedder};
    use crate::tokenizer::WordTokenizer;

    fn pipeline(
        text: &str,
        chunk_tokens: usize,
        depth: u32,
    ) -> (Vec<SubChunk>, Vec<Sentence>, Vocabulary) {
        let cfg = ChunkingConfig::new(chunk_tokens, depth, default_stopwords()).unwrap();
        let docs = vec![("d0".to_string(), text.to_string())];
        let (chunks, _) = chunk_corpus(&docs, &WordTokenizer, &cfg);
        let (subs, _) = split_subchunks(&chunks, &cfg);
        let sentences = segment_sentences(&subs, &cfg);
        let vocab = build_vocabulary(&sentences);
        (subs, sentences, vocab)
    }

    fn build(text: &str, chunk_tokens: usize, depth: u32) -> (BipartiteGraph, EmbeddingStore, Vec<Sentence>) {
        let (subs, sentences, vocab) = pipeline(text, chunk_tokens, depth);
        let provider = HashEmbedder::new(8);
        let mut store = EmbeddingStore::new(8);
        let graph = build_bipartite(&subs, &sentences, &vocab, &provider, &mut store).unwrap();
        (graph, store, sentences)
    }

    #[test]
    fn keyword_in_two_subchunks_has_degree_two() {
        // 8 tokens, depth 1 -> two 4-token subs, "paris" in both
        let (graph, _, _) = build("Paris is lovely. Paris has cafes", 8, 1);
        let node = graph.node_id("paris").unwrap();
        assert_eq!(graph.degree(node), 2);
        assert_eq!(graph.edges[node], vec![0, 1]);
        let cafes = graph.node_id("cafes").unwrap();
        assert_eq!(graph.edges[cafes], vec![1]);
    }

    #[test]
    fn single_sentence_keyword_copies_that_sentences_embedding() {
        let (graph, store, sentences) = build("Rivers bend. Stones rest.", 8, 0);
        let node = &graph.nodes[graph.node_id("stones").unwrap()];
        assert_eq!(node.sentence_count, 1);
        let sentence = sentences.iter().find(|s| s.keywords.contains("stones")).unwrap();
        let kw = store.get(&keys::keyword("stones")).unwrap();
        let sent = store.get(&keys::sentence(sentence.sentence_id)).unwrap();
        assert_eq!(kw.0, sent.0, "mean of one vector is that vector");
    }

    #[test]
    fn keyword_embedding_is_the_raw_sentence_mean() {
        let (graph, store, sentences) = build("Paris is lovely. Paris has cafes", 8, 1);
        let node = &graph.nodes[graph.node_id("paris").unwrap()];
        assert_eq!(node.sentence_count, 2);
        assert_eq!(node.description, "Paris is lovely. Paris has cafes");

        let posted: Vec<&Embedding> = sentences
            .iter()
            .filter(|s| s.keywords.contains("paris"))
            .map(|s| store.get(&keys::sentence(s.sentence_id)).unwrap())
            .collect();
        assert_eq!(posted.len(), 2);
        let kw = store.get(&keys::keyword("paris")).unwrap();
        let mut norm_sq = 0.0f32;
        for i in 0..8 {
            let want = (posted[0].0[i] + posted[1].0[i]) / 2.0;
            assert!((kw.0[i] - want).abs() < 1e-6);
            norm_sq += kw.0[i] * kw.0[i];
        }
        // a mean of distinct unit vectors is strictly inside the sphere
        assert!(norm_sq < 0.999, "keyword mean must not be re-normalized");
    }

    #[test]
    fn edges_match_a_direct_containment_scan() {
        let text = "Alice met Bob in Paris. Bob wrote to Carol. \
                    Carol kept the letters in Paris. Alice never knew about the letters.";
        let (subs, sentences, vocab) = pipeline(text, 16, 2);
        let provider = HashEmbedder::new(8);
        let mut store = EmbeddingStore::new(8);
        let graph = build_bipartite(&subs, &sentences, &vocab, &provider, &mut store).unwrap();

        assert!(graph.keyword_count() > 3);
        assert!(subs.len() > 2);
        for node in 0..graph.keyword_count() {
            let keyword = &graph.nodes[node].keyword;
            let brute: Vec<usize> = subs
                .iter()
                .filter(|s| normalize_words(&s.text).contains(keyword))
                .map(|s| s.sub_id)
                .collect();
            assert_eq!(graph.edges[node], brute, "keyword {keyword}");
        }
    }

    #[test]
    fn neighbors_unions_adjacent_subs() {
        let (graph, _, _) = build("Paris is lovely. Paris has cafes", 8, 1);
        let paris = graph.node_id("paris").unwrap();
        let cafes = graph.node_id("cafes").unwrap();
        let lovely = graph.node_id("lovely").unwrap();
        assert_eq!(graph.neighbors(&[cafes]), BTreeSet::from([1]));
        assert_eq!(graph.neighbors(&[lovely]), BTreeSet::from([0]));
        assert_eq!(graph.neighbors(&[paris, cafes]), BTreeSet::from([0, 1]));
        assert!(graph.neighbors(&[]).is_empty());
    }

    #[test]
    fn empty_vocabulary_yields_keywordless_graph() {
        // every word is a stopword, so the vocabulary is empty
        let (graph, store, _) = build("the and of it", 4, 1);
        assert_eq!(graph.keyword_count(), 0);
        assert_eq!(graph.edge_count(), 0);
        assert_eq!(graph.sub_count, 2);
        assert_eq!(store.len(), 0, "nothing to embed");
    }
}
