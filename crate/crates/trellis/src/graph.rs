//! Chunk proximity graph and importance ranking.
//!
//! Each chunk proposes K/2 lexical neighbors (most shared keywords) and K/2
//! semantic neighbors (highest embedding cosine, disjoint from the lexical
//! picks); the union of proposals, symmetrized, is the graph. PageRank over
//! the symmetrized graph ranks chunks for core selection.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, Vocabulary};
use crate::embedding::{cosine, keys, Embedding, EmbeddingStore};
use crate::error::{Error, Result};

/// Which similarity proposed an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Lexical,
    Semantic,
}

#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub n: usize,
    /// Directed proposals per node, lexical picks first. Kept for
    /// inspection; ranking runs on the symmetrized view.
    pub proposals: Vec<Vec<(usize, EdgeKind)>>,
    /// Symmetrized adjacency.
    pub neighbors: Vec<BTreeSet<usize>>,
}

impl KnnGraph {
    /// Builds a graph directly from undirected edges. Test and tooling
    /// support; `build_knn_graph` is the production path.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u != v {
                neighbors[u].insert(v);
                neighbors[v].insert(u);
            }
        }
        Self { n, proposals: vec![Vec::new(); n], neighbors }
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(BTreeSet::len).sum::<usize>() / 2
    }
}

/// Builds the K-nearest-neighbor chunk graph. `k` must be positive and
/// even: half the picks are lexical (shared keyword count, filled even when
/// the count is zero), half semantic (cosine over chunk embeddings,
/// excluding nodes already picked lexically). Ties break toward the lower
/// chunk id. When the corpus has at most K+1 chunks every node ends up
/// proposing all others.
pub fn build_knn_graph(
    chunks: &[Chunk],
    vocab: &Vocabulary,
    store: &EmbeddingStore,
    k: usize,
) -> Result<KnnGraph> {
    if k == 0 || k % 2 != 0 {
        return Err(Error::Config(format!("knn degree k must be positive and even, got {k}")));
    }
    let n = chunks.len();
    let kw_sets = vocab.chunk_keywords(n);
    let embeddings: Vec<&Embedding> = chunks
        .iter()
        .map(|c| {
            store
                .get(&keys::chunk(c.chunk_id))
                .ok_or_else(|| Error::Embedding(format!("missing embedding for chunk {}", c.chunk_id)))
        })
        .collect::<Result<_>>()?;

    let half = k / 2;
    let mut proposals: Vec<Vec<(usize, EdgeKind)>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut lexical: Vec<(usize, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, kw_sets[i].intersection(&kw_sets[j]).count()))
            .collect();
        lexical.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let picked: BTreeSet<usize> = lexical.iter().take(half).map(|&(j, _)| j).collect();
        for &j in &picked {
            proposals[i].push((j, EdgeKind::Lexical));
        }

        let mut semantic: Vec<(usize, f32)> = (0..n)
            .filter(|&j| j != i && !picked.contains(&j))
            .map(|j| (j, cosine(embeddings[i], embeddings[j])))
            .collect();
        semantic.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in semantic.iter().take(half) {
            proposals[i].push((j, EdgeKind::Semantic));
        }
    }

    let mut neighbors = vec![BTreeSet::new(); n];
    for (i, props) in proposals.iter().enumerate() {
        for &(j, _) in props {
            neighbors[i].insert(j);
            neighbors[j].insert(i);
        }
    }
    Ok(KnnGraph { n, proposals, neighbors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRankScores {
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Power iteration for scores satisfying
/// `score = alpha/n + (1-alpha) * score * P`, where P spreads each node's
/// mass uniformly over its neighbors and an isolated node spreads over all
/// nodes. Starts uniform; stops when the L1 step falls below `tol`. Scores
/// sum to 1 and are strictly positive for alpha > 0.
pub fn pagerank(graph: &KnnGraph, alpha: f64, tol: f64, max_iter: usize) -> PageRankScores {
    let n = graph.n;
    if n == 0 {
        return PageRankScores { scores: Vec::new(), iterations: 0, residual: 0.0, converged: true };
    }
    let inv_n = 1.0 / n as f64;
    let mut scores = vec![inv_n; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut next = vec![alpha * inv_n; n];
        let mut dangling = 0.0;
        for v in 0..n {
            let d = graph.neighbors[v].len();
            if d == 0 {
                dangling += scores[v];
                continue;
            }
            let share = (1.0 - alpha) * scores[v] / d as f64;
            for &u in &graph.neighbors[v] {
                next[u] += share;
            }
        }
        if dangling > 0.0 {
            let spread = (1.0 - alpha) * dangling * inv_n;
            for x in &mut next {
                *x += spread;
            }
        }
        residual = scores.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        scores = next;
        if residual < tol {
            converged = true;
            break;
        }
    }
    PageRankScores { scores, iterations, residual, converged }
}

/// How core chunks are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreMode {
    PageRank,
    Uniform,
}

/// Selects ceil(beta * n) core chunk ids. PageRank mode takes the
/// highest-scored chunks (score descending, then chunk id); uniform mode
/// samples without replacement from the seeded generator. beta = 0 selects
/// nothing, beta = 1 selects everything.
pub fn select_core_chunks(
    scores: &[f64],
    beta: f64,
    mode: CoreMode,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("core fraction must be in [0, 1], got {beta}")));
    }
    let n = scores.len();
    let count = core_count(beta, n);
    match mode {
        CoreMode::PageRank => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(count);
            Ok(order)
        }
        CoreMode::Uniform => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Ok(rand::seq::index::sample(&mut rng, n, count).into_vec())
        }
    }
}

/// ceil(beta * n) with a nudge for binary-fraction dust: 0.8 * 100 is
/// 80.000000000000004 in f64 and must select 80, not 81. beta > 0 always
/// selects at least one chunk of a non-empty corpus.
fn core_count(beta: f64, n: usize) -> usize {
    if beta == 0.0 || n == 0 {
        return 0;
    }
    let raw = (beta * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Degree distribution of the symmetrized graph: degree -> node count.
pub fn degree_histogram(graph: &KnnGraph) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for nbrs in &graph.neighbors {
        *hist.entry(nbrs.len()).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_vocabulary, chunk_corpus, default_stopwords, segment_sentences, split_subchunks,
        ChunkingConfig,
    };
    use crate::embedding::{EmbeddingProvider, HashEmbedder};
    use crate::tokenizer::WordTokenizer;

    fn fixture(docs: &[&str]) -> (Vec<Chunk>, Vocabulary, EmbeddingStore) {
        let docs: Vec<(String, String)> =
            docs.iter().enumerate().map(|(i, d)| (format!("d{i}"), d.to_string())).collect();
        let cfg = ChunkingConfig::new(64, 0, default_stopwords()).unwrap();
        let (chunks, _) = chunk_corpus(&docs, &WordTokenizer, &cfg);
        let (subs, _) = split_subchunks(&chunks, &cfg);
        let vocab = build_vocabulary(&segment_sentences(&subs, &cfg));
        let provider = HashEmbedder::new(16);
        let mut store = EmbeddingStore::new(16);
        for c in &chunks {
            let emb = provider.embed_batch(&[&c.text]).unwrap().remove(0);
            store.insert(keys::chunk(c.chunk_id), emb).unwrap();
        }
        (chunks, vocab, store)
    }

    #[test]
    fn knn_lexical_picks_follow_shared_counts() {
        let (chunks, vocab, store) = fixture(&[
            "alpha beta gamma.",
            "alpha beta delta.",
            "alpha zeta eta.",
            "omega psi chi.",
        ]);
        let g = build_knn_graph(&chunks, &vocab, &store, 2).unwrap();
        // shared-keyword counts: (0,1)=2, (0,2)=1, (1,2)=1, rest 0
        assert_eq!(g.proposals[0][0], (1, EdgeKind::Lexical));
        assert_eq!(g.proposals[1][0], (0, EdgeKind::Lexical));
        assert_eq!(g.proposals[2][0], (0, EdgeKind::Lexical), "tie at count 1 breaks to lower id");
        assert_eq!(g.proposals[3][0], (0, EdgeKind::Lexical), "zero shared still fills, lowest id");
        for props in &g.proposals {
            assert_eq!(props.len(), 2, "one lexical + one semantic pick");
            assert_ne!(props[0].0, props[1].0, "pick sets are disjoint");
        }
        // symmetrized adjacency includes reverse direction
        assert!(g.neighbors[1].contains(&0) && g.neighbors[0].contains(&1));
    }

    #[test]
    fn knn_small_corpus_connects_everything() {
        let (chunks, vocab, store) = fixture(&["one thing.", "another thing.", "third thing."]);
        let g = build_knn_graph(&chunks, &vocab, &store, 4).unwrap();
        for v in 0..3 {
            assert_eq!(g.degree(v), 2, "n-1 <= K means all others are neighbors");
        }
    }

    #[test]
    fn knn_rejects_odd_k() {
        let (chunks, vocab, store) = fixture(&["a b.", "c d."]);
        assert!(build_knn_graph(&chunks, &vocab, &store, 3).is_err());
        assert!(build_knn_graph(&chunks, &vocab, &store, 0).is_err());
    }

    #[test]
    fn pagerank_cycle_is_uniform() {
        let g = KnnGraph::from_undirected_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let pr = pagerank(&g, 0.15, 1e-10, 200);
        assert!(pr.converged);
        for s in &pr.scores {
            assert!((s - 0.25).abs() < 1e-9);
        }
        let total: f64 = pr.scores.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pagerank_star_matches_hand_solution() {
        // Star on 4 nodes, center 0, alpha 0.15. Solving the fixed point by
        // hand: center = (alpha/n)(1 + 3(1-alpha)) / (1 - (1-alpha)^2)
        //             = 0.0375 * 3.55 / 0.2775 = 0.47972972...
        let g = KnnGraph::from_undirected_edges(4, &[(0, 1), (0, 2), (0, 3)]);
        let pr = pagerank(&g, 0.15, 1e-13, 500);
        assert!(pr.converged);
        let expected_center = 0.0375 * 3.55 / 0.2775;
        assert!((pr.scores[0] - expected_center).abs() < 1e-9);
        for leaf in 1..4 {
            assert!((pr.scores[leaf] - (1.0 - expected_center) / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pagerank_isolated_nodes_spread_uniformly() {
        let g = KnnGraph::from_undirected_edges(3, &[]);
        let pr = pagerank(&g, 0.15, 1e-12, 200);
        assert!(pr.converged);
        for s in &pr.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pagerank_alpha_one_is_exactly_uniform() {
        let g = KnnGraph::from_undirected_edges(5, &[(0, 1), (2, 3)]);
        let pr = pagerank(&g, 1.0, 1e-12, 200);
        assert!(pr.converged);
        assert_eq!(pr.iterations, 1);
        assert!(pr.scores.iter().all(|&s| s == 0.2));
    }

    #[test]
    fn pagerank_scores_positive_and_normalized() {
        let g = KnnGraph::from_undirected_edges(6, &[(0, 1), (1, 2), (4, 5)]);
        let pr = pagerank(&g, 0.15, 1e-10, 300);
        assert!(pr.converged);
        assert!(pr.scores.iter().all(|&s| s > 0.0));
        assert!((pr.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn core_selection_counts_and_order() {
        let scores: Vec<f64> = (0..100).map(|i| f64::from(i % 10)).collect();
        let picked = select_core_chunks(&scores, 0.8, CoreMode::PageRank, 0).unwrap();
        assert_eq!(picked.len(), 80, "0.8 * 100 selects exactly 80 despite f64 dust");
        // top score 9.0 first, ties by ascending id
        assert_eq!(picked[0], 9);
        assert_eq!(picked[1], 19);

        assert!(select_core_chunks(&scores, 0.0, CoreMode::PageRank, 0).unwrap().is_empty());
        let all = select_core_chunks(&scores, 1.0, CoreMode::PageRank, 0).unwrap();
        assert_eq!(all.len(), 100);
        assert!(select_core_chunks(&scores, 1.5, CoreMode::PageRank, 0).is_err());
        // tiny positive beta still selects one
        assert_eq!(select_core_chunks(&scores, 1e-9, CoreMode::PageRank, 0).unwrap().len(), 1);
    }

    #[test]
    fn uniform_selection_is_seed_deterministic() {
        let scores = vec![0.0; 50];
        let a = select_core_chunks(&scores, 0.3, CoreMode::Uniform, 42).unwrap();
        let b = select_core_chunks(&scores, 0.3, CoreMode::Uniform, 42).unwrap();
        let c = select_core_chunks(&scores, 0.3, CoreMode::Uniform, 43).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_ne!(a, c);
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 15, "sampling is without replacement");
    }

    #[test]
    fn histogram_counts_degrees() {
        let g = KnnGraph::from_undirected_edges(4, &[(0, 1), (0, 2), (0, 3)]);
        let h = degree_histogram(&g);
        assert_eq!(h[&3], 1);
        assert_eq!(h[&1], 3);
    }
}
