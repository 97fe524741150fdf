//! Corpus ingestion: documents to chunks, chunks to sub-chunks, sub-chunks to
//! sentences and a keyword vocabulary.
//!
//! Chunks are fixed-size token windows. Sub-chunks come from recursively
//! halving a chunk's token sequence, so joining a chunk's sub-chunks in
//! `split_index` order reproduces the chunk's tokens (and bytes) exactly.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::tokenizer::{TokenSpan, Tokenizer};

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// Parameters for chunking and sub-chunk splitting.
///
/// `chunk_tokens` is the chunk window size; `split_depth` halves each chunk
/// that many times, producing up to 2^split_depth sub-chunks per chunk.
#[derive(Debug, Clone)]
pub struct ChunkingConfig {
    pub chunk_tokens: usize,
    pub split_depth: u32,
    pub stopwords: BTreeSet<String>,
}

impl ChunkingConfig {
    pub fn new(chunk_tokens: usize, split_depth: u32, stopwords: BTreeSet<String>) -> Result<Self> {
        if chunk_tokens == 0 {
            return Err(Error::Config("chunk size must be at least 1 token".into()));
        }
        if split_depth >= usize::BITS {
            return Err(Error::Config(format!("split depth {split_depth} is out of range")));
        }
        let pieces = 1usize << split_depth;
        if chunk_tokens < pieces {
            return Err(Error::Config(format!(
                "chunk size {chunk_tokens} cannot be split into 2^{split_depth} = {pieces} sub-chunks"
            )));
        }
        Ok(Self { chunk_tokens, split_depth, stopwords })
    }
}

/// The bundled English stopword list.
pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(STOPWORDS_EN)
}

/// Loads a stopword file: one word per line, `#` lines are comments.
pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    Ok(parse_stopwords(&text))
}

fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// A fixed-size token window over one document. `text` is the exact byte
/// slice the window covers; `tokens` are rebased to it. Every chunk has
/// exactly the configured token count except a document's final chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub chunk_id: usize,
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<TokenSpan>,
}

impl Chunk {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.tokens.iter().map(|t| t.id)
    }
}

/// One piece of a recursively halved chunk. `sub_id` is global;
/// `split_index` orders the pieces within their chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubChunk {
    pub sub_id: usize,
    pub chunk_id: usize,
    pub doc_id: String,
    pub split_index: usize,
    pub text: String,
    pub token_count: usize,
}

/// A sentence within one sub-chunk. A sentence that straddles a sub-chunk
/// boundary belongs to the sub-chunk containing its first character.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub sentence_id: usize,
    pub sub_id: usize,
    pub chunk_id: usize,
    pub text: String,
    pub keywords: BTreeSet<String>,
}

/// Where a keyword occurs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: usize,
    pub sub_id: usize,
    pub sentence_id: usize,
}

/// Keyword vocabulary with occurrence postings. Keywords are normalized
/// words (see [`normalize_word`]) with stopwords removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    pub postings: BTreeMap<String, Vec<Posting>>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.postings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// Keyword sets per chunk, indexed by chunk id.
    pub fn chunk_keywords(&self, chunk_count: usize) -> Vec<BTreeSet<&str>> {
        let mut sets = vec![BTreeSet::new(); chunk_count];
        for (kw, posts) in &self.postings {
            for p in posts {
                if p.chunk_id < chunk_count {
                    sets[p.chunk_id].insert(kw.as_str());
                }
            }
        }
        sets
    }
}

/// Non-fatal events recorded while building an index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusWarning {
    EmptyDocument { doc_id: String },
    ShortChunk { chunk_id: usize, token_count: usize, want_pieces: usize },
}

impl fmt::Display for CorpusWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusWarning::EmptyDocument { doc_id } => {
                write!(f, "document '{doc_id}' has no tokens and was skipped")
            }
            CorpusWarning::ShortChunk { chunk_id, token_count, want_pieces } => write!(
                f,
                "chunk {chunk_id} has {token_count} tokens, fewer than {want_pieces} sub-chunks requested"
            ),
        }
    }
}

/// Loads a corpus from a directory of UTF-8 text files (doc id = file name,
/// sorted) or from a JSON-lines file of `{"id": ..., "text": ...}` records
/// (document order preserved). Duplicate ids are an error.
pub fn load_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let mut docs: Vec<(String, String)> = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(io_at(path))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io_at(path))?
            .into_iter()
            .filter(|e| e.path().is_file())
            .collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let p = entry.path();
            let id = entry.file_name().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&p).map_err(io_at(&p))?;
            docs.push((id, text));
        }
    } else {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            text: String,
        }
        let raw = std::fs::read_to_string(path).map_err(io_at(path))?;
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| {
                Error::Corpus(format!("{}:{}: bad corpus record: {e}", path.display(), lineno + 1))
            })?;
            docs.push((row.id, row.text));
        }
    }
    let mut seen = BTreeSet::new();
    for (id, _) in &docs {
        if !seen.insert(id.clone()) {
            return Err(Error::Corpus(format!("duplicate document id '{id}'")));
        }
    }
    Ok(docs)
}

/// Splits documents into chunks of exactly `chunk_tokens` tokens (a
/// document's last chunk may be shorter). Concatenating a document's chunk
/// texts reproduces the document. Documents with no tokens are skipped with
/// a warning.
pub fn chunk_corpus(
    docs: &[(String, String)],
    tokenizer: &dyn Tokenizer,
    cfg: &ChunkingConfig,
) -> (Vec<Chunk>, Vec<CorpusWarning>) {
    let mut chunks = Vec::new();
    let mut warnings = Vec::new();
    for (doc_id, text) in docs {
        let spans = tokenizer.tokenize(text);
        if spans.is_empty() {
            warnings.push(CorpusWarning::EmptyDocument { doc_id: doc_id.clone() });
            continue;
        }
        for window in spans.chunks(cfg.chunk_tokens) {
            let start = window[0].start;
            let end = window[window.len() - 1].end;
            let tokens = window
                .iter()
                .map(|t| TokenSpan { id: t.id, start: t.start - start, end: t.end - start })
                .collect();
            chunks.push(Chunk {
                chunk_id: chunks.len(),
                doc_id: doc_id.clone(),
                text: text[start..end].to_string(),
                tokens,
            });
        }
    }
    (chunks, warnings)
}

/// Recursively halves each chunk `split_depth` times at the token ceiling
/// midpoint. Produces up to 2^split_depth sub-chunks per chunk; chunks with
/// fewer tokens than that produce one sub-chunk per token, with a warning.
pub fn split_subchunks(
    chunks: &[Chunk],
    cfg: &ChunkingConfig,
) -> (Vec<SubChunk>, Vec<CorpusWarning>) {
    let want = 1usize << cfg.split_depth;
    let mut subs = Vec::new();
    let mut warnings = Vec::new();
    for chunk in chunks {
        let n = chunk.tokens.len();
        if n < want {
            warnings.push(CorpusWarning::ShortChunk {
                chunk_id: chunk.chunk_id,
                token_count: n,
                want_pieces: want,
            });
        }
        let mut ranges = Vec::with_capacity(want);
        halve(0, n, cfg.split_depth, &mut ranges);
        for (split_index, (a, b)) in ranges.into_iter().filter(|(a, b)| a < b).enumerate() {
            let start = chunk.tokens[a].start;
            let end = chunk.tokens[b - 1].end;
            subs.push(SubChunk {
                sub_id: subs.len(),
                chunk_id: chunk.chunk_id,
                doc_id: chunk.doc_id.clone(),
                split_index,
                text: chunk.text[start..end].to_string(),
                token_count: b - a,
            });
        }
    }
    (subs, warnings)
}

fn halve(start: usize, end: usize, depth: u32, out: &mut Vec<(usize, usize)>) {
    if depth == 0 {
        out.push((start, end));
        return;
    }
    let len = end - start;
    let mid = start + len.div_ceil(2);
    halve(start, mid, depth - 1, out);
    halve(mid, end, depth - 1, out);
}

/// Byte ranges of sentences in `text`. A sentence ends at `.`, `!`, or `?`
/// immediately followed by whitespace or end of input; trailing text without
/// terminal punctuation forms a final sentence. The rule is deliberately
/// naive ("Dr. Smith" splits after "Dr.") but deterministic.
pub fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                ranges.push((start.take().expect("sentence start set"), i + c.len_utf8()));
            }
        }
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            ranges.push((s, end));
        }
    }
    ranges
}

/// Segments each chunk's text (the concatenation of its sub-chunks) into
/// sentences and attributes each sentence to the sub-chunk containing its
/// first character. Keywords are the sentence's normalized words minus
/// stopwords.
pub fn segment_sentences(subchunks: &[SubChunk], cfg: &ChunkingConfig) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    let mut i = 0;
    while i < subchunks.len() {
        let chunk_id = subchunks[i].chunk_id;
        let mut group_end = i;
        while group_end < subchunks.len() && subchunks[group_end].chunk_id == chunk_id {
            group_end += 1;
        }
        let group = &subchunks[i..group_end];
        let chunk_text: String = group.iter().map(|s| s.text.as_str()).collect();
        // byte offset where each sub-chunk starts within the chunk text
        let mut offsets = Vec::with_capacity(group.len());
        let mut pos = 0;
        for sub in group {
            offsets.push(pos);
            pos += sub.text.len();
        }
        for (s, e) in sentence_ranges(&chunk_text) {
            let owner = match offsets.binary_search(&s) {
                Ok(k) => k,
                Err(k) => k - 1,
            };
            let text = chunk_text[s..e].to_string();
            let keywords = normalize_words(&text)
                .into_iter()
                .filter(|w| !cfg.stopwords.contains(w))
                .collect();
            sentences.push(Sentence {
                sentence_id: sentences.len(),
                sub_id: group[owner].sub_id,
                chunk_id,
                text,
                keywords,
            });
        }
        i = group_end;
    }
    sentences
}

/// Builds the keyword vocabulary from sentence keyword sets. Postings are
/// in sentence order.
pub fn build_vocabulary(sentences: &[Sentence]) -> Vocabulary {
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    for s in sentences {
        for kw in &s.keywords {
            postings.entry(kw.clone()).or_default().push(Posting {
                chunk_id: s.chunk_id,
                sub_id: s.sub_id,
                sentence_id: s.sentence_id,
            });
        }
    }
    Vocabulary { postings }
}

/// Total token count over several texts.
pub fn count_tokens(texts: &[&str], tokenizer: &dyn Tokenizer) -> usize {
    texts.iter().map(|t| tokenizer.count(t)).sum()
}

/// Normalizes one whitespace-delimited word: strips surrounding
/// non-alphanumeric characters and lowercases. Interior punctuation is kept
/// ("u.s." becomes "u.s"). Returns None when nothing remains. No stemming.
pub fn normalize_word(raw: &str) -> Option<String> {
    let core = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if core.is_empty() {
        None
    } else {
        Some(core.to_lowercase())
    }
}

/// Normalized words of a text, in order, duplicates kept.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_word).collect()
}
