//! Pluggable tokenization.
//!
//! Every tokenizer maps text to a sequence of [`TokenSpan`]s whose byte
//! ranges partition the input (when the input has at least one token) and
//! always fall on UTF-8 character boundaries. Chunking slices text at span
//! boundaries, so joining a chunk's pieces reproduces the original bytes
//! exactly. All budget arithmetic in the crate counts these spans, which
//! keeps token accounting consistent with whichever tokenizer built an index.

use std::sync::Arc;

use crate::error::{Error, Result};

/// One token: its id and the byte range it covers in the source text.
/// The range includes any whitespace attached to the token by the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: u64,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    /// Stable identifier recorded in index manifests. Loading an index
    /// requires a build that can resolve the same id.
    fn id(&self) -> &str;

    /// Tokenize `text`. Spans are non-empty, contiguous, in order, cover the
    /// whole input when at least one token exists, and never split a
    /// character. Text with no token content (empty or all whitespace)
    /// yields an empty vector.
    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Deterministic offline tokenizer, id `word-v1`.
///
/// A token core is either a maximal run of alphanumeric characters or a
/// single non-alphanumeric, non-whitespace character. Whitespace attaches to
/// the token that follows it; whitespace after the last core attaches to the
/// last token. Ids are FNV-1a hashes of the span bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

pub const WORD_TOKENIZER_ID: &str = "word-v1";

impl Tokenizer for WordTokenizer {
    fn id(&self) -> &str {
        WORD_TOKENIZER_ID
    }

    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        let mut spans: Vec<TokenSpan> = Vec::new();
        let bytes_len = text.len();
        let mut span_start = 0usize;
        let mut iter = text.char_indices().peekable();
        while let Some(&(i, c)) = iter.peek() {
            if c.is_whitespace() {
                iter.next();
                continue;
            }
            let core_end = if c.is_alphanumeric() {
                let mut end = i + c.len_utf8();
                iter.next();
                while let Some(&(j, d)) = iter.peek() {
                    if d.is_alphanumeric() {
                        end = j + d.len_utf8();
                        iter.next();
                    } else {
                        break;
                    }
                }
                end
            } else {
                iter.next();
                i + c.len_utf8()
            };
            spans.push(TokenSpan {
                id: fnv1a64(text[span_start..core_end].as_bytes()),
                start: span_start,
                end: core_end,
            });
            span_start = core_end;
        }
        if let Some(last) = spans.last_mut() {
            if last.end < bytes_len {
                last.end = bytes_len;
                last.id = fnv1a64(text[last.start..last.end].as_bytes());
            }
        }
        spans
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(feature = "cl100k")]
pub use cl100k::Cl100kTokenizer;

#[cfg(feature = "cl100k")]
pub const CL100K_TOKENIZER_ID: &str = "cl100k_base";

#[cfg(feature = "cl100k")]
mod cl100k {
    use super::{TokenSpan, Tokenizer};
    use std::sync::OnceLock;
    use tiktoken_rs::CoreBPE;

    /// BPE tokenizer over the cl100k_base encoding, id `cl100k_base`.
    ///
    /// Spans come from per-token decoded byte lengths; BPE tokens partition
    /// the input bytes, so the offsets map directly onto the text. A token
    /// whose boundary would split a multi-byte character is merged into the
    /// following span (the span keeps the first token's id and counts as one
    /// token). This never happens for ASCII text, where span counts equal
    /// the encoder's token counts.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct Cl100kTokenizer;

    fn bpe() -> &'static CoreBPE {
        static BPE: OnceLock<CoreBPE> = OnceLock::new();
        BPE.get_or_init(|| tiktoken_rs::cl100k_base().expect("embedded cl100k vocabulary loads"))
    }

    impl Tokenizer for Cl100kTokenizer {
        fn id(&self) -> &str {
            super::CL100K_TOKENIZER_ID
        }

        fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
            let enc = bpe();
            let ids = enc.encode_ordinary_as::<u32>(text);
            let mut spans = Vec::with_capacity(ids.len());
            let mut start = 0usize;
            let mut end = 0usize;
            let mut pending_id: Option<u64> = None;
            for (id, token_bytes) in ids.iter().zip(enc._decode_native_and_split(ids.clone())) {
                end += token_bytes.len();
                if pending_id.is_none() {
                    pending_id = Some(u64::from(*id));
                }
                if text.is_char_boundary(end) {
                    spans.push(TokenSpan {
                        id: pending_id.take().expect("pending id set above"),
                        start,
                        end,
                    });
                    start = end;
                }
            }
            debug_assert_eq!(end, text.len());
            spans
        }
    }
}

/// Resolves a manifest tokenizer id to an implementation.
pub fn resolve(id: &str) -> Result<Arc<dyn Tokenizer>> {
    match id {
        WORD_TOKENIZER_ID => Ok(Arc::new(WordTokenizer)),
        #[cfg(feature = "cl100k")]
        CL100K_TOKENIZER_ID => Ok(Arc::new(Cl100kTokenizer)),
        _ => Err(Error::UnknownTokenizer { id: id.to_string() }),
    }
}
