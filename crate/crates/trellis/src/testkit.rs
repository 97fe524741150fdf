//! Deterministic synthetic corpora for tests, benchmarks, and the
//! acceptance suite.
//!
//! Two generators: [`synthetic_docs`] emits topic-flavored filler text with
//! an exact token count per document (a word-tokenizer token is a
//! whitespace-separated word, so chunk counts are fully predictable), and
//! [`planted_corpus`] additionally buries one unique verifiable fact per
//! document and returns the matching QA instances. Everything is seeded;
//! the same seed always reproduces the same bytes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{io_at, Result};
use crate::evalkit::QaInstance;

const FIRST_NAMES: [&str; 32] = [
    "Amelia", "Bruno", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Iris", "Jonas",
    "Katya", "Lorenzo", "Mira", "Nadia", "Oskar", "Petra", "Quentin", "Rosa", "Stefan", "Talia",
    "Ulric", "Vera", "Wilhelm", "Xenia", "Yusuf", "Zelda", "Anton", "Beatrix", "Casimir",
    "Delphine", "Emil", "Fiona",
];

const LAST_NAMES: [&str; 32] = [
    "Stone", "Keller", "Moreau", "Ivanov", "Marsh", "Adler", "Lindqvist", "Baptiste", "Calder",
    "Novak", "Orlov", "Ferrante", "Halloran", "Petrov", "Winters", "Abandonato", "Reyes",
    "Solberg", "Takacs", "Ullman", "Vance", "Whitfield", "Xanthos", "Ybarra", "Zeller", "Arkwright",
    "Bellamy", "Crane", "Dunmore", "Eastwood", "Fairbanks", "Grimaldi",
];

const PLACE_ADJECTIVES: [&str; 32] = [
    "Harbor", "Silverpine", "Copperfield", "Northgate", "Willowbrook", "Stonebridge", "Larkspur",
    "Greyhaven", "Maplewood", "Ironcliff", "Saltmarsh", "Thornfield", "Ashgrove", "Brightwater",
    "Cedarholm", "Duskmere", "Elmsworth", "Foxglove", "Gildenrow", "Hollowell", "Icefall",
    "Juniper", "Kestrel", "Lanternview", "Mistvale", "Nightingale", "Oakhurst", "Pinnacle",
    "Quarrystone", "Ravenwood", "Summerlake", "Tidewater",
];

const PLACE_NOUNS: [&str; 16] = [
    "Observatory", "Caves", "Lighthouse", "Aqueduct", "Gardens", "Archive", "Foundry",
    "Planetarium", "Viaduct", "Conservatory", "Mill", "Causeway", "Amphitheater", "Reservoir",
    "Arboretum", "Cannery",
];

const VERBS: [&str; 8] =
    ["founded", "mapped", "restored", "surveyed", "designed", "charted", "excavated", "catalogued"];

/// Lowercase filler vocabulary. Shared across documents so the chunk KNN
/// graph has lexical overlap to work with; none of it is capitalized, so
/// the mock extractor sees only the planted names.
const FILLER_WORDS: [&str; 48] = [
    "harvest", "records", "ledger", "seasons", "granite", "timber", "lantern", "voyage", "market",
    "stonework", "river", "barges", "charts", "signal", "winter", "garden", "archway", "cellar",
    "compass", "quarry", "brine", "meadow", "orchard", "ferry", "toll", "bridge", "mill",
    "harbor", "beacon", "survey", "parchment", "ink", "costs", "masonry", "rainfall", "storms",
    "freight", "canal", "dock", "warehouse", "rope", "sail", "anchor", "tide", "current",
    "depth", "chart", "traders",
];

fn filler_sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    let picked: Vec<&str> = (0..words.max(1))
        .map(|_| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())])
        .collect();
    format!("{}.", picked.join(" "))
}

/// One verifiable planted statement and the question that probes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedFact {
    pub doc_id: String,
    pub subject: String,
    pub place: String,
    pub sentence: String,
    pub question: String,
}

fn make_fact(ordinal: usize, rng: &mut ChaCha8Rng, doc_id: &str) -> PlantedFact {
    let subject = format!(
        "{} {}",
        FIRST_NAMES[ordinal % FIRST_NAMES.len()],
        LAST_NAMES[(ordinal * 7 + ordinal / FIRST_NAMES.len()) % LAST_NAMES.len()]
    );
    let place = format!(
        "{} {}",
        PLACE_ADJECTIVES[ordinal % PLACE_ADJECTIVES.len()],
        PLACE_NOUNS[(ordinal * 5 + ordinal / PLACE_ADJECTIVES.len()) % PLACE_NOUNS.len()]
    );
    let verb = VERBS[rng.random_range(0..VERBS.len())];
    let year = 1850 + rng.random_range(0..150);
    PlantedFact {
        doc_id: doc_id.to_string(),
        sentence: format!("{subject} {verb} the {place} in {year}."),
        question: format!("Who {verb} the {place}?"),
        subject,
        place,
    }
}

/// `n_docs` documents of exactly `tokens_per_doc` word-tokenizer tokens
/// each (a sentence of w words costs w+1 tokens: the words plus its
/// period), built from the shared filler vocabulary.
pub fn synthetic_docs(n_docs: usize, tokens_per_doc: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let mut parts: Vec<String> = Vec::new();
            let mut remaining = tokens_per_doc;
            while remaining > 0 {
                if remaining == 1 {
                    parts.push(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string());
                    remaining = 0;
                } else {
                    let words = rng.random_range(6..=12).min(remaining - 1);
                    parts.push(filler_sentence(&mut rng, words));
                    remaining -= words + 1;
                }
            }
            (format!("doc{i:03}"), parts.join(" "))
        })
        .collect()
}

/// A corpus where document `i` contains one unique fact sentence among
/// filler, plus the QA instances asking for each fact's subject. Gold
/// answers are full names that appear verbatim only in their own document.
pub fn planted_corpus(n_docs: usize, seed: u64) -> (Vec<(String, String)>, Vec<QaInstance>) {
    let facts = planted_facts(n_docs, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let docs = facts
        .iter()
        .map(|fact| {
            let filler_count = rng.random_range(3..=5);
            let mut sentences: Vec<String> = (0..filler_count)
                .map(|_| {
                    let len = rng.random_range(8..=14);
                    filler_sentence(&mut rng, len)
                })
                .collect();
            let at = rng.random_range(0..=sentences.len());
            sentences.insert(at, fact.sentence.clone());
            (fact.doc_id.clone(), sentences.join(" "))
        })
        .collect();
    let instances = facts
        .iter()
        .enumerate()
        .map(|(i, fact)| QaInstance {
            id: format!("q{i:03}"),
            question: fact.question.clone(),
            answers: vec![fact.subject.clone()],
        })
        .collect();
    (docs, instances)
}

/// The facts [`planted_corpus`] plants, in document order.
pub fn planted_facts(n_docs: usize, seed: u64) -> Vec<PlantedFact> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs).map(|i| make_fact(i, &mut rng, &format!("doc{i:03}"))).collect()
}

/// Writes `{"id", "text"}` JSON lines, the corpus shape the CLI ingests.
pub fn write_corpus_jsonl(docs: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, text) in docs {
        out.push_str(&json!({"id": id, "text": text}).to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_at(path))
}

/// Writes `{"id", "question", "answers"}` JSON lines, the internal dataset
/// shape.
pub fn write_dataset_jsonl(instances: &[QaInstance], path: &Path) -> Result<()> {
    let mut out = String::new();
    for instance in instances {
        out.push_str(
            &json!({
                "id": instance.id,
                "question": instance.question,
                "answers": instance.answers,
            })
            .to_string(),
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_at(path))
}
