//! QA dataset loading, batch evaluation, and the Coverage / exact-match /
//! token-F1 metrics.
//!
//! All three metrics share one normalization (lowercase, drop
//! non-alphanumeric characters, strip the articles a/an/the as whole words,
//! collapse whitespace), the long-standing convention for extractive QA
//! scoring. Coverage asks whether any normalized gold answer appears as a
//! substring of the normalized retrieved context; EM and F1 compare a
//! generated answer against the golds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{Embedding, EmbeddingProvider};
use crate::error::{io_at, Error, Result};
use crate::gateway::{Gateway, Stage};
use crate::indexer::{GraphIndex, IndexConfig};
use crate::retrieval::{assemble_prompt, RetrievalConfig};

pub const ANSWER_SYSTEM_PROMPT: &str =
    "You answer questions strictly from the provided context.";
pub const ANSWER_PROMPT_TEMPLATE: &str = include_str!("../data/prompts/answer_generation.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    /// Gold answers; at least one, none empty.
    pub answers: Vec<String>,
}

impl QaInstance {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Eval("instance id must be non-empty".into()));
        }
        if self.answers.is_empty() || self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err(Error::Eval(format!(
                "instance {}: gold answers must be a non-empty list of non-empty strings",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// JSON lines: `{"id", "question", "answers": [...]}`.
    Internal,
    Musique,
    Hotpotqa,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DatasetFormat::Internal => "internal",
            DatasetFormat::Musique => "musique",
            DatasetFormat::Hotpotqa => "hotpotqa",
        };
        f.write_str(name)
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "internal" => Ok(DatasetFormat::Internal),
            "musique" => Ok(DatasetFormat::Musique),
            "hotpotqa" => Ok(DatasetFormat::Hotpotqa),
            other => Err(Error::Eval(format!(
                "unknown dataset format '{other}' (expected internal, musique, or hotpotqa)"
            ))),
        }
    }
}

/// Splits a dataset file into row values. Accepts JSON lines or a single
/// top-level JSON array (the shape HotpotQA ships in).
fn dataset_rows(text: &str) -> Result<Vec<Value>> {
    if text.trim_start().starts_with('[') {
        let rows: Vec<Value> = serde_json::from_str(text)
            .map_err(|e| Error::Eval(format!("dataset array: {e}")))?;
        return Ok(rows);
    }
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Eval(format!("dataset line {}: {e}", i + 1)))
        })
        .collect()
}

fn required_str<'v>(row: &'v Value, field: &str, at: &str) -> Result<&'v str> {
    row.get(field)
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Error::Eval(format!("{at}: missing or empty field '{field}'")))
}

fn adapt_row(row: &Value, format: DatasetFormat, ordinal: usize) -> Result<QaInstance> {
    let at = format!("row {ordinal}");
    let instance = match format {
        DatasetFormat::Internal => {
            let answers = row
                .get("answers")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Eval(format!("{at}: missing field 'answers'")))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Eval(format!("{at}: answers must be strings")))
                })
                .collect::<Result<Vec<_>>>()?;
            QaInstance {
                id: required_str(row, "id", &at)?.to_string(),
                question: required_str(row, "question", &at)?.to_string(),
                answers,
            }
        }
        DatasetFormat::Musique => {
            let mut answers = vec![required_str(row, "answer", &at)?.to_string()];
            if let Some(aliases) = row.get("answer_aliases").and_then(Value::as_array) {
                for alias in aliases.iter().filter_map(Value::as_str) {
                    if !alias.trim().is_empty() && !answers.iter().any(|a| a == alias) {
                        answers.push(alias.to_string());
                    }
                }
            }
            QaInstance {
                id: required_str(row, "id", &at)?.to_string(),
                question: required_str(row, "question", &at)?.to_string(),
                answers,
            }
        }
        DatasetFormat::Hotpotqa => QaInstance {
            id: required_str(row, "_id", &at)?.to_string(),
            question: required_str(row, "question", &at)?.to_string(),
            answers: vec![required_str(row, "answer", &at)?.to_string()],
        },
    };
    instance.validate()?;
    Ok(instance)
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Vec<QaInstance>> {
    dataset_rows(text)?
        .iter()
        .enumerate()
        .map(|(i, row)| adapt_row(row, format, i + 1))
        .collect()
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QaInstance>> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    parse_dataset(&text, format)
}

/// Pulls the evidence paragraphs out of a dataset file as `(doc_id, text)`
/// pairs suitable for indexing. Paragraphs repeated across instances are
/// emitted once (first occurrence wins).
pub fn extract_paragraphs(text: &str, format: DatasetFormat) -> Result<Vec<(String, String)>> {
    let mut docs: Vec<(String, String)> = Vec::new();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    let mut push = |doc_id: String, body: String| {
        if !body.trim().is_empty() && seen.insert(body.clone(), ()).is_none() {
            docs.push((doc_id, body));
        }
    };

    for (i, row) in dataset_rows(text)?.iter().enumerate() {
        let at = format!("row {}", i + 1);
        match format {
            DatasetFormat::Internal => {
                let id = required_str(row, "id", &at)?;
                if let Some(paragraphs) = row.get("paragraphs").and_then(Value::as_array) {
                    for (j, p) in paragraphs.iter().enumerate() {
                        let body = p.as_str().ok_or_else(|| {
                            Error::Eval(format!("{at}: paragraphs must be strings"))
                        })?;
                        push(format!("{id}:{j}"), body.to_string());
                    }
                }
            }
            DatasetFormat::Musique => {
                let id = required_str(row, "id", &at)?;
                let paragraphs = row
                    .get("paragraphs")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::Eval(format!("{at}: missing field 'paragraphs'")))?;
                for (j, p) in paragraphs.iter().enumerate() {
                    let body = required_str(p, "paragraph_text", &at)?;
                    let title = p.get("title").and_then(Value::as_str).unwrap_or("");
                    let idx = p.get("idx").and_then(Value::as_u64).unwrap_or(j as u64);
                    let text = if title.is_empty() {
                        body.to_string()
                    } else {
                        format!("{title}\n{body}")
                    };
                    push(format!("{id}:{idx}"), text);
                }
            }
            DatasetFormat::Hotpotqa => {
                let id = required_str(row, "_id", &at)?;
                let context = row
                    .get("context")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::Eval(format!("{at}: missing field 'context'")))?;
                for entry in context {
                    let pair = entry
                        .as_array()
                        .filter(|a| a.len() == 2)
                        .ok_or_else(|| Error::Eval(format!("{at}: context entries must be [title, sentences]")))?;
                    let title = pair[0].as_str().unwrap_or("untitled");
                    let sentences: Vec<&str> = pair[1]
                        .as_array()
                        .map(|s| s.iter().filter_map(Value::as_str).collect())
                        .unwrap_or_default();
                    push(format!("{id}:{title}"), sentences.join(" "));
                }
            }
        }
    }
    Ok(docs)
}

/// Shared metric normalization: lowercase, drop every character that is
/// neither alphanumeric nor whitespace, remove the articles a/an/the as
/// whole words, and collapse runs of whitespace to single spaces.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 if any normalized gold answer occurs as a substring of the normalized
/// context, else 0.
pub fn coverage(context: &str, golds: &[String]) -> f64 {
    let haystack = normalize_answer(context);
    let hit = golds.iter().any(|g| haystack.contains(&normalize_answer(g)));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// 1 if the normalized prediction equals any normalized gold, else 0.
pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let normalized = normalize_answer(prediction);
    let hit = golds.iter().any(|g| normalize_answer(g) == normalized);
    if hit {
        1.0
    } else {
        0.0
    }
}

fn word_bag(text: &str) -> BTreeMap<String, usize> {
    let mut bag = BTreeMap::new();
    for word in normalize_answer(text).split_whitespace() {
        *bag.entry(word.to_string()).or_insert(0) += 1;
    }
    bag
}

fn f1_single(prediction: &BTreeMap<String, usize>, gold: &str) -> f64 {
    let gold_bag = word_bag(gold);
    let pred_total: usize = prediction.values().sum();
    let gold_total: usize = gold_bag.values().sum();
    if pred_total == 0 || gold_total == 0 {
        return if pred_total == gold_total { 1.0 } else { 0.0 };
    }
    let overlap: usize = prediction
        .iter()
        .map(|(word, &count)| count.min(*gold_bag.get(word).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_total as f64;
    let recall = overlap as f64 / gold_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-level F1 over the gold answers, on normalized word multisets.
pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    let pred_bag = word_bag(prediction);
    golds.iter().map(|g| f1_single(&pred_bag, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub retrieval: RetrievalConfig,
    /// When set, each instance additionally makes one generation call and
    /// EM/F1 are scored; otherwise the run is retrieval-only (Coverage).
    pub generate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { retrieval: RetrievalConfig::default(), generate: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub coverage: Option<f64>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub context_tokens: usize,
    pub latency_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub coverage: Option<f64>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub retrieval: RetrievalConfig,
    pub generate: bool,
    pub index: IndexConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub per_instance: Vec<InstanceResult>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(io_at(path))
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

fn eval_instance(
    index: &GraphIndex,
    instance: &QaInstance,
    query: &Embedding,
    cfg: &EvalConfig,
    gateway: Option<&Gateway>,
) -> InstanceResult {
    let start = Instant::now();
    let mut result = InstanceResult {
        id: instance.id.clone(),
        coverage: None,
        em: None,
        f1: None,
        context_tokens: 0,
        latency_ms: 0,
        answer: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let context = index.retrieve(query, &cfg.retrieval)?;
        result.context_tokens = context.total_tokens;
        result.coverage = Some(coverage(&context.concat(), &instance.answers));
        if cfg.generate {
            let gateway = gateway
                .ok_or_else(|| Error::Config("generation mode needs a gateway".into()))?;
            let prompt = assemble_prompt(&context, &instance.question, ANSWER_PROMPT_TEMPLATE)?;
            let (answer, _) = gateway.chat_complete(Stage::Generation, ANSWER_SYSTEM_PROMPT, &prompt)?;
            result.em = Some(exact_match(&answer, &instance.answers));
            result.f1 = Some(token_f1(&answer, &instance.answers));
            result.answer = Some(answer);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        result.error = Some(e.to_string());
    }
    result.latency_ms = start.elapsed().as_millis() as u64;
    result
}

/// Evaluates every instance against the index, recording failures per
/// instance rather than aborting. Questions are embedded in one batch up
/// front; in generation mode instances run concurrently up to the
/// gateway's concurrency bound, and the report order always follows the
/// dataset order.
pub fn run_eval(
    index: &GraphIndex,
    instances: &[QaInstance],
    cfg: &EvalConfig,
    provider: &dyn EmbeddingProvider,
    gateway: Option<&Gateway>,
) -> Result<EvalReport> {
    cfg.retrieval.validate()?;
    if cfg.generate && gateway.is_none() {
        return Err(Error::Config("generation mode needs a gateway".into()));
    }
    for instance in instances {
        instance.validate()?;
    }
    let questions: Vec<&str> = instances.iter().map(|i| i.question.as_str()).collect();
    let queries = if instances.is_empty() { Vec::new() } else { provider.embed_batch(&questions)? };

    let workers = if cfg.generate {
        gateway.map_or(1, |g| g.config().max_concurrency).clamp(1, instances.len().max(1))
    } else {
        1
    };
    let mut results: Vec<Option<InstanceResult>> = vec![None; instances.len()];
    if workers <= 1 {
        for (slot, (instance, query)) in results.iter_mut().zip(instances.iter().zip(&queries)) {
            *slot = Some(eval_instance(index, instance, query, cfg, gateway));
        }
    } else {
        let cursor = AtomicUsize::new(0);
        let shared = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::Relaxed);
                    if i >= instances.len() {
                        break;
                    }
                    let result = eval_instance(index, &instances[i], &queries[i], cfg, gateway);
                    shared.lock().unwrap()[i] = Some(result);
                });
            }
        });
    }
    let per_instance: Vec<InstanceResult> =
        results.into_iter().map(|r| r.expect("every slot filled")).collect();

    let aggregates = Aggregates {
        coverage: mean_of(per_instance.iter().map(|r| r.coverage)),
        em: mean_of(per_instance.iter().map(|r| r.em)),
        f1: mean_of(per_instance.iter().map(|r| r.f1)),
    };
    Ok(EvalReport {
        config: ReportConfig {
            retrieval: cfg.retrieval.clone(),
            generate: cfg.generate,
            index: index.manifest.config.clone(),
        },
        per_instance,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_stopwords;
    use crate::embedding::HashEmbedder;
    use crate::extraction::MockExtractor;
    use crate::gateway::{GatewayConfig, HttpResponse, ScriptedTransport};
    use crate::indexer::build_index;
    use crate::tokenizer::WordTokenizer;
    use std::sync::Arc;

    fn golds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_lowercases_and_drops_punctuation() {
        assert_eq!(normalize_answer("U.S."), "us");
        assert_eq!(normalize_answer("Paris."), "paris");
        assert_eq!(normalize_answer("rock-'n'-roll!"), "rocknroll");
    }

    #[test]
    fn normalization_strips_articles_as_whole_words_only() {
        assert_eq!(normalize_answer("The Eiffel Tower"), "eiffel tower");
        assert_eq!(normalize_answer("a an the"), "");
        assert_eq!(normalize_answer("another theater anthem"), "another theater anthem");
    }

    #[test]
    fn normalization_collapses_whitespace() {
        assert_eq!(normalize_answer("  one\t two \n three  "), "one two three");
    }

    #[test]
    fn normalization_is_idempotent() {
        for s in ["The U.S. of A.", "  a b  c ", "Ångström's constant", ""] {
            let once = normalize_answer(s);
            assert_eq!(normalize_answer(&once), once);
        }
    }

    #[test]
    fn exact_match_handles_punctuation_and_articles() {
        assert_eq!(exact_match("paris.", &golds(&["Paris"])), 1.0);
        assert_eq!(exact_match("the Eiffel Tower", &golds(&["Eiffel Tower"])), 1.0);
        assert_eq!(exact_match("Eiffel", &golds(&["Eiffel Tower"])), 0.0);
    }

    #[test]
    fn exact_match_takes_best_gold() {
        assert_eq!(exact_match("Rome", &golds(&["Milan", "rome!"])), 1.0);
        assert_eq!(exact_match("Rome", &golds(&["Milan", "Turin"])), 0.0);
    }

    #[test]
    fn f1_identical_and_disjoint() {
        assert_eq!(token_f1("Marie Curie", &golds(&["Marie Curie"])), 1.0);
        assert_eq!(token_f1("oxygen", &golds(&["helium"])), 0.0);
    }

    #[test]
    fn f1_half_overlap_is_harmonic_mean() {
        // bags {x, b} vs {b, z}: overlap 1, precision 1/2, recall 1/2
        assert_eq!(token_f1("x b", &golds(&["b z"])), 0.5);
    }

    #[test]
    fn f1_small_bags_shrink_under_article_stripping() {
        // "a" is an article, so the prediction bag is just {b}:
        // precision 1, recall 1/2, F1 = 2/3
        let f1 = token_f1("a b", &golds(&["b c"]));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_counts_repeated_words_as_multisets() {
        // {b: 2} vs {b: 1}: overlap 1, precision 1/2, recall 1 → 2/3
        let f1 = token_f1("b b", &golds(&["b"]));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_takes_best_gold() {
        let f1 = token_f1("blue whale", &golds(&["red fox", "blue whale", "whale"]));
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn empty_after_normalization_edge_cases() {
        assert_eq!(token_f1("the", &golds(&["an"])), 1.0, "both sides empty");
        assert_eq!(exact_match("the", &golds(&["an"])), 1.0);
        assert_eq!(token_f1("", &golds(&["paris"])), 0.0, "one side empty");
        assert_eq!(token_f1("paris", &golds(&["the"])), 0.0);
    }

    #[test]
    fn exact_match_implies_perfect_f1() {
        let cases = [("The U.S.", "US"), ("paris.", "Paris"), ("a cat", "cat")];
        for (pred, gold) in cases {
            let golds = golds(&[gold]);
            assert_eq!(exact_match(pred, &golds), 1.0);
            assert_eq!(token_f1(pred, &golds), 1.0);
        }
    }

    #[test]
    fn coverage_is_substring_containment() {
        assert_eq!(coverage("They met in Paris, France, in May.", &golds(&["Paris"])), 1.0);
        assert_eq!(coverage("They met in London.", &golds(&["Paris"])), 0.0);
    }

    #[test]
    fn coverage_bridges_punctuation_differences() {
        assert_eq!(coverage("relations with the US improved", &golds(&["U.S."])), 1.0);
        assert_eq!(coverage("the u.s. economy grew", &golds(&["US"])), 1.0);
    }

    #[test]
    fn coverage_is_monotone_under_whitespace_append() {
        let golds = golds(&["Eiffel Tower"]);
        let base = "the Eiffel Tower opened in 1889";
        assert_eq!(coverage(base, &golds), 1.0);
        for suffix in ["and more", "a an the", "unrelated words entirely"] {
            let grown = format!("{base} {suffix}");
            assert_eq!(coverage(&grown, &golds), 1.0, "appending '{suffix}' flipped coverage");
        }
    }

    #[test]
    fn internal_rows_parse_and_validate() {
        let text = r#"{"id": "q1", "question": "Who?", "answers": ["Alice", "Alice Smith"]}
{"id": "q2", "question": "Where?", "answers": ["Paris"]}"#;
        let instances = parse_dataset(text, DatasetFormat::Internal).unwrap();
        assert_eq!(instances.len(), 2);
        assert_eq!(instances[0].answers.len(), 2);

        let empty_answers = r#"{"id": "q1", "question": "Who?", "answers": []}"#;
        assert!(parse_dataset(empty_answers, DatasetFormat::Internal).is_err());
        let missing_id = r#"{"question": "Who?", "answers": ["x"]}"#;
        assert!(parse_dataset(missing_id, DatasetFormat::Internal).is_err());
        let blank_gold = r#"{"id": "q", "question": "Who?", "answers": ["  "]}"#;
        assert!(parse_dataset(blank_gold, DatasetFormat::Internal).is_err());
    }

    #[test]
    fn musique_rows_adapt_answers_and_paragraphs() {
        let text = r#"{"id": "m1", "question": "Q?", "answer": "Rome", "answer_aliases": ["Roma", "", "Rome"], "paragraphs": [{"idx": 0, "title": "T0", "paragraph_text": "First body."}, {"idx": 1, "title": "", "paragraph_text": "Second body."}]}"#;
        let instances = parse_dataset(text, DatasetFormat::Musique).unwrap();
        assert_eq!(instances[0].answers, vec!["Rome".to_string(), "Roma".to_string()]);

        let docs = extract_paragraphs(text, DatasetFormat::Musique).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0], ("m1:0".to_string(), "T0\nFirst body.".to_string()));
        assert_eq!(docs[1], ("m1:1".to_string(), "Second body.".to_string()));
    }

    #[test]
    fn hotpot_array_shape_adapts_and_dedups_paragraphs() {
        let text = r#"[
            {"_id": "h1", "question": "Q1?", "answer": "yes",
             "context": [["Doc A", ["Sentence one.", "Sentence two."]]]},
            {"_id": "h2", "question": "Q2?", "answer": "no",
             "context": [["Doc A", ["Sentence one.", "Sentence two."]], ["Doc B", ["Other."]]]}
        ]"#;
        let instances = parse_dataset(text, DatasetFormat::Hotpotqa).unwrap();
        assert_eq!(instances.len(), 2);
        assert_eq!(instances[0].id, "h1");
        assert_eq!(instances[0].answers, vec!["yes".to_string()]);

        let docs = extract_paragraphs(text, DatasetFormat::Hotpotqa).unwrap();
        assert_eq!(docs.len(), 2, "repeated paragraph emitted once");
        assert_eq!(docs[0], ("h1:Doc A".to_string(), "Sentence one. Sentence two.".to_string()));
        assert_eq!(docs[1], ("h2:Doc B".to_string(), "Other.".to_string()));
    }

    #[test]
    fn format_names_round_trip() {
        for format in [DatasetFormat::Internal, DatasetFormat::Musique, DatasetFormat::Hotpotqa] {
            assert_eq!(format.to_string().parse::<DatasetFormat>().unwrap(), format);
        }
        assert!("csv".parse::<DatasetFormat>().is_err());
    }

    fn fixture_index() -> GraphIndex {
        let docs = vec![
            (
                "d0".to_string(),
                "Amelia Stone founded the Harbor Observatory in 1901. The observatory tracked \
                 comets over the bay. Sailors used its reports to plan voyages every season."
                    .to_string(),
            ),
            (
                "d1".to_string(),
                "Bruno Keller mapped the Silverpine Caves. The caves held rare blind fish. \
                 Divers followed his charts through flooded tunnels to reach the deep galleries."
                    .to_string(),
            ),
        ];
        let cfg = crate::indexer::IndexConfig {
            chunk_tokens: 14,
            split_depth: 1,
            knn_k: 2,
            core_fraction: 1.0,
            ..Default::default()
        };
        let provider = HashEmbedder::new(16);
        build_index(
            &docs,
            &cfg,
            default_stopwords(),
            &WordTokenizer,
            &provider,
            &MockExtractor::new(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn retrieval_only_eval_scores_coverage_and_repeats_exactly() {
        let index = fixture_index();
        let provider = HashEmbedder::new(16);
        let instances = vec![
            QaInstance {
                id: "q0".into(),
                question: "Who founded the Harbor Observatory?".into(),
                answers: vec!["Amelia Stone".into()],
            },
            QaInstance {
                id: "q1".into(),
                question: "Who mapped the Silverpine Caves?".into(),
                answers: vec!["Bruno Keller".into()],
            },
            QaInstance {
                id: "q2".into(),
                question: "What color is the moon?".into(),
                answers: vec!["plaid zebra nonsense".into()],
            },
        ];
        let cfg = EvalConfig {
            retrieval: RetrievalConfig { budget: 120, skeleton_ratio: 0.4, k_seed: 4 },
            generate: false,
        };
        let report = run_eval(&index, &instances, &cfg, &provider, None).unwrap();
        assert_eq!(report.per_instance.len(), 3);
        assert_eq!(report.per_instance[2].coverage, Some(0.0), "absent gold never covered");
        assert!(report.per_instance.iter().all(|r| r.em.is_none() && r.f1.is_none()));
        assert!(report.per_instance.iter().all(|r| r.context_tokens <= 120));
        assert_eq!(report.aggregates.em, None);

        let mean = report.per_instance.iter().filter_map(|r| r.coverage).sum::<f64>() / 3.0;
        assert!((report.aggregates.coverage.unwrap() - mean).abs() < 1e-9);

        let mut again = run_eval(&index, &instances, &cfg, &provider, None).unwrap();
        for (a, b) in again.per_instance.iter_mut().zip(&report.per_instance) {
            a.latency_ms = b.latency_ms;
        }
        assert_eq!(again, report);
    }

    fn answering_gateway(answers: Vec<&'static str>) -> Gateway {
        let transport = ScriptedTransport::with_responder(move |_req, i| {
            let content = answers.get(i).copied().unwrap_or("unknown");
            if content == "FAIL" {
                return HttpResponse {
                    status: 400,
                    body: serde_json::json!({"error": {"message": "bad request"}}).to_string(),
                };
            }
            HttpResponse {
                status: 200,
                body: serde_json::json!({
                    "choices": [{"message": {"content": content}}],
                    "usage": {"prompt_tokens": 10, "completion_tokens": 2}
                })
                .to_string(),
            }
        });
        let cfg = GatewayConfig { max_concurrency: 1, ..GatewayConfig::default() };
        Gateway::new(cfg, Arc::new(transport)).unwrap()
    }

    #[test]
    fn generation_mode_scores_em_f1_and_records_failures() {
        let index = fixture_index();
        let provider = HashEmbedder::new(16);
        let instances = vec![
            QaInstance {
                id: "q0".into(),
                question: "Who founded the Harbor Observatory?".into(),
                answers: vec!["Amelia Stone".into()],
            },
            QaInstance {
                id: "q1".into(),
                question: "Who mapped the caves?".into(),
                answers: vec!["Bruno Keller".into()],
            },
        ];
        let gateway = answering_gateway(vec!["Amelia Stone", "FAIL"]);
        let cfg = EvalConfig {
            retrieval: RetrievalConfig { budget: 120, skeleton_ratio: 0.4, k_seed: 4 },
            generate: true,
        };
        let report = run_eval(&index, &instances, &cfg, &provider, Some(&gateway)).unwrap();

        let first = &report.per_instance[0];
        assert_eq!(first.em, Some(1.0));
        assert_eq!(first.f1, Some(1.0));
        assert_eq!(first.answer.as_deref(), Some("Amelia Stone"));
        assert!(first.error.is_none());

        let second = &report.per_instance[1];
        assert!(second.error.is_some(), "generation failure recorded, not fatal");
        assert_eq!(second.em, None);

        // aggregates average only the instances that produced values
        assert_eq!(report.aggregates.em, Some(1.0));
        assert_eq!(report.aggregates.f1, Some(1.0));
    }

    #[test]
    fn generation_without_gateway_is_a_config_error() {
        let index = fixture_index();
        let provider = HashEmbedder::new(16);
        let cfg = EvalConfig { generate: true, ..EvalConfig::default() };
        assert!(matches!(
            run_eval(&index, &[], &cfg, &provider, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_dataset_yields_null_aggregates() {
        let index = fixture_index();
        let provider = HashEmbedder::new(16);
        let report = run_eval(&index, &[], &EvalConfig::default(), &provider, None).unwrap();
        assert!(report.per_instance.is_empty());
        assert_eq!(report.aggregates, Aggregates::default());
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["aggregates"]["coverage"], serde_json::Value::Null);
    }

    #[test]
    fn report_round_trips_through_json() {
        let index = fixture_index();
        let provider = HashEmbedder::new(16);
        let instances = vec![QaInstance {
            id: "q0".into(),
            question: "Who founded the Harbor Observatory?".into(),
            answers: vec!["Amelia Stone".into()],
        }];
        let report =
            run_eval(&index, &instances, &EvalConfig::default(), &provider, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let loaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded, report);
    }
}
