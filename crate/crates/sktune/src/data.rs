//! Tokenizer, JSONL ingestion, synthetic task generators and split management.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const UNK: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<sep>", "<unk>"];

/// The three supervised task shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sequence,
    Token,
    Entailment,
}

impl TaskKind {
    pub fn class_count(&self) -> usize {
        match self {
            TaskKind::Sequence => 2,
            TaskKind::Token => 3, // BIO
            TaskKind::Entailment => 2,
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "seqcls" => Ok(TaskKind::Sequence),
            "tokcls" => Ok(TaskKind::Token),
            "nli" => Ok(TaskKind::Entailment),
            other => Err(Error::Usage(format!("unknown task {:?}", other))),
        }
    }
}

/// Whitespace-lowercase vocabulary with reserved pad/sep/unk ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

// Word list for the bundled desk-scale vocabulary: the tokens of the shipped
// prompt texts, the sentiment keywords the synthetic sequence task keys on,
// entity tokens for the tagging task and neutral filler.
const DESK_WORDS: &[&str] = &[
    "classify", "the", "sentiment", "of", "following", "text", "i", "have", "a", "piece", "and",
    "need", "to", "understand", "its", "emotional", "tone.", "could", "you", "text:",
    "considering", "context", "tone,", "can", "text?", "here's", "focus", "on", "cues", "present",
    "in", "let's", "analyze", "this", "together.", "i'll", "provide", "text,", "positive", "or",
    "negative", "love", "great", "wonderful", "amazing", "movie", "hate", "bad", "boring", "film",
    "book", "day", "was", "it", "really", "quite", "very", "paris", "london", "good", "nice",
];

/// Positive keywords for the synthetic sentiment rule.
pub const POSITIVE_KEYWORDS: [&str; 4] = ["love", "great", "wonderful", "amazing"];
/// Entity tokens for the synthetic BIO tagging rule.
pub const ENTITY_TOKENS: [&str; 2] = ["paris", "london"];
/// Candidate hypothesis tokens for the synthetic entailment rule.
pub const ENTAIL_CANDIDATES: [&str; 2] = ["paris", "london"];

impl Vocab {
    fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { token_to_id, id_to_token }
    }

    /// The fixed vocabulary bundled with the synthetic tasks; fits the
    /// reference model's 64-token budget.
    pub fn desk() -> Vocab {
        Vocab::from_words(DESK_WORDS.iter().map(|s| s.to_string()))
    }

    /// Most-frequent tokens of the corpus, ties broken lexicographically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(lines: I, max_size: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        Vocab::from_words(ranked.into_iter().take(keep).map(|(t, _)| t))
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(&t.to_lowercase()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { token_to_id, id_to_token: tokens }
    }
}

/// One supervised instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Sequence { ids: Vec<usize>, label: usize },
    Token { ids: Vec<usize>, tags: Vec<usize> },
    Entailment { premise: Vec<usize>, hypothesis: Vec<usize>, label: usize },
}

impl Example {
    pub fn task(&self) -> TaskKind {
        match self {
            Example::Sequence { .. } => TaskKind::Sequence,
            Example::Token { .. } => TaskKind::Token,
            Example::Entailment { .. } => TaskKind::Entailment,
        }
    }

    /// Model input; entailment pairs are encoded premise `<sep>` hypothesis.
    pub fn input_ids(&self) -> Vec<usize> {
        match self {
            Example::Sequence { ids, .. } | Example::Token { ids, .. } => ids.clone(),
            Example::Entailment { premise, hypothesis, .. } => {
                let mut ids = premise.clone();
                ids.push(SEP);
                ids.extend_from_slice(hypothesis);
                ids
            }
        }
    }

    /// Per-example labels: one for sequence/entailment, one per token for
    /// tagging.
    pub fn labels(&self) -> Vec<usize> {
        match self {
            Example::Sequence { label, .. } | Example::Entailment { label, .. } => vec![*label],
            Example::Token { tags, .. } => tags.clone(),
        }
    }
}

fn str_field<'v>(value: &'v serde_json::Value, key: &str, line: usize) -> Result<&'v str> {
    value
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or(Error::MalformedLine { line })
}

fn label_field(value: &serde_json::Value, task: TaskKind, line: usize) -> Result<usize> {
    let label = value
        .get("label")
        .and_then(|v| v.as_u64())
        .ok_or(Error::UnknownLabel { line })? as usize;
    if label >= task.class_count() {
        return Err(Error::UnknownLabel { line });
    }
    Ok(label)
}

/// Order-preserving JSONL parse. Line schemas:
/// sequence `{"text","label"}`, token `{"tokens":[..],"tags":[..]}`,
/// entailment `{"premise","hypothesis","label"}`.
pub fn load_jsonl(path: &Path, task: TaskKind, vocab: &Vocab) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|_| Error::MalformedLine { line: lineno })?;
        let example = match task {
            TaskKind::Sequence => Example::Sequence {
                ids: vocab.tokenize(str_field(&value, "text", lineno)?),
                label: label_field(&value, task, lineno)?,
            },
            TaskKind::Entailment => Example::Entailment {
                premise: vocab.tokenize(str_field(&value, "premise", lineno)?),
                hypothesis: vocab.tokenize(str_field(&value, "hypothesis", lineno)?),
                label: label_field(&value, task, lineno)?,
            },
            TaskKind::Token => {
                let tokens = value
                    .get("tokens")
                    .and_then(|v| v.as_array())
                    .ok_or(Error::MalformedLine { line: lineno })?;
                let tags = value
                    .get("tags")
                    .and_then(|v| v.as_array())
                    .ok_or(Error::MalformedLine { line: lineno })?;
                if tokens.len() != tags.len() {
                    return Err(Error::LengthMismatch(format!(
                        "line {}: {} tokens vs {} tags",
                        lineno,
                        tokens.len(),
                        tags.len()
                    )));
                }
                let ids = tokens
                    .iter()
                    .map(|t| t.as_str().map(|s| vocab.id(&s.to_lowercase())))
                    .collect::<Option<Vec<_>>>()
                    .ok_or(Error::MalformedLine { line: lineno })?;
                let tags = tags
                    .iter()
                    .map(|t| t.as_u64().map(|u| u as usize))
                    .collect::<Option<Vec<_>>>()
                    .ok_or(Error::MalformedLine { line: lineno })?;
                if tags.iter().any(|&t| t >= task.class_count()) {
                    return Err(Error::UnknownLabel { line: lineno });
                }
                Example::Token { ids, tags }
            }
        };
        out.push(example);
    }
    Ok(out)
}

/// Deterministic JSONL emission; inverse of [`load_jsonl`] for in-vocab text.
pub fn save_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for ex in examples {
        let value = match ex {
            Example::Sequence { ids, label } => serde_json::json!({
                "text": vocab.detokenize(ids),
                "label": label,
            }),
            Example::Token { ids, tags } => serde_json::json!({
                "tokens": ids.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>(),
                "tags": tags,
            }),
            Example::Entailment { premise, hypothesis, label } => serde_json::json!({
                "premise": vocab.detokenize(premise),
                "hypothesis": vocab.detokenize(hypothesis),
                "label": label,
            }),
        };
        writeln!(f, "{}", value)?;
    }
    Ok(())
}

fn keyword_ids(vocab: &Vocab, words: &[&str], fallback: usize) -> Vec<usize> {
    let found: Vec<usize> = words
        .iter()
        .map(|w| vocab.id(w))
        .filter(|&id| id != UNK)
        .collect();
    if !found.is_empty() {
        return found;
    }
    (RESERVED.len()..(RESERVED.len() + fallback).min(vocab.size())).collect()
}

fn noise_pool(vocab: &Vocab, excluded: &[usize]) -> Vec<usize> {
    (RESERVED.len()..vocab.size())
        .filter(|id| !excluded.contains(id))
        .collect()
}

/// The labeling rule of the synthetic sentiment task: positive iff any
/// designated keyword appears.
pub fn seqcls_rule_label(ids: &[usize], vocab: &Vocab) -> usize {
    let keywords = keyword_ids(vocab, &POSITIVE_KEYWORDS, 4);
    usize::from(ids.iter().any(|id| keywords.contains(id)))
}

/// The labeling rule of the synthetic tagging task: B on an entity token that
/// starts a run, I on one that continues it, O elsewhere.
pub fn token_rule_tags(ids: &[usize], vocab: &Vocab) -> Vec<usize> {
    let entities = keyword_ids(vocab, &ENTITY_TOKENS, 2);
    let mut tags = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if entities.contains(id) {
            let continues = i > 0 && entities.contains(&ids[i - 1]);
            tags.push(if continues { 2 } else { 1 });
        } else {
            tags.push(0);
        }
    }
    tags
}

/// The labeling rule of the synthetic entailment task: entail iff every
/// hypothesis token appears in the premise.
pub fn nli_rule_label(premise: &[usize], hypothesis: &[usize]) -> usize {
    usize::from(hypothesis.iter().all(|t| premise.contains(t)))
}

/// Deterministic, label-balanced, linearly learnable synthetic examples.
pub fn gen_synthetic(task: TaskKind, n: usize, seed: u64, vocab: &Vocab) -> Vec<Example> {
    let mut r = rng::seeded(seed);
    let positives = keyword_ids(vocab, &POSITIVE_KEYWORDS, 4);
    let entities = keyword_ids(vocab, &ENTITY_TOKENS, 2);
    let mut excluded = positives.clone();
    excluded.extend_from_slice(&entities);
    let noise = noise_pool(vocab, &excluded);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let ex = match task {
            TaskKind::Sequence => {
                // positives are keyword-dense (half the positions) so the
                // presence rule stays linearly separable from a mean-pooled
                // frozen representation
                let len = r.gen_range(4..=8);
                let mut ids: Vec<usize> =
                    (0..len).map(|_| noise[r.gen_range(0..noise.len())]).collect();
                if label == 1 {
                    let mut slots: Vec<usize> = (0..len).collect();
                    rng::shuffle(&mut r, &mut slots);
                    for &at in slots.iter().take((len / 2).max(1)) {
                        ids[at] = positives[r.gen_range(0..positives.len())];
                    }
                }
                Example::Sequence { ids, label }
            }
            TaskKind::Token => {
                let len = r.gen_range(5..=9);
                let mut ids: Vec<usize> =
                    (0..len).map(|_| noise[r.gen_range(0..noise.len())]).collect();
                // single-token entities, with an occasional adjacent pair so
                // the continuation tag stays populated
                let span = if r.gen_range(0..8) == 0 { 2usize.min(len) } else { 1 };
                let at = r.gen_range(0..=len - span);
                for p in at..at + span {
                    ids[p] = entities[r.gen_range(0..entities.len())];
                }
                let tags = token_rule_tags(&ids, vocab);
                Example::Token { ids, tags }
            }
            TaskKind::Entailment => {
                // the hypothesis is one candidate token; an entailed premise
                // repeats it over half its positions, a non-entailed premise
                // is noise only (candidates never occur as noise)
                let candidates = keyword_ids(vocab, &ENTAIL_CANDIDATES, 2);
                let len = r.gen_range(4..=6);
                let mut premise: Vec<usize> =
                    (0..len).map(|_| noise[r.gen_range(0..noise.len())]).collect();
                let w = candidates[r.gen_range(0..candidates.len())];
                if label == 1 {
                    let mut slots: Vec<usize> = (0..len).collect();
                    rng::shuffle(&mut r, &mut slots);
                    for &at in slots.iter().take((len / 2).max(1)) {
                        premise[at] = w;
                    }
                }
                Example::Entailment { premise, hypothesis: vec![w], label }
            }
        };
        out.push(ex);
    }
    out
}

/// Seeded shuffle followed by contiguous cuts at the cumulative fractions.
pub fn split(
    examples: &[Example],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions);
    }
    let mut shuffled: Vec<Example> = examples.to_vec();
    let mut r = rng::seeded(seed);
    rng::shuffle(&mut r, &mut shuffled);
    let n = shuffled.len();
    let c1 = ((ft * n as f64).round() as usize).min(n);
    let c2 = (((ft + fv) * n as f64).round() as usize).clamp(c1, n);
    let test = shuffled.split_off(c2);
    let val = shuffled.split_off(c1);
    Ok((shuffled, val, test))
}

/// Sequences of a seeded 4-gram language: the next token is a fixed affine
/// function of the previous three, with a 10% uniform noise floor and a copy
/// rule that repeats the token five positions back a quarter of the time.
/// The language lives on a seeded 16-token active subset of `3..vocab_size`,
/// so its statistics are compressible at desk scale; the copy rule pushes
/// pretraining toward token-matching attention.
pub fn synthetic_lm_corpus(vocab_size: usize, n_seqs: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(vocab_size > RESERVED.len() && len >= 4);
    let span = vocab_size - RESERVED.len();
    let mut r = rng::seeded(seed);
    let mut ids: Vec<usize> = (RESERVED.len()..vocab_size).collect();
    rng::shuffle(&mut r, &mut ids);
    let active = &ids[..span.min(16)];
    let offset: usize = r.gen_range(0..active.len());
    let mut out = Vec::with_capacity(n_seqs);
    for _ in 0..n_seqs {
        let mut seq: Vec<usize> = (0..3).map(|_| r.gen_range(0..active.len())).collect();
        while seq.len() < len {
            let k = seq.len();
            let (a, b, c) = (seq[k - 3], seq[k - 2], seq[k - 1]);
            let next = match r.gen_range(0..20) {
                0 | 1 => r.gen_range(0..active.len()),
                2..=6 if k >= 5 => seq[k - 5],
                _ => (5 * a + 7 * b + 11 * c + offset) % active.len(),
            };
            seq.push(next);
        }
        out.push(seq.into_iter().map(|i| active[i]).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_vocab_fits_reference_budget() {
        let vocab = Vocab::desk();
        assert!(vocab.size() <= 64, "desk vocab has {} entries", vocab.size());
        assert_eq!(vocab.id("<pad>"), PAD);
        assert_eq!(vocab.id("<sep>"), SEP);
        for w in POSITIVE_KEYWORDS.iter().chain(&ENTITY_TOKENS) {
            assert_ne!(vocab.id(w), UNK, "missing {}", w);
        }
        assert_ne!(vocab.id("positive"), UNK);
        assert_ne!(vocab.id("movie"), UNK);
    }

    #[test]
    fn build_vocab_orders_by_frequency_then_token() {
        let vocab = Vocab::build(["a a b", "b a c"], 16);
        assert!(vocab.id("a") < vocab.id("b"));
        assert!(vocab.id("b") < vocab.id("c"));
        assert_eq!(vocab.id("zzz"), UNK);
        let again = Vocab::build(["a a b", "b a c"], 16);
        assert_eq!(vocab, again);
    }

    #[test]
    fn build_vocab_truncates_to_max_size() {
        let vocab = Vocab::build(["a b c d e f"], 5);
        assert_eq!(vocab.size(), 5);
        assert_eq!(vocab.id("e"), UNK);
    }

    #[test]
    fn tokenize_lowercases_and_maps_unknown() {
        let vocab = Vocab::desk();
        let ids = vocab.tokenize("I LOVE zebras");
        assert_eq!(ids[0], vocab.id("i"));
        assert_eq!(ids[1], vocab.id("love"));
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn jsonl_round_trip() {
        let vocab = Vocab::desk();
        let dir = tempfile::tempdir().unwrap();
        for task in [TaskKind::Sequence, TaskKind::Token, TaskKind::Entailment] {
            let examples = gen_synthetic(task, 12, 5, &vocab);
            let path = dir.path().join("data.jsonl");
            save_jsonl(&path, &examples, &vocab).unwrap();
            let back = load_jsonl(&path, task, &vocab).unwrap();
            assert_eq!(examples, back);
        }
    }

    #[test]
    fn jsonl_line_schemas() {
        let vocab = Vocab::desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");

        std::fs::write(&path, "{\"text\":\"good movie\",\"label\":1}\n").unwrap();
        let ex = load_jsonl(&path, TaskKind::Sequence, &vocab).unwrap();
        assert_eq!(
            ex,
            vec![Example::Sequence { ids: vec![vocab.id("good"), vocab.id("movie")], label: 1 }]
        );

        std::fs::write(&path, "{\"tokens\":[\"a\"],\"tags\":[0,1]}\n").unwrap();
        assert!(matches!(
            load_jsonl(&path, TaskKind::Token, &vocab).unwrap_err(),
            Error::LengthMismatch(_)
        ));

        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            load_jsonl(&path, TaskKind::Sequence, &vocab).unwrap_err(),
            Error::MalformedLine { line: 1 }
        ));

        std::fs::write(&path, "{\"text\":\"x\",\"label\":7}\n").unwrap();
        assert!(matches!(
            load_jsonl(&path, TaskKind::Sequence, &vocab).unwrap_err(),
            Error::UnknownLabel { line: 1 }
        ));

        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, TaskKind::Sequence, &vocab).unwrap().is_empty());
    }

    #[test]
    fn synthetic_examples_are_balanced_and_deterministic() {
        let vocab = Vocab::desk();
        let two = gen_synthetic(TaskKind::Sequence, 2, 1, &vocab);
        let labels: Vec<usize> = two.iter().flat_map(|e| e.labels()).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1);

        for task in [TaskKind::Sequence, TaskKind::Token, TaskKind::Entailment] {
            let a = gen_synthetic(task, 20, 9, &vocab);
            let b = gen_synthetic(task, 20, 9, &vocab);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generating_rules_classify_their_own_output_perfectly() {
        let vocab = Vocab::desk();
        for ex in gen_synthetic(TaskKind::Sequence, 200, 3, &vocab) {
            if let Example::Sequence { ids, label } = &ex {
                assert_eq!(seqcls_rule_label(ids, &vocab), *label);
            }
        }
        for ex in gen_synthetic(TaskKind::Token, 200, 3, &vocab) {
            if let Example::Token { ids, tags } = &ex {
                assert_eq!(&token_rule_tags(ids, &vocab), tags);
            }
        }
        for ex in gen_synthetic(TaskKind::Entailment, 200, 3, &vocab) {
            if let Example::Entailment { premise, hypothesis, label } = &ex {
                assert_eq!(nli_rule_label(premise, hypothesis), *label);
            }
        }
    }

    #[test]
    fn nli_containment_instance() {
        let vocab = Vocab::desk();
        let premise = vocab.tokenize("good movie day");
        let hypothesis = vocab.tokenize("movie");
        assert_eq!(nli_rule_label(&premise, &hypothesis), 1);
        let absent = vocab.tokenize("paris");
        assert_eq!(nli_rule_label(&premise, &absent), 0);
    }

    #[test]
    fn split_sizes_and_partition() {
        let vocab = Vocab::desk();
        let examples = gen_synthetic(TaskKind::Sequence, 10, 4, &vocab);
        let (train, val, test) = split(&examples, (0.7, 0.1, 0.2), 11).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (7, 1, 2));

        let (all, none1, none2) = split(&examples, (1.0, 0.0, 0.0), 11).unwrap();
        assert_eq!((all.len(), none1.len(), none2.len()), (10, 0, 0));

        // union is the input multiset
        let mut union: Vec<Example> = train.into_iter().chain(val).chain(test).collect();
        let key = |e: &Example| format!("{:?}", e);
        let mut sorted_in: Vec<String> = examples.iter().map(key).collect();
        sorted_in.sort();
        let mut sorted_out: Vec<String> = union.drain(..).map(|e| key(&e)).collect();
        sorted_out.sort();
        assert_eq!(sorted_in, sorted_out);

        assert!(matches!(
            split(&examples, (0.5, 0.1, 0.2), 11).unwrap_err(),
            Error::BadFractions
        ));
    }

    #[test]
    fn lm_corpus_is_seeded_and_in_range() {
        let a = synthetic_lm_corpus(64, 10, 20, 5);
        let b = synthetic_lm_corpus(64, 10, 20, 5);
        assert_eq!(a, b);
        for seq in &a {
            assert_eq!(seq.len(), 20);
            assert!(seq.iter().all(|&t| (3..64).contains(&t)));
        }
    }

    #[test]
    fn entailment_input_encodes_sep() {
        let ex = Example::Entailment { premise: vec![5, 6], hypothesis: vec![7], label: 1 };
        assert_eq!(ex.input_ids(), vec![5, 6, SEP, 7]);
    }
}
