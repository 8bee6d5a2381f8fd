//! Text ingestion: tokenization, sentence segmentation, 5+5 sentence examples,
//! vocabularies, and the training pairs consumed by the scorers.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::lm::{LanguageModel, SampleStop};
use crate::rng;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
/// End of text; doubles as the termination symbol during decoding.
pub const EOS: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

pub const TERMINATORS: [&str; 3] = [".", "!", "?"];
const ABBREVIATIONS: [&str; 12] = [
    "mr.", "mrs.", "ms.", "dr.", "st.", "jr.", "sr.", "vs.", "etc.", "e.g.", "i.e.", "no.",
];

pub const SENTENCES_PER_HALF: usize = 5;
pub const SENTENCES_PER_EXAMPLE: usize = 2 * SENTENCES_PER_HALF;

pub fn is_terminator(token: &str) -> bool {
    TERMINATORS.contains(&token)
}

/// Whitespace-plus-punctuation tokenizer.
#[derive(Clone, Copy, Debug)]
pub struct Tokenizer {
    pub lowercase: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let word = if self.lowercase {
                chunk.to_lowercase()
            } else {
                chunk.to_string()
            };
            if ABBREVIATIONS.contains(&word.to_lowercase().as_str()) {
                out.push(word);
                continue;
            }
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            let mut end = chars.len();
            while start < end && chars[start].is_ascii_punctuation() {
                out.push(chars[start].to_string());
                start += 1;
            }
            let mut trailing = Vec::new();
            while end > start && chars[end - 1].is_ascii_punctuation() {
                trailing.push(chars[end - 1].to_string());
                end -= 1;
            }
            if start < end {
                out.push(chars[start..end].iter().collect());
            }
            out.extend(trailing.into_iter().rev());
        }
        out
    }

    pub fn segment(&self, text: &str) -> Vec<Vec<String>> {
        let tokens = self.tokenize(text);
        let (spans, tail) = sentence_spans(&tokens, |t| is_terminator(t));
        spans
            .into_iter()
            .chain(tail)
            .map(|s| tokens[s.start..s.end].to_vec())
            .collect()
    }
}

/// Splits text into sentences with the default (lowercasing) tokenizer.
pub fn segment_sentences(text: &str) -> Vec<Vec<String>> {
    Tokenizer::default().segment(text)
}

/// Half-open token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Complete-sentence spans plus the trailing unterminated span, if any.
///
/// A sentence ends at a terminator token that is not immediately followed by
/// another terminator, so `"wow ! !"` is one sentence.
pub fn sentence_spans<T>(tokens: &[T], is_term: impl Fn(&T) -> bool) -> (Vec<Span>, Option<Span>) {
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 0..tokens.len() {
        let ends = is_term(&tokens[i]) && !tokens.get(i + 1).is_some_and(&is_term);
        if ends {
            spans.push(Span { start, end: i + 1 });
            start = i + 1;
        }
    }
    let tail = (start < tokens.len()).then_some(Span {
        start,
        end: tokens.len(),
    });
    (spans, tail)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if normalized.is_empty() {
            return Err(Error::Empty("document text"));
        }
        Ok(Self {
            id: id.into(),
            text: normalized,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusMode {
    /// One document per line; each yields at most one example from its first 10 sentences.
    Review,
    /// Blank-line separated documents tiled into consecutive 10-sentence segments.
    Book,
}

impl std::str::FromStr for CorpusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "review" => Ok(Self::Review),
            "book" => Ok(Self::Book),
            other => Err(Error::Config(format!("unknown corpus mode `{other}`"))),
        }
    }
}

pub fn parse_documents(text: &str, mode: CorpusMode) -> Vec<Document> {
    let raw: Vec<String> = match mode {
        CorpusMode::Review => text.lines().map(str::to_string).collect(),
        CorpusMode::Book => {
            let mut docs = Vec::new();
            let mut current = String::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    if !current.trim().is_empty() {
                        docs.push(std::mem::take(&mut current));
                    }
                    current.clear();
                } else {
                    current.push_str(line);
                    current.push('\n');
                }
            }
            if !current.trim().is_empty() {
                docs.push(current);
            }
            docs
        }
    };
    raw.into_iter()
        .filter_map(|t| Document::new("", t).ok())
        .enumerate()
        .map(|(i, mut d)| {
            d.id = format!("doc{i:05}");
            d
        })
        .collect()
}

pub fn read_documents(path: &Path, mode: CorpusMode) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_documents(&text, mode))
}

/// A (context, continuation) pair of five sentences each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: Vec<String>,
    pub continuation: Vec<String>,
    pub spans: ExampleSpans,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSpans {
    pub context: Vec<Span>,
    pub continuation: Vec<Span>,
}

impl Example {
    pub fn from_sentences(id: String, sentences: &[Vec<String>]) -> Self {
        assert_eq!(sentences.len(), SENTENCES_PER_EXAMPLE);
        let (ctx, cont) = sentences.split_at(SENTENCES_PER_HALF);
        let flatten = |sents: &[Vec<String>]| {
            let mut tokens = Vec::new();
            let mut spans = Vec::new();
            for s in sents {
                let start = tokens.len();
                tokens.extend(s.iter().cloned());
                spans.push(Span {
                    start,
                    end: tokens.len(),
                });
            }
            (tokens, spans)
        };
        let (context, context_spans) = flatten(ctx);
        let (continuation, continuation_spans) = flatten(cont);
        Self {
            id,
            context,
            continuation,
            spans: ExampleSpans {
                context: context_spans,
                continuation: continuation_spans,
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
    /// Documents too short to yield any example.
    pub skipped: usize,
}

pub fn build_examples(documents: &[Document], mode: CorpusMode) -> ExampleSet {
    build_examples_with(documents, mode, &Tokenizer::default())
}

pub fn build_examples_with(documents: &[Document], mode: CorpusMode, tokenizer: &Tokenizer) -> ExampleSet {
    let mut set = ExampleSet::default();
    for doc in documents {
        // Only complete sentences count toward a segment.
        let tokens = tokenizer.tokenize(&doc.text);
        let (spans, _) = sentence_spans(&tokens, |t| is_terminator(t));
        let sentences: Vec<Vec<String>> = spans.iter().map(|s| tokens[s.start..s.end].to_vec()).collect();
        if sentences.len() < SENTENCES_PER_EXAMPLE {
            set.skipped += 1;
            continue;
        }
        match mode {
            CorpusMode::Review => set.examples.push(Example::from_sentences(
                format!("{}#0", doc.id),
                &sentences[..SENTENCES_PER_EXAMPLE],
            )),
            CorpusMode::Book => {
                for (i, chunk) in sentences.chunks_exact(SENTENCES_PER_EXAMPLE).enumerate() {
                    set.examples
                        .push(Example::from_sentences(format!("{}#{i}", doc.id), chunk));
                }
            }
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    frequency: Vec<u64>,
}

impl Vocabulary {
    /// Specials plus the most frequent tokens; ties broken lexicographically.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::VocabularyTooSmall {
                requested: max_size,
                specials: SPECIAL_TOKENS.len(),
            });
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            if !SPECIAL_TOKENS.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut frequency = vec![0; SPECIAL_TOKENS.len()];
        for (t, c) in ranked {
            tokens.push(t.to_string());
            frequency.push(c);
        }
        Ok(Self::from_parts(tokens, frequency))
    }

    fn from_parts(tokens: Vec<String>, frequency: Vec<u64>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids, frequency }
    }

    /// Parses the token-per-line format written by [`Vocabulary::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Config("vocabulary file must start with the special tokens".into()));
        }
        let n = tokens.len();
        Ok(Self::from_parts(tokens, vec![0; n]))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the serialized token list.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn frequency(&self, token: &str) -> u64 {
        self.ids.get(token).map_or(0, |&i| self.frequency[i])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id_of(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token_of(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }

    pub fn terminator_ids(&self) -> Vec<TokenId> {
        TERMINATORS.iter().filter_map(|t| self.ids.get(*t).copied()).collect()
    }

    pub fn sentence_splitter(&self) -> SentenceSplitter {
        SentenceSplitter::new(self.terminator_ids())
    }
}

pub fn build_vocabulary(examples: &[Example], max_size: usize) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    Vocabulary::from_tokens(
        examples
            .iter()
            .flat_map(|e| e.context.iter().chain(&e.continuation))
            .map(String::as_str),
        max_size,
    )
}

/// Sentence boundaries in token-id space.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSplitter {
    terminators: Vec<TokenId>,
}

impl SentenceSplitter {
    pub fn new(terminators: Vec<TokenId>) -> Self {
        Self { terminators }
    }

    pub fn is_terminator(&self, id: TokenId) -> bool {
        self.terminators.contains(&id)
    }

    pub fn spans(&self, ids: &[TokenId]) -> (Vec<Span>, Option<Span>) {
        sentence_spans(ids, |&t| self.is_terminator(t))
    }

    pub fn complete_sentences<'a>(&self, ids: &'a [TokenId]) -> Vec<&'a [TokenId]> {
        self.spans(ids).0.into_iter().map(|s| &ids[s.start..s.end]).collect()
    }

    pub fn count_complete(&self, ids: &[TokenId]) -> usize {
        self.spans(ids).0.len()
    }

    /// Longest prefix made only of complete sentences.
    pub fn complete_prefix<'a>(&self, ids: &'a [TokenId]) -> &'a [TokenId] {
        let end = self.spans(ids).0.last().map_or(0, |s| s.end);
        &ids[..end]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub id: String,
    pub context: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
}

impl EncodedExample {
    pub fn encode(example: &Example, vocab: &Vocabulary) -> Self {
        Self {
            id: example.id.clone(),
            context: vocab.encode(&example.context),
            continuation: vocab.encode(&example.continuation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeKind {
    /// Continuation sampled from the language model given the context.
    LmSample,
    /// Gold continuation of a different example.
    RandomEnding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingPair {
    pub context: Vec<TokenId>,
    pub gold: Vec<TokenId>,
    pub negative: Vec<TokenId>,
    pub prefix_fraction: f64,
    pub negative_kind: NegativeKind,
}

pub const DEFAULT_PREFIX_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Token count for a prefix covering `fraction` of `len` tokens, at least one.
pub fn prefix_length(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).round() as usize).clamp(1, len.max(1))
}

/// One (gold, negative) prefix pair per example and prefix fraction.
pub fn make_ranking_pairs(
    examples: &[EncodedExample],
    kind: NegativeKind,
    lm: Option<&LanguageModel>,
    prefix_fractions: &[f64],
    seed: u64,
) -> Result<Vec<RankingPair>> {
    let mut pairs = Vec::with_capacity(examples.len() * prefix_fractions.len());
    match kind {
        NegativeKind::LmSample => {
            let lm = lm.ok_or(Error::MissingLanguageModel)?;
            for (i, ex) in examples.iter().enumerate() {
                let n = ex.continuation.len();
                let sample = lm.sample_continuation(
                    &ex.context,
                    n,
                    1.0,
                    rng::derive(seed, i as u64),
                    SampleStop::Never,
                )?;
                for &f in prefix_fractions {
                    let len = prefix_length(f, n);
                    pairs.push(RankingPair {
                        context: ex.context.clone(),
                        gold: ex.continuation[..len].to_vec(),
                        negative: sample[..len].to_vec(),
                        prefix_fraction: f,
                        negative_kind: kind,
                    });
                }
            }
        }
        NegativeKind::RandomEnding => {
            if examples.len() < 2 {
                return Err(Error::TooFewExamples(examples.len()));
            }
            let mut r = rng::seeded(seed);
            for (i, ex) in examples.iter().enumerate() {
                let n = ex.continuation.len();
                for &f in prefix_fractions {
                    let len = prefix_length(f, n);
                    let others: Vec<&EncodedExample> = examples
                        .iter()
                        .enumerate()
                        .filter(|(j, o)| *j != i && o.continuation != ex.continuation)
                        .map(|(_, o)| o)
                        .collect();
                    if others.is_empty() {
                        return Err(Error::TooFewExamples(1));
                    }
                    let long_enough: Vec<&&EncodedExample> =
                        others.iter().filter(|o| o.continuation.len() >= len).collect();
                    // Endings shorter than the gold prefix shrink both sides to keep lengths equal.
                    let (negative, len) = if long_enough.is_empty() {
                        let o = others[r.random_range(0..others.len())];
                        let len = len.min(o.continuation.len());
                        (o.continuation[..len].to_vec(), len)
                    } else {
                        let o = long_enough[r.random_range(0..long_enough.len())];
                        (o.continuation[..len].to_vec(), len)
                    };
                    pairs.push(RankingPair {
                        context: ex.context.clone(),
                        gold: ex.continuation[..len].to_vec(),
                        negative,
                        prefix_fraction: f,
                        negative_kind: kind,
                    });
                }
            }
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Contradiction = 0,
    Entailment = 1,
    Neutral = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Contradiction, NliLabel::Entailment, NliLabel::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NliLabel::Contradiction => "contradiction",
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliTriple {
    pub premise: Vec<TokenId>,
    pub hypothesis: Vec<TokenId>,
    pub label: NliLabel,
}

/// Word lists shared by the NLI templates and the bundled desk corpus.
pub mod lexicon {
    pub const PEOPLE: [&str; 10] = [
        "man", "woman", "boy", "girl", "chef", "guest", "driver", "child", "doctor", "farmer",
    ];
    pub const ADJECTIVES: [&str; 8] = ["tall", "young", "old", "happy", "tired", "small", "quiet", "busy"];
    /// Verb with its antonym.
    pub const VERBS: [(&str, &str); 6] = [
        ("opened", "closed"),
        ("found", "lost"),
        ("liked", "hated"),
        ("bought", "sold"),
        ("cleaned", "dirtied"),
        ("pushed", "pulled"),
    ];
    pub const OBJECTS: [&str; 8] = ["car", "door", "box", "bag", "window", "table", "book", "gate"];
}

/// Templated premise/hypothesis triples with balanced labels.
///
/// entailment drops the premise's modifier; contradiction negates the verb or
/// swaps in its antonym; neutral describes unrelated people and objects.
pub fn generate_synthetic_nli(vocab: &Vocabulary, n: usize, seed: u64) -> Vec<NliTriple> {
    use lexicon::*;
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = NliLabel::ALL[i % 3];
        let person = PEOPLE[r.random_range(0..PEOPLE.len())];
        let adj = ADJECTIVES[r.random_range(0..ADJECTIVES.len())];
        let (verb, antonym) = VERBS[r.random_range(0..VERBS.len())];
        let object = OBJECTS[r.random_range(0..OBJECTS.len())];
        let premise = format!("the {adj} {person} {verb} the {object} .");
        let hypothesis = match label {
            NliLabel::Entailment => format!("the {person} {verb} the {object} ."),
            NliLabel::Contradiction => {
                if r.random_bool(0.5) {
                    format!("the {person} never {verb} the {object} .")
                } else {
                    format!("the {person} {antonym} the {object} .")
                }
            }
            NliLabel::Neutral => {
                let other_person = loop {
                    let p = PEOPLE[r.random_range(0..PEOPLE.len())];
                    if p != person {
                        break p;
                    }
                };
                let other_object = loop {
                    let o = OBJECTS[r.random_range(0..OBJECTS.len())];
                    if o != object {
                        break o;
                    }
                };
                let (other_verb, _) = VERBS[r.random_range(0..VERBS.len())];
                format!("the {other_person} {other_verb} the {other_object} .")
            }
        };
        let tok = Tokenizer::default();
        out.push(NliTriple {
            premise: vocab.encode(&tok.tokenize(&premise)),
            hypothesis: vocab.encode(&tok.tokenize(&hypothesis)),
            label,
        });
    }
    out.shuffle(&mut r);
    out
}

/// In-domain pairs from real documents: a sentence paired with a sentence of
/// another document is neutral, a sentence paired with itself is entailment.
///
/// Mixing these into the templated set keeps the classifier calibrated on
/// ordinary text, where most sentence pairs are unrelated.
pub fn domain_nli_pairs(documents: &[Vec<Vec<TokenId>>], n: usize, seed: u64) -> Vec<NliTriple> {
    let usable: Vec<&Vec<Vec<TokenId>>> = documents.iter().filter(|d| !d.is_empty()).collect();
    if usable.len() < 2 {
        return Vec::new();
    }
    let mut r = rng::seeded(seed);
    let pick = |r: &mut rng::Rng, doc: usize| {
        let d = usable[doc];
        d[r.random_range(0..d.len())].clone()
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = r.random_range(0..usable.len());
        let premise = pick(&mut r, a);
        let (hypothesis, label) = if i % 2 == 0 {
            let b = (a + r.random_range(1..usable.len())) % usable.len();
            (pick(&mut r, b), NliLabel::Neutral)
        } else {
            (premise.clone(), NliLabel::Entailment)
        };
        out.push(NliTriple {
            premise,
            hypothesis,
            label,
        });
    }
    out
}

/// Held-out partition of a corpus.
#[derive(Clone, Debug, Default)]
pub struct CorpusSplit {
    /// Documents whose full text trains the language model.
    pub lm_documents: Vec<Document>,
    pub test: Vec<Example>,
    pub valid: Vec<Example>,
    pub mixture: Vec<Example>,
    pub discriminator: Vec<Example>,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub held_out_fraction: f64,
    pub test: usize,
    pub valid: usize,
    pub mixture: usize,
}

/// Holds out a fraction of documents; their examples fill test, validation and
/// mixture-weight sets in that order, and the remainder trains the scorers.
pub fn split_corpus(documents: &[Document], mode: CorpusMode, sizes: SplitSizes, seed: u64) -> CorpusSplit {
    let mut order: Vec<usize> = (0..documents.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let n_held = ((documents.len() as f64) * sizes.held_out_fraction).round() as usize;
    let (held_idx, lm_idx) = order.split_at(n_held.min(order.len()));
    let mut held_idx = held_idx.to_vec();
    held_idx.sort_unstable();
    let mut lm_idx = lm_idx.to_vec();
    lm_idx.sort_unstable();

    let held: Vec<Document> = held_idx.iter().map(|&i| documents[i].clone()).collect();
    let set = build_examples(&held, mode);
    let mut examples = set.examples.into_iter();
    let test = examples.by_ref().take(sizes.test).collect();
    let valid = examples.by_ref().take(sizes.valid).collect();
    let mixture = examples.by_ref().take(sizes.mixture).collect();
    let discriminator = examples.collect();
    CorpusSplit {
        lm_documents: lm_idx.iter().map(|&i| documents[i].clone()).collect(),
        test,
        valid,
        mixture,
        discriminator,
        skipped: set.skipped,
    }
}

/// Token stream for language-model training: `<bos> doc <eos>` per document.
pub fn lm_stream(documents: &[Document], vocab: &Vocabulary) -> Vec<TokenId> {
    let tok = Tokenizer::default();
    let mut stream = Vec::new();
    for d in documents {
        stream.push(BOS);
        stream.extend(vocab.encode(&tok.tokenize(&d.text)));
        stream.push(EOS);
    }
    stream
}

/// Stream built from examples (context followed by continuation).
pub fn example_stream(examples: &[EncodedExample]) -> Vec<TokenId> {
    let mut stream = Vec::new();
    for e in examples {
        stream.push(BOS);
        stream.extend(&e.context);
        stream.extend(&e.continuation);
        stream.push(EOS);
    }
    stream
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn words(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn segments_on_terminators() {
        let tok = Tokenizer { lowercase: false };
        assert_eq!(tok.segment("Hello. World!"), vec![words("Hello ."), words("World !")]);
        assert!(segment_sentences("").is_empty());
        assert_eq!(segment_sentences("No terminator"), vec![words("no terminator")]);
    }

    #[test]
    fn keeps_abbreviations_and_groups_repeated_terminators() {
        let s = segment_sentences("Mr. Smith arrived. Wow!! Great?");
        assert_eq!(s, vec![words("mr. smith arrived ."), words("wow ! !"), words("great ?")]);
    }

    #[test]
    fn tokenizer_splits_edge_punctuation_only() {
        let t = Tokenizer::default().tokenize("\"Didn't\" we, (really)?");
        assert_eq!(t, words("\" didn't \" we , ( really ) ?"));
    }

    fn doc_with(n: usize) -> Document {
        let text: Vec<String> = (0..n).map(|i| format!("sentence number w{i} .")).collect();
        Document::new("d", text.join(" ")).unwrap()
    }

    #[test]
    fn review_mode_takes_first_ten_sentences() {
        let set = build_examples(&[doc_with(12), doc_with(9)], CorpusMode::Review);
        assert_eq!(set.examples.len(), 1);
        assert_eq!(set.skipped, 1);
        let ex = &set.examples[0];
        assert_eq!(ex.context[2], "w0");
        assert_eq!(ex.continuation[2], "w5");
        assert_eq!(ex.spans.context.len(), 5);
        assert_eq!(ex.spans.continuation.len(), 5);
        assert_eq!(ex.continuation.last().unwrap(), ".");
        assert!(!ex.continuation.iter().any(|t| t == "w10"));
    }

    #[test]
    fn book_mode_tiles_segments() {
        let set = build_examples(&[doc_with(25)], CorpusMode::Book);
        assert_eq!(set.examples.len(), 2);
        assert_eq!(set.examples[1].context[2], "w10");
        assert_eq!(set.examples[1].continuation[2], "w15");
    }

    #[test]
    fn vocabulary_ranks_by_frequency_then_lexicographically() {
        let toks = ["a", "a", "a", "a", "a", "b", "b", "b", "c"];
        let v = Vocabulary::from_tokens(toks, SPECIAL_TOKENS.len() + 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_ne!(v.id_of("a"), UNK);
        assert_ne!(v.id_of("b"), UNK);
        assert_eq!(v.id_of("c"), UNK);
        assert_eq!(v.id_of("never-seen"), UNK);

        let tie = Vocabulary::from_tokens(["b", "a", "b", "a"], SPECIAL_TOKENS.len() + 1).unwrap();
        assert!(tie.contains("a"));
        assert!(!tie.contains("b"));
    }

    #[test]
    fn vocabulary_rejects_tiny_sizes() {
        assert!(matches!(
            Vocabulary::from_tokens(["a"], SPECIAL_TOKENS.len()),
            Err(Error::VocabularyTooSmall { .. })
        ));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::from_tokens(["x", "y", "y"], 10).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back.token_of(4), v.token_of(4));
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.id_of("<eos>"), EOS);
    }

    #[test]
    fn sentence_splitter_finds_complete_prefix() {
        let s = SentenceSplitter::new(vec![9]);
        assert_eq!(s.count_complete(&[5, 6, 9, 7, 9, 9, 8]), 2);
        assert_eq!(s.complete_prefix(&[5, 6, 9, 7, 9, 9, 8]), &[5, 6, 9, 7, 9, 9]);
        assert!(s.complete_prefix(&[5, 6]).is_empty());
    }

    fn encoded(n: usize) -> Vec<EncodedExample> {
        (0..n)
            .map(|i| EncodedExample {
                id: i.to_string(),
                context: vec![10 + i, 11],
                continuation: (0..10).map(|j| 20 + i * 10 + j).collect(),
            })
            .collect()
    }

    #[test]
    fn random_endings_exclude_own_continuation() {
        let ex = encoded(10);
        let pairs = make_ranking_pairs(&ex, NegativeKind::RandomEnding, None, &DEFAULT_PREFIX_FRACTIONS, 3).unwrap();
        assert_eq!(pairs.len(), 50);
        for p in &pairs {
            assert_eq!(p.gold.len(), p.negative.len());
            assert_ne!(p.gold, p.negative);
        }
        assert!(matches!(
            make_ranking_pairs(&ex[..1], NegativeKind::RandomEnding, None, &[1.0], 0),
            Err(Error::TooFewExamples(1))
        ));
        assert!(matches!(
            make_ranking_pairs(&ex, NegativeKind::LmSample, None, &[1.0], 0),
            Err(Error::MissingLanguageModel)
        ));
    }

    #[test]
    fn prefix_lengths_are_at_least_one() {
        assert_eq!(prefix_length(0.2, 3), 1);
        assert_eq!(prefix_length(0.2, 50), 10);
        assert_eq!(prefix_length(1.0, 7), 7);
    }

    fn nli_vocab() -> Vocabulary {
        let mut words: Vec<&str> = vec!["the", ".", "never"];
        words.extend(lexicon::PEOPLE);
        words.extend(lexicon::ADJECTIVES);
        words.extend(lexicon::OBJECTS);
        for (a, b) in lexicon::VERBS {
            words.push(a);
            words.push(b);
        }
        Vocabulary::from_tokens(words, 100).unwrap()
    }

    #[test]
    fn synthetic_nli_is_balanced_and_deterministic() {
        let v = nli_vocab();
        let three = generate_synthetic_nli(&v, 3, 1);
        let labels: HashSet<NliLabel> = three.iter().map(|t| t.label).collect();
        assert_eq!(labels.len(), 3);

        let a = generate_synthetic_nli(&v, 300, 7);
        assert_eq!(a, generate_synthetic_nli(&v, 300, 7));
        for l in NliLabel::ALL {
            assert_eq!(a.iter().filter(|t| t.label == l).count(), 100);
        }
        assert!(a.iter().all(|t| !t.premise.contains(&UNK) && !t.hypothesis.contains(&UNK)));
    }
}
