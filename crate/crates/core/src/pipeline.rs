//! End-to-end stages: data preparation, model training, weight fitting,
//! generation and evaluation. Every artifact lands under the output directory
//! with a stable name and records the config hash and seed that produced it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    domain_nli_pairs, generate_synthetic_nli, lm_stream, make_ranking_pairs, read_documents, split_corpus, example_stream, CorpusMode,
    Document, EncodedExample, Example, NegativeKind, NliTriple, SplitSizes, Tokenizer, TokenId, Vocabulary,
    DEFAULT_PREFIX_FRACTIONS,
};
use crate::decoder::{beam_search, BeamConfig, Generation};
use crate::discriminators::{
    train_ranking_scorer, EntailmentConfig, EntailmentScorer, NliTrainConfig, RankingTrainConfig, RelevanceConfig,
    RelevanceScorer, RepetitionConfig, RepetitionScorer, Scorer, ScorerId, ScorerOutput, ScorerSet, StyleScorer,
};
use crate::error::{io_err, Error, Result};
use crate::lm::{train_lm, unigram_perplexity, LanguageModel, LmConfig, LmTrainConfig};
use crate::metrics::{evaluate_generations, format_table, MetricsReport};
use crate::objective::{learn_mixture_weights, CompositeObjective, Features, MixtureConfig, MixtureTask, MixtureWeights};
use crate::rng::derive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    pub mode: CorpusMode,
    pub vocab_size: usize,
    pub held_out_fraction: f64,
    pub test: usize,
    pub valid: usize,
    pub mixture: usize,
    pub nli_train: usize,
    pub nli_eval: usize,
    /// In-domain neutral and entailment pairs added to the NLI training set.
    pub nli_domain: usize,
    pub prefix_fractions: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data/desk_corpus.txt"),
            mode: CorpusMode::Review,
            vocab_size: 2000,
            held_out_fraction: 0.2,
            test: 50,
            valid: 10,
            mixture: 20,
            nli_train: 300,
            nli_eval: 60,
            nli_domain: 300,
            prefix_fractions: DEFAULT_PREFIX_FRACTIONS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorersConfig {
    pub repetition: RepetitionConfig,
    pub relevance: RelevanceConfig,
    pub entailment: EntailmentConfig,
    pub ranking: RankingTrainConfig,
    pub nli: NliTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Every stage derives its own seeds from this one.
    pub seed: u64,
    pub data: DataConfig,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub scorers: ScorersConfig,
    pub mixture: MixtureConfig,
    pub beam: BeamConfig,
    pub baseline: BeamConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seed: 1,
            data: DataConfig::default(),
            lm: LmConfig::default(),
            lm_train: LmTrainConfig::default(),
            scorers: ScorersConfig::default(),
            mixture: MixtureConfig::default(),
            beam: BeamConfig::default(),
            baseline: BeamConfig::baseline(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl PipelineConfig {
    /// Parses TOML, then applies `section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut table;
            for part in &path[..path.len() - 1] {
                cur = cur
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
            }
            cur.insert(path[path.len() - 1].to_string(), parse_override_value(raw.trim()));
        }
        let config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.held_out_fraction) {
            return Err(Error::Config("data.held_out_fraction must lie in [0, 1]".into()));
        }
        if d.test == 0 {
            return Err(Error::Config("data.test must be positive".into()));
        }
        if d.prefix_fractions.is_empty() || d.prefix_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("data.prefix_fractions must be non-empty fractions in (0, 1]".into()));
        }
        if d.nli_train < 3 {
            return Err(Error::Config("data.nli_train must be at least 3".into()));
        }
        self.lm_train.validate()?;
        self.beam.validate()?;
        self.baseline.validate()
    }

    /// SHA-256 of the settings that determine artifact contents (the output location is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    TrainLm,
    TrainScorers,
    LearnWeights,
    Generate,
    Evaluate,
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainLm => "train-lm",
            Stage::TrainScorers => "train-scorers",
            Stage::LearnWeights => "learn-weights",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
        }
    }
}

/// Which decoder configuration produced a generation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemMode {
    /// Language model plus all four scorers.
    Full,
    /// Language model alone with plain beam search.
    LmBaseline,
    /// Language model plus a single scorer.
    Ablation(ScorerId),
}

impl SystemMode {
    pub fn scorers(self) -> Vec<ScorerId> {
        match self {
            SystemMode::Full => ScorerId::ALL.to_vec(),
            SystemMode::LmBaseline => Vec::new(),
            SystemMode::Ablation(id) => vec![id],
        }
    }
}

impl fmt::Display for SystemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemMode::Full => f.write_str("full"),
            SystemMode::LmBaseline => f.write_str("lm-baseline"),
            SystemMode::Ablation(id) => write!(f, "ablation-{id}"),
        }
    }
}

impl FromStr for SystemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SystemMode::Full),
            "lm-baseline" => Ok(SystemMode::LmBaseline),
            other => match other.strip_prefix("ablation-") {
                Some(id) => Ok(SystemMode::Ablation(id.parse()?)),
                None => Err(Error::Config(format!("unknown generation mode `{other}`"))),
            },
        }
    }
}

/// First line of every line-delimited artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub context: String,
    pub continuation: String,
    pub reference: String,
    pub continuation_ids: Vec<TokenId>,
    pub score: f64,
    pub forced: bool,
    /// Best score after each step, absent until a continuation finishes.
    pub step_best: Vec<Option<f64>>,
    pub components: BTreeMap<String, ScorerOutput>,
    pub lm_logprob: f64,
    pub weights: BTreeMap<String, f64>,
    pub seed: u64,
}

/// File names under the output directory.
pub mod files {
    pub const VOCAB: &str = "vocab.txt";
    pub const LM_DOCUMENTS: &str = "lm_documents.jsonl";
    pub const NLI_TRAIN: &str = "nli_train.jsonl";
    pub const NLI_EVAL: &str = "nli_eval.jsonl";
    pub const LM: &str = "lm.json";
    pub const LM_LOG: &str = "lm_log.jsonl";
    pub const SCORER_LOG: &str = "scorers_log.jsonl";

    pub fn examples(split: &str) -> String {
        format!("examples_{split}.jsonl")
    }

    pub fn scorer(id: crate::discriminators::ScorerId) -> String {
        format!("scorer_{id}.json")
    }

    pub fn lambda(tag: &str) -> String {
        if tag == "full" {
            "lambda.txt".into()
        } else {
            format!("lambda_{tag}.txt")
        }
    }

    pub fn mixture_trace(tag: &str) -> String {
        format!("mixture_trace_{tag}.jsonl")
    }

    pub fn generations(mode: &str) -> String {
        format!("generations_{mode}.jsonl")
    }

    pub fn report(name: &str, ext: &str) -> String {
        format!("{name}.{ext}")
    }
}

/// Split names in the order they are written.
pub const SPLITS: [&str; 4] = ["test", "valid", "mixture", "discriminator"];

const VOCAB_HEADER: &str = "#coopgen-vocab";

/// Reads and writes artifacts for one configuration.
pub struct Workspace {
    pub config: PipelineConfig,
    config_hash: String,
}

impl Workspace {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash();
        Ok(Self { config, config_hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn stage_seed(&self, stage: u64) -> u64 {
        derive(self.config.seed, stage)
    }

    fn header(&self, format: &str, seed: u64, vocab_hash: &str) -> ArtifactHeader {
        ArtifactHeader {
            format: format.to_string(),
            config_hash: self.config_hash.clone(),
            seed,
            vocab_hash: vocab_hash.to_string(),
        }
    }

    fn metadata(&self, seed: u64) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.config_hash.clone()),
            ("seed".to_string(), seed.to_string()),
        ])
    }

    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                stage: stage.name(),
            })
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::create_dir_all(&self.config.output_dir).map_err(io_err(&self.config.output_dir))?;
        std::fs::write(&p, text).map_err(io_err(&p))
    }

    fn write_records<T: Serialize>(&self, name: &str, header: &ArtifactHeader, records: &[T]) -> Result<()> {
        let mut text = serde_json::to_string(header)?;
        text.push('\n');
        for r in records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        self.write(name, &text)
    }

    fn read_records<T: DeserializeOwned>(&self, name: &str, stage: Stage, vocab_hash: &str) -> Result<Vec<T>> {
        let p = self.require(name, stage)?;
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        let mut lines = text.lines();
        let header: ArtifactHeader = serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| Error::BadArtifact {
            path: p.clone(),
            reason: format!("bad header: {e}"),
        })?;
        if header.vocab_hash != vocab_hash {
            return Err(Error::VocabularyMismatch(p));
        }
        lines.map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let p = self.require(files::VOCAB, Stage::Prepare)?;
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        let body = match text.split_once('\n') {
            Some((first, rest)) if first.starts_with(VOCAB_HEADER) => rest,
            _ => &text,
        };
        Vocabulary::from_text(body).map_err(|e| Error::BadArtifact {
            path: p,
            reason: e.to_string(),
        })
    }

    pub fn examples(&self, split: &str, vocab: &Vocabulary) -> Result<Vec<Example>> {
        self.read_records(&files::examples(split), Stage::Prepare, &vocab.hash())
    }

    pub fn encoded(&self, split: &str, vocab: &Vocabulary) -> Result<Vec<EncodedExample>> {
        Ok(self
            .examples(split, vocab)?
            .iter()
            .map(|e| EncodedExample::encode(e, vocab))
            .collect())
    }

    pub fn language_model(&self, vocab: &Vocabulary) -> Result<LanguageModel> {
        let p = self.require(files::LM, Stage::TrainLm)?;
        LanguageModel::load(&p, &vocab.hash())
    }

    pub fn scorers(&self, ids: &[ScorerId], vocab: &Vocabulary) -> Result<ScorerSet> {
        let mut out = Vec::new();
        for &id in ids {
            let p = self.require(&files::scorer(id), Stage::TrainScorers)?;
            out.push(Scorer::load(&p, id, &vocab.hash())?);
        }
        Ok(ScorerSet::new(out))
    }

    // ---- stages ----

    pub fn prepare(&self) -> Result<PrepareSummary> {
        let c = &self.config.data;
        let seed = self.stage_seed(1);
        let documents = read_documents(&c.corpus, c.mode)?;
        if documents.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let split = split_corpus(
            &documents,
            c.mode,
            SplitSizes {
                held_out_fraction: c.held_out_fraction,
                test: c.test,
                valid: c.valid,
                mixture: c.mixture,
            },
            seed,
        );
        if split.test.is_empty() {
            return Err(Error::Empty("test split"));
        }
        let tok = Tokenizer::default();
        let lm_tokens: Vec<String> = split.lm_documents.iter().flat_map(|d| tok.tokenize(&d.text)).collect();
        let vocab = Vocabulary::from_tokens(lm_tokens.iter().map(String::as_str), c.vocab_size)?;
        let vh = vocab.hash();
        self.write(
            files::VOCAB,
            &format!("{VOCAB_HEADER} config_hash={} seed={seed}\n{}", self.config_hash, vocab.to_text()),
        )?;
        let sets = [&split.test, &split.valid, &split.mixture, &split.discriminator];
        for (name, set) in SPLITS.iter().zip(sets) {
            self.write_records(&files::examples(name), &self.header("examples", seed, &vh), set)?;
        }
        self.write_records(files::LM_DOCUMENTS, &self.header("documents", seed, &vh), &split.lm_documents)?;
        let nli_seed = self.stage_seed(2);
        let mut train = generate_synthetic_nli(&vocab, c.nli_train, nli_seed);
        let splitter = vocab.sentence_splitter();
        let doc_sentences: Vec<Vec<Vec<TokenId>>> = split
            .lm_documents
            .iter()
            .map(|d| {
                let ids = vocab.encode(&tok.tokenize(&d.text));
                splitter.complete_sentences(&ids).into_iter().map(<[TokenId]>::to_vec).collect()
            })
            .collect();
        train.extend(domain_nli_pairs(&doc_sentences, c.nli_domain, derive(nli_seed, 2)));
        train.shuffle(&mut crate::rng::seeded(derive(nli_seed, 3)));
        let eval = generate_synthetic_nli(&vocab, c.nli_eval.max(3), derive(nli_seed, 1));
        self.write_records(files::NLI_TRAIN, &self.header("nli", nli_seed, &vh), &train)?;
        self.write_records(files::NLI_EVAL, &self.header("nli", derive(nli_seed, 1), &vh), &eval)?;
        let summary = PrepareSummary {
            documents: documents.len(),
            lm_documents: split.lm_documents.len(),
            test: split.test.len(),
            valid: split.valid.len(),
            mixture: split.mixture.len(),
            discriminator: split.discriminator.len(),
            skipped: split.skipped,
            vocab_size: vocab.len(),
        };
        log::info!("prepared {summary:?}");
        Ok(summary)
    }

    pub fn train_lm(&self) -> Result<LmSummary> {
        let vocab = self.vocabulary()?;
        let vh = vocab.hash();
        let docs: Vec<Document> = self.read_records(files::LM_DOCUMENTS, Stage::Prepare, &vh)?;
        let train = lm_stream(&docs, &vocab);
        let valid_examples = self.encoded("valid", &vocab)?;
        let valid = example_stream(&valid_examples);
        let init_seed = self.stage_seed(3);
        let mut lm = LanguageModel::new(vocab.len(), self.config.lm.clone(), init_seed)?;
        let mut tc = self.config.lm_train.clone();
        tc.seed = self.stage_seed(4);
        let log = train_lm(&mut lm, &train, (!valid.is_empty()).then_some(&valid[..]), &tc)?;
        lm.save(&self.path(files::LM), &vh, &self.metadata(tc.seed))?;
        self.write_records(files::LM_LOG, &self.header("lm-log", tc.seed, &vh), &log)?;
        let summary = LmSummary {
            valid_perplexity: if valid.len() >= 2 { Some(lm.stream_perplexity(&valid)?) } else { None },
            unigram_perplexity: (valid.len() >= 2).then(|| unigram_perplexity(&train, &valid[1..], vocab.len())),
        };
        log::info!("trained lm {summary:?}");
        Ok(summary)
    }

    pub fn train_scorers(&self) -> Result<Vec<ScorerTrainRecord>> {
        let vocab = self.vocabulary()?;
        let vh = vocab.hash();
        let lm = self.language_model(&vocab)?;
        let examples = self.encoded("discriminator", &vocab)?;
        let fractions = &self.config.data.prefix_fractions;
        let sc = &self.config.scorers;
        let emb = lm.embeddings().clone();
        let mut records = Vec::new();

        let lm_pairs = make_ranking_pairs(&examples, NegativeKind::LmSample, Some(&lm), fractions, self.stage_seed(10))?;
        let random_pairs = make_ranking_pairs(&examples, NegativeKind::RandomEnding, None, fractions, self.stage_seed(11))?;

        let ranking = |seed: u64| RankingTrainConfig {
            seed,
            ..sc.ranking.clone()
        };

        let mut rep = RepetitionScorer::new(sc.repetition.clone(), emb.clone(), self.stage_seed(12))?;
        let rc = ranking(self.stage_seed(13));
        let report = train_ranking_scorer(&mut rep, &lm_pairs, &rc)?;
        records.push(ScorerTrainRecord::ranking(ScorerId::Repetition, lm_pairs.len(), &report));
        Scorer::Repetition(rep).save(&self.path(&files::scorer(ScorerId::Repetition)), &vh, &self.metadata(rc.seed))?;

        let mut style = StyleScorer::new(emb.clone(), self.stage_seed(14))?;
        let rc = ranking(self.stage_seed(15));
        let report = train_ranking_scorer(&mut style, &lm_pairs, &rc)?;
        records.push(ScorerTrainRecord::ranking(ScorerId::Style, lm_pairs.len(), &report));
        Scorer::Style(style).save(&self.path(&files::scorer(ScorerId::Style)), &vh, &self.metadata(rc.seed))?;

        let mut rel = RelevanceScorer::new(sc.relevance.clone(), emb.clone(), self.stage_seed(16))?;
        let rc = ranking(self.stage_seed(17));
        let report = train_ranking_scorer(&mut rel, &random_pairs, &rc)?;
        records.push(ScorerTrainRecord::ranking(ScorerId::Relevance, random_pairs.len(), &report));
        Scorer::Relevance(rel).save(&self.path(&files::scorer(ScorerId::Relevance)), &vh, &self.metadata(rc.seed))?;

        let train: Vec<NliTriple> = self.read_records(files::NLI_TRAIN, Stage::Prepare, &vh)?;
        let eval: Vec<NliTriple> = self.read_records(files::NLI_EVAL, Stage::Prepare, &vh)?;
        let mut nli = EntailmentScorer::new(
            sc.entailment.clone(),
            emb,
            vocab.sentence_splitter(),
            self.stage_seed(18),
        )?;
        let nc = NliTrainConfig {
            seed: self.stage_seed(19),
            ..sc.nli.clone()
        };
        let report = nli.train(&train, &nc)?;
        records.push(ScorerTrainRecord {
            scorer: ScorerId::Entailment,
            examples: train.len(),
            final_loss: report.epoch_losses.last().copied(),
            train_accuracy: report.accuracy,
            held_out_accuracy: Some(nli.accuracy(&eval)?),
        });
        Scorer::Entailment(nli).save(&self.path(&files::scorer(ScorerId::Entailment)), &vh, &self.metadata(nc.seed))?;

        self.write_records(files::SCORER_LOG, &self.header("scorer-log", self.stage_seed(10), &vh), &records)?;
        for r in &records {
            log::info!("trained {r:?}");
        }
        Ok(records)
    }

    /// Fits mixture weights for the given scorers; `tag` names the output files.
    pub fn learn_weights(&self, ids: &[ScorerId], tag: &str) -> Result<MixtureWeights> {
        let vocab = self.vocabulary()?;
        let vh = vocab.hash();
        let lm = self.language_model(&vocab)?;
        let scorers = self.scorers(ids, &vocab)?;
        let examples = self.encoded("mixture", &vocab)?;
        if examples.is_empty() {
            return Err(Error::Empty("mixture split"));
        }
        let seed = self.stage_seed(30);
        let mut task = DecoderTask {
            lm: &lm,
            scorers: &scorers,
            vocab: &vocab,
            examples: &examples,
            beam: self.config.beam.clone(),
        };
        let mc = MixtureConfig {
            seed,
            ..self.config.mixture.clone()
        };
        let report = learn_mixture_weights(&mut task, &scorers.ids(), &mc)?;
        let mut meta = vec![("config_hash", self.config_hash.clone()), ("seed", seed.to_string())];
        meta.push(("vocab_hash", vh.clone()));
        self.write(&files::lambda(tag), &report.weights.to_text(&meta))?;
        self.write_records(&files::mixture_trace(tag), &self.header("mixture-trace", seed, &vh), &report.trace)?;
        log::info!("learned weights {tag}: {:?}", report.weights);
        Ok(report.weights)
    }

    pub fn weights(&self, mode: SystemMode) -> Result<MixtureWeights> {
        let p = self.require(&files::lambda(&weights_tag(mode)), Stage::LearnWeights)?;
        let w = MixtureWeights::load(&p)?;
        if w.ids() != mode.scorers() {
            return Err(Error::BadArtifact {
                path: p,
                reason: format!("weights cover {:?}, mode {mode} needs {:?}", w.ids(), mode.scorers()),
            });
        }
        Ok(w)
    }

    pub fn generate(&self, mode: SystemMode) -> Result<Vec<GenerationRecord>> {
        let vocab = self.vocabulary()?;
        let vh = vocab.hash();
        let test = self.examples("test", &vocab)?;
        let lm = self.language_model(&vocab)?;
        let ids = mode.scorers();
        let scorers = self.scorers(&ids, &vocab)?;
        let (weights, beam) = match mode {
            SystemMode::LmBaseline => (MixtureWeights::uniform(&[], 0.0), self.config.baseline.clone()),
            _ => (self.weights(mode)?, self.config.beam.clone()),
        };
        let objective = CompositeObjective::new(&lm, scorers.as_dyn(), weights.clone(), vocab.sentence_splitter())?;
        let base_seed = self.stage_seed(40);
        let records = test
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let enc = EncodedExample::encode(ex, &vocab);
                let cfg = BeamConfig {
                    seed: derive(base_seed, i as u64),
                    ..beam.clone()
                };
                let g = beam_search(&objective, &enc.context, &cfg)?;
                Ok(record(ex, &g, &ids, &weights, &vocab, cfg.seed))
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_records(
            &files::generations(&mode.to_string()),
            &self.header("generations", base_seed, &vh),
            &records,
        )?;
        log::info!("generated {} continuations in mode {mode}", records.len());
        Ok(records)
    }

    /// Metrics for each system against the test references; `name` picks the report file.
    pub fn evaluate(&self, systems: &[SystemMode], name: &str) -> Result<Vec<MetricsReport>> {
        let vocab = self.vocabulary()?;
        let vh = vocab.hash();
        let test = self.examples("test", &vocab)?;
        let references: Vec<Vec<String>> = test.iter().map(|e| e.continuation.clone()).collect();
        let mut rows = Vec::new();
        let mut reference_row = None;
        for &mode in systems {
            let records: Vec<GenerationRecord> =
                self.read_records(&files::generations(&mode.to_string()), Stage::Generate, &vh)?;
            if records.len() != references.len() {
                return Err(Error::LengthMismatch(records.len(), references.len()));
            }
            let gens: Vec<Vec<String>> = records.iter().map(|r| vocab.decode(&r.continuation_ids)).collect();
            let eval = evaluate_generations(&gens, &references, &mode.to_string())?;
            rows.push(eval.system);
            reference_row = Some(eval.reference);
        }
        rows.extend(reference_row);
        #[derive(Serialize)]
        struct Report<'a> {
            #[serde(flatten)]
            header: ArtifactHeader,
            bleu: &'static str,
            rows: &'a [MetricsReport],
        }
        let report = Report {
            header: self.header("metrics", self.config.seed, &vh),
            bleu: "corpus, max n = 4, add-one smoothing for n >= 2",
            rows: &rows,
        };
        self.write(&files::report(name, "json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        self.write(
            &files::report(name, "txt"),
            &format!("# config_hash={} seed={}\n{}", self.config_hash, self.config.seed, format_table(&rows)),
        )?;
        Ok(rows)
    }

    /// One single-scorer system per scorer: weights, generations and a combined report.
    pub fn ablate(&self) -> Result<Vec<MetricsReport>> {
        let modes: Vec<SystemMode> = ScorerId::ALL.iter().map(|&id| SystemMode::Ablation(id)).collect();
        for &mode in &modes {
            self.learn_weights(&mode.scorers(), &weights_tag(mode))?;
            self.generate(mode)?;
        }
        self.evaluate(&modes, "report_ablation")
    }

    pub fn run_all(&self) -> Result<Vec<MetricsReport>> {
        self.prepare()?;
        self.train_lm()?;
        self.train_scorers()?;
        self.learn_weights(&ScorerId::ALL, "full")?;
        self.generate(SystemMode::Full)?;
        self.generate(SystemMode::LmBaseline)?;
        self.evaluate(&[SystemMode::Full, SystemMode::LmBaseline], "report")
    }
}

pub fn weights_tag(mode: SystemMode) -> String {
    mode.to_string()
}

fn record(
    ex: &Example,
    g: &Generation,
    ids: &[ScorerId],
    weights: &MixtureWeights,
    vocab: &Vocabulary,
    seed: u64,
) -> GenerationRecord {
    GenerationRecord {
        id: ex.id.clone(),
        context: ex.context.join(" "),
        continuation: vocab.decode(&g.continuation).join(" "),
        reference: ex.continuation.join(" "),
        continuation_ids: g.continuation.clone(),
        score: g.score,
        forced: g.forced,
        step_best: g.steps.iter().map(|s| s.best_score).collect(),
        components: ids
            .iter()
            .zip(&g.scorer_outputs)
            .map(|(id, o)| (id.to_string(), *o))
            .collect(),
        lm_logprob: g.lm_logprob,
        weights: weights.ids().iter().map(|id| (id.to_string(), weights.get(*id).unwrap())).collect(),
        seed,
    }
}

/// Mixture-weight fitting against real decoding.
pub struct DecoderTask<'a> {
    pub lm: &'a LanguageModel,
    pub scorers: &'a ScorerSet,
    pub vocab: &'a Vocabulary,
    pub examples: &'a [EncodedExample],
    pub beam: BeamConfig,
}

impl DecoderTask<'_> {
    fn objective(&self, weights: MixtureWeights) -> Result<CompositeObjective<'_>> {
        CompositeObjective::new(self.lm, self.scorers.as_dyn(), weights, self.vocab.sentence_splitter())
    }
}

impl MixtureTask for DecoderTask<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn gold(&self, example: usize) -> Result<Features> {
        let ex = &self.examples[example];
        let zero = MixtureWeights::uniform(&self.scorers.ids(), 0.0);
        self.objective(zero)?.features(&ex.context, &ex.continuation)
    }

    fn generate(&mut self, example: usize, weights: &MixtureWeights, seed: u64) -> Result<Features> {
        let ex = &self.examples[example];
        let objective = self.objective(weights.clone())?;
        let cfg = BeamConfig {
            seed,
            ..self.beam.clone()
        };
        let g = beam_search(&objective, &ex.context, &cfg)?;
        objective.features(&ex.context, &g.continuation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub documents: usize,
    pub lm_documents: usize,
    pub test: usize,
    pub valid: usize,
    pub mixture: usize,
    pub discriminator: usize,
    pub skipped: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    pub valid_perplexity: Option<f64>,
    pub unigram_perplexity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerTrainRecord {
    pub scorer: ScorerId,
    pub examples: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
}

impl ScorerTrainRecord {
    fn ranking(scorer: ScorerId, examples: usize, report: &crate::discriminators::RankingReport) -> Self {
        Self {
            scorer,
            examples,
            final_loss: report.epoch_losses.last().copied(),
            train_accuracy: report.accuracy,
            held_out_accuracy: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_nested_keys() {
        let c = PipelineConfig::from_toml(
            "seed = 3\n[beam]\nbeam_size = 4\n",
            &["beam.temperature=0.5".into(), "data.corpus=/tmp/x.txt".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.beam.beam_size, 4);
        assert_eq!(c.beam.temperature, 0.5);
        assert_eq!(c.data.corpus, PathBuf::from("/tmp/x.txt"));
        assert!(PipelineConfig::from_toml("", &["beam.beam_size=0".into()]).is_err());
        assert!(PipelineConfig::from_toml("[beam]\nwidth = 3\n", &[]).is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("full".parse::<SystemMode>().unwrap(), SystemMode::Full);
        assert_eq!(
            "ablation-style".parse::<SystemMode>().unwrap(),
            SystemMode::Ablation(ScorerId::Style)
        );
        assert!("ablation-x".parse::<SystemMode>().is_err());
        assert_eq!(SystemMode::LmBaseline.to_string(), "lm-baseline");
    }
}
