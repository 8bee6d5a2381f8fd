//! Discriminative scorers that rerank continuations: repetition, entailment,
//! relevance and lexical style.

mod entailment;
mod ranking;
mod relevance;
mod repetition;
mod style;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS};
use crate::error::{io_err, Error, Result};
use crate::lm::same_layout;
use crate::tensor::ParamStore;

pub use entailment::{EntailmentConfig, EntailmentScorer, NliReport, NliTrainConfig};
pub use ranking::{pair_loss, pair_loss_and_grads, ranking_accuracy, ranking_loss, train_ranking_scorer, RankingReport, RankingScorer, RankingTrainConfig};
pub use relevance::{RelevanceConfig, RelevanceScorer};
pub use repetition::{repetition_similarities, RepetitionConfig, RepetitionScorer};
pub use style::StyleScorer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerId {
    Repetition,
    Entailment,
    Relevance,
    Style,
}

impl ScorerId {
    pub const ALL: [ScorerId; 4] = [
        ScorerId::Repetition,
        ScorerId::Entailment,
        ScorerId::Relevance,
        ScorerId::Style,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerId::Repetition => "repetition",
            ScorerId::Entailment => "entailment",
            ScorerId::Relevance => "relevance",
            ScorerId::Style => "style",
        }
    }
}

impl fmt::Display for ScorerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::UnknownScorer(s.to_string()))
    }
}

/// A scorer's raw value together with the log-probability form used in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerOutput {
    pub raw: f64,
    pub log_prob: f64,
}

/// Scores a (context, continuation prefix) pair.
pub trait PrefixScorer: Sync {
    fn id(&self) -> ScorerId;

    fn score(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<ScorerOutput>;

    /// True when the score only changes at sentence boundaries, so a prefix
    /// that does not end a sentence may reuse its parent's value.
    fn carries_over(&self) -> bool {
        false
    }
}

/// Drops a trailing end-of-text symbol; scorers see words only.
pub(crate) fn strip_end(y: &[TokenId]) -> &[TokenId] {
    match y.split_last() {
        Some((&EOS, rest)) => rest,
        _ => y,
    }
}

pub(crate) fn check_vocab(ids: &[TokenId], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&t| t >= vocab_size) {
        Some(&t) => Err(Error::UnknownToken(t)),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scorer {
    Repetition(RepetitionScorer),
    Entailment(EntailmentScorer),
    Relevance(RelevanceScorer),
    Style(StyleScorer),
}

impl Scorer {
    fn params(&self) -> &ParamStore {
        match self {
            Scorer::Repetition(s) => s.params(),
            Scorer::Entailment(s) => s.params(),
            Scorer::Relevance(s) => s.params(),
            Scorer::Style(s) => s.params(),
        }
    }

    /// An untrained scorer with the same configuration and shapes.
    fn fresh(&self) -> Result<Scorer> {
        Ok(match self {
            Scorer::Repetition(s) => Scorer::Repetition(RepetitionScorer::new(
                s.config().clone(),
                s.embeddings().clone(),
                0,
            )?),
            Scorer::Entailment(s) => Scorer::Entailment(EntailmentScorer::new(
                s.config().clone(),
                Array2::zeros(s.embeddings().dim()),
                s.splitter().clone(),
                0,
            )?),
            Scorer::Relevance(s) => Scorer::Relevance(RelevanceScorer::new(
                s.config().clone(),
                Array2::zeros(s.embeddings().dim()),
                0,
            )?),
            Scorer::Style(s) => Scorer::Style(StyleScorer::new(Array2::zeros(s.embeddings().dim()), 0)?),
        })
    }

    pub fn save(&self, path: &Path, vocab_hash: &str, metadata: &BTreeMap<String, String>) -> Result<()> {
        let ckpt = ScorerCheckpoint {
            format: SCORER_FORMAT.to_string(),
            version: SCORER_VERSION,
            metadata: metadata.clone(),
            scorer_id: self.id(),
            vocab_hash: vocab_hash.to_string(),
            scorer: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?).map_err(io_err(path))
    }

    pub fn load(path: &Path, expected: ScorerId, vocab_hash: &str) -> Result<Scorer> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let ckpt: ScorerCheckpoint = serde_json::from_str(&text)?;
        let bad = |reason: String| Error::BadArtifact {
            path: path.to_path_buf(),
            reason,
        };
        if ckpt.format != SCORER_FORMAT || ckpt.version != SCORER_VERSION {
            return Err(bad(format!("unsupported format {} v{}", ckpt.format, ckpt.version)));
        }
        if ckpt.scorer_id != expected || ckpt.scorer.id() != expected {
            return Err(bad(format!("holds scorer `{}`, expected `{expected}`", ckpt.scorer_id)));
        }
        if ckpt.vocab_hash != vocab_hash {
            return Err(Error::VocabularyMismatch(path.to_path_buf()));
        }
        if !same_layout(ckpt.scorer.fresh()?.params(), ckpt.scorer.params()) {
            return Err(bad("parameter layout does not match config".into()));
        }
        Ok(ckpt.scorer)
    }
}

impl PrefixScorer for Scorer {
    fn id(&self) -> ScorerId {
        match self {
            Scorer::Repetition(_) => ScorerId::Repetition,
            Scorer::Entailment(_) => ScorerId::Entailment,
            Scorer::Relevance(_) => ScorerId::Relevance,
            Scorer::Style(_) => ScorerId::Style,
        }
    }

    fn score(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<ScorerOutput> {
        match self {
            Scorer::Repetition(s) => s.score(context, continuation),
            Scorer::Entailment(s) => s.score(context, continuation),
            Scorer::Relevance(s) => s.score(context, continuation),
            Scorer::Style(s) => s.score(context, continuation),
        }
    }

    fn carries_over(&self) -> bool {
        matches!(self, Scorer::Entailment(_))
    }
}

const SCORER_FORMAT: &str = "coopgen-scorer";
const SCORER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ScorerCheckpoint {
    format: String,
    version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    scorer_id: ScorerId,
    vocab_hash: String,
    scorer: Scorer,
}

/// Trained scorers, at most one per id, kept in id order.
#[derive(Clone, Debug, Default)]
pub struct ScorerSet {
    scorers: Vec<Scorer>,
}

impl ScorerSet {
    pub fn new(mut scorers: Vec<Scorer>) -> Self {
        scorers.sort_by_key(|s| s.id());
        scorers.dedup_by_key(|s| s.id());
        Self { scorers }
    }

    pub fn ids(&self) -> Vec<ScorerId> {
        self.scorers.iter().map(|s| s.id()).collect()
    }

    pub fn get(&self, id: ScorerId) -> Option<&Scorer> {
        self.scorers.iter().find(|s| s.id() == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Scorer> {
        self.scorers.iter()
    }

    /// Keeps only the listed scorers.
    pub fn restricted(&self, ids: &[ScorerId]) -> Result<ScorerSet> {
        let scorers = ids
            .iter()
            .map(|&id| self.get(id).cloned().ok_or_else(|| Error::InactiveScorer(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScorerSet::new(scorers))
    }

    pub fn as_dyn(&self) -> Vec<&dyn PrefixScorer> {
        self.scorers.iter().map(|s| s as &dyn PrefixScorer).collect()
    }

    /// Score of the named scorer on `y_prefix`. Each call recomputes from scratch.
    pub fn score_prefix(&self, scorer: &str, context: &[TokenId], y_prefix: &[TokenId]) -> Result<ScorerOutput> {
        let id: ScorerId = scorer.parse()?;
        self.get(id)
            .ok_or_else(|| Error::InactiveScorer(scorer.to_string()))?
            .score(context, y_prefix)
    }
}
