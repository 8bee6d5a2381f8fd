//! The decoding objective `f_λ(x, y) = log P_lm(y | x) + Σ_k λ_k s_k(x, y)` and
//! online fitting of the mixture weights `λ`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SentenceSplitter, TokenId, EOS};
use crate::discriminators::{PrefixScorer, ScorerId, ScorerOutput};
use crate::error::{io_err, Error, Result};
use crate::lm::LanguageModel;

/// One weight per active scorer, in scorer-id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    weights: Vec<(ScorerId, f64)>,
}

const LAMBDA_FORMAT: &str = "coopgen-lambda";
const LAMBDA_VERSION: u32 = 1;

impl MixtureWeights {
    /// Every weight starts at the same value.
    pub fn uniform(ids: &[ScorerId], value: f64) -> Self {
        let mut weights: Vec<(ScorerId, f64)> = ids.iter().map(|&id| (id, value)).collect();
        weights.sort_by_key(|w| w.0);
        weights.dedup_by_key(|w| w.0);
        Self { weights }
    }

    pub fn from_pairs(pairs: &[(ScorerId, f64)]) -> Self {
        let mut w = Self::uniform(&pairs.iter().map(|p| p.0).collect::<Vec<_>>(), 0.0);
        for &(id, v) in pairs {
            w.set(id, v);
        }
        w
    }

    pub fn ids(&self) -> Vec<ScorerId> {
        self.weights.iter().map(|w| w.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.1).collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, id: ScorerId) -> Option<f64> {
        self.weights.iter().find(|w| w.0 == id).map(|w| w.1)
    }

    pub fn set(&mut self, id: ScorerId, value: f64) {
        if let Some(w) = self.weights.iter_mut().find(|w| w.0 == id) {
            w.1 = value;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|&(id, v)| (id, v * factor)).collect(),
        }
    }

    /// `name=value` lines under a format header; `#` lines carry free-form metadata.
    pub fn to_text(&self, metadata: &[(&str, String)]) -> String {
        let mut out = format!("format={LAMBDA_FORMAT}\nversion={LAMBDA_VERSION}\n");
        for (k, v) in metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for (id, v) in &self.weights {
            out.push_str(&format!("{id}={v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut format = None;
        let mut version = None;
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("weights line without `=`: {line}")))?;
            match k.trim() {
                "format" => format = Some(v.trim().to_string()),
                "version" => version = v.trim().parse::<u32>().ok(),
                name => {
                    let id: ScorerId = name.parse()?;
                    let value: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("weight for {name} is not a number: {v}")))?;
                    pairs.push((id, value));
                }
            }
        }
        if format.as_deref() != Some(LAMBDA_FORMAT) || version != Some(LAMBDA_VERSION) {
            return Err(Error::Config("not a mixture-weights record of a supported version".into()));
        }
        Ok(Self::from_pairs(&pairs))
    }

    pub fn save(&self, path: &Path, metadata: &[(&str, String)]) -> Result<()> {
        std::fs::write(path, self.to_text(metadata)).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text).map_err(|e| Error::BadArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// `lm + Σ_k λ_k s_k`, summed in scorer order.
pub fn combine(lm_logprob: f64, weights: &[f64], scores: &[f64]) -> f64 {
    weights.iter().zip(scores).fold(lm_logprob, |acc, (w, s)| acc + w * s)
}

/// Language model plus weighted scorers.
pub struct CompositeObjective<'a> {
    lm: &'a LanguageModel,
    scorers: Vec<&'a dyn PrefixScorer>,
    weights: MixtureWeights,
    splitter: SentenceSplitter,
}

impl<'a> CompositeObjective<'a> {
    pub fn new(
        lm: &'a LanguageModel,
        scorers: Vec<&'a dyn PrefixScorer>,
        weights: MixtureWeights,
        splitter: SentenceSplitter,
    ) -> Result<Self> {
        let mut scorers = scorers;
        scorers.sort_by_key(|s| s.id());
        let ids: Vec<ScorerId> = scorers.iter().map(|s| s.id()).collect();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each scorer may appear only once".into()));
        }
        if ids != weights.ids() {
            return Err(Error::Config(format!(
                "weights cover {:?} but the active scorers are {:?}",
                weights.ids(),
                ids
            )));
        }
        Ok(Self {
            lm,
            scorers,
            weights,
            splitter,
        })
    }

    /// The plain language model with no scorers.
    pub fn lm_only(lm: &'a LanguageModel, splitter: SentenceSplitter) -> Self {
        Self {
            lm,
            scorers: Vec::new(),
            weights: MixtureWeights::uniform(&[], 0.0),
            splitter,
        }
    }

    pub fn lm(&self) -> &'a LanguageModel {
        self.lm
    }

    pub fn scorers(&self) -> &[&'a dyn PrefixScorer] {
        &self.scorers
    }

    pub fn weights(&self) -> &MixtureWeights {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: MixtureWeights) -> Result<()> {
        if weights.ids() != self.weights.ids() {
            return Err(Error::Config("replacement weights cover different scorers".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn splitter(&self) -> &SentenceSplitter {
        &self.splitter
    }

    /// Every active scorer evaluated from scratch on `y`.
    pub fn scorer_outputs(&self, context: &[TokenId], y: &[TokenId]) -> Result<Vec<ScorerOutput>> {
        self.scorers.iter().map(|s| s.score(context, y)).collect()
    }

    pub fn combine_outputs(&self, lm_logprob: f64, outputs: &[ScorerOutput]) -> f64 {
        let scores: Vec<f64> = outputs.iter().map(|o| o.log_prob).collect();
        combine(lm_logprob, &self.weights.values(), &scores)
    }

    pub fn composite_score(&self, context: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let lm = self.lm.conditional_logprob(context, y)?;
        Ok(self.combine_outputs(lm, &self.scorer_outputs(context, y)?))
    }

    /// Composite score of `y` followed by the end symbol.
    pub fn termination_score(&self, context: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let mut full = y.to_vec();
        full.push(EOS);
        self.composite_score(context, &full)
    }

    /// LM log-probability and scorer log-probabilities of a finished continuation.
    pub fn features(&self, context: &[TokenId], y: &[TokenId]) -> Result<Features> {
        let mut full = y.to_vec();
        full.push(EOS);
        Ok(Features {
            lm: self.lm.conditional_logprob(context, &full)?,
            scores: self.scorer_outputs(context, &full)?.iter().map(|o| o.log_prob).collect(),
        })
    }
}

/// The parts of `f_λ` that do not depend on `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub lm: f64,
    pub scores: Vec<f64>,
}

impl Features {
    pub fn value(&self, weights: &[f64]) -> f64 {
        combine(self.lm, weights, &self.scores)
    }
}

/// `(f_λ(gold) − f_λ(generated))²`
pub fn mixture_loss(gold: &Features, generated: &Features, weights: &[f64]) -> f64 {
    let r = gold.value(weights) - generated.value(weights);
    r * r
}

/// `∂/∂λ_k = 2 (f_λ(gold) − f_λ(generated)) (s_k(gold) − s_k(generated))`; the LM term cancels.
pub fn mixture_gradient(gold: &Features, generated: &Features, weights: &[f64]) -> Vec<f64> {
    let r = gold.value(weights) - generated.value(weights);
    gold.scores
        .iter()
        .zip(&generated.scores)
        .map(|(g, s)| 2.0 * r * (g - s))
        .collect()
}

/// Supplies gold features and generations for the online weight fit.
pub trait MixtureTask {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gold(&self, example: usize) -> Result<Features>;

    /// Features of the continuation the decoder produces for `example` under `weights`.
    fn generate(&mut self, example: usize, weights: &MixtureWeights, seed: u64) -> Result<Features>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub initial_weight: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 1,
            initial_weight: 1.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureStep {
    pub epoch: usize,
    pub example: usize,
    pub loss: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub weights: MixtureWeights,
    pub trace: Vec<MixtureStep>,
}

/// One gradient step on `(f_λ(x, y) − f_λ(x, A(x)))²` per example, where each
/// generation `A(x)` uses the weights as they stand at that moment.
pub fn learn_mixture_weights<T: MixtureTask + ?Sized>(
    task: &mut T,
    ids: &[ScorerId],
    config: &MixtureConfig,
) -> Result<MixtureReport> {
    if task.is_empty() {
        return Err(Error::Empty("mixture-weight examples"));
    }
    let mut weights = MixtureWeights::uniform(ids, config.initial_weight);
    let mut trace = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        for i in 0..task.len() {
            let gold = task.gold(i)?;
            let generated = task.generate(i, &weights, crate::rng::derive(config.seed, step))?;
            let values = weights.values();
            let loss = mixture_loss(&gold, &generated, &values);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("mixture loss {loss} at example {i}")));
            }
            let grad = mixture_gradient(&gold, &generated, &values);
            for (k, id) in weights.ids().into_iter().enumerate() {
                weights.set(id, values[k] - config.learning_rate * grad[k]);
            }
            log::debug!("mixture step {step} loss {loss:.4} weights {:?}", weights.values());
            trace.push(MixtureStep {
                epoch,
                example: i,
                loss,
                weights: weights.values(),
            });
            step += 1;
        }
    }
    Ok(MixtureReport { weights, trace })
}
