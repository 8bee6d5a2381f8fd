//! Sampled beam search over the composite objective.
//!
//! Each step expands every hypothesis by its `k` most likely next words, scores
//! the `k²` candidates with the full objective (recomputed on the whole prefix,
//! never accumulated), then draws the next beam from them.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS};
use crate::discriminators::ScorerOutput;
use crate::error::{Error, Result};
use crate::lm::{is_generatable, LmState};
use crate::objective::CompositeObjective;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Sample without replacement from `softmax(score / temperature)`.
    Sample,
    /// Keep the highest-scoring candidates (the zero-temperature limit).
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub temperature: f64,
    pub selection: SelectionMode,
    pub max_steps: usize,
    /// Sentences a continuation needs before it may be returned; `None` lets
    /// any hypothesis terminate.
    pub target_sentences: Option<usize>,
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            temperature: 1.8,
            selection: SelectionMode::Sample,
            max_steps: 150,
            target_sentences: Some(5),
            seed: 1,
        }
    }
}

impl BeamConfig {
    /// Plain language-model beam search: beam 5, deterministic selection.
    pub fn baseline() -> Self {
        Self {
            beam_size: 5,
            selection: SelectionMode::TopK,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("beam size and max steps must be at least 1".into()));
        }
        if self.selection == SelectionMode::Sample && (self.temperature.is_nan() || self.temperature <= 0.0) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        if self.target_sentences == Some(0) {
            return Err(Error::Config("target sentence count must be positive".into()));
        }
        Ok(())
    }
}

/// A partial continuation in the beam.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Continuation tokens only; the context lives with the search.
    pub tokens: Vec<TokenId>,
    pub lm_logprob: f64,
    /// One output per active scorer, in scorer order.
    pub scores: Vec<ScorerOutput>,
    /// Composite objective of the current prefix.
    pub score: f64,
    pub sentences: usize,
    parent_state: Option<Arc<LmState>>,
    state: Option<Arc<LmState>>,
}

impl Hypothesis {
    /// Empty continuation with the language model conditioned on `context`.
    pub fn root(objective: &CompositeObjective, context: &[TokenId]) -> Result<Self> {
        let state = objective.lm().condition(context)?;
        Ok(Self {
            tokens: Vec::new(),
            lm_logprob: 0.0,
            scores: Vec::new(),
            score: 0.0,
            sentences: 0,
            parent_state: None,
            state: Some(Arc::new(state)),
        })
    }

    /// Language-model state after this hypothesis's tokens, computed on first use.
    fn state(&mut self, objective: &CompositeObjective) -> Arc<LmState> {
        if self.state.is_none() {
            let parent = self.parent_state.as_ref().expect("non-root hypothesis has a parent state");
            let last = *self.tokens.last().expect("non-root hypothesis has tokens");
            self.state = Some(Arc::new(objective.lm().advance(parent, last)));
        }
        self.state.clone().unwrap()
    }
}

/// Top-`k` generatable ids by log-probability; ties go to the lower id.
pub fn top_k_tokens(logp: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..logp.len()).filter(|&t| is_generatable(t)).collect();
    ids.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Children of each beam hypothesis via its `k` best next words. Scores are left unset.
pub fn expand_hypotheses(objective: &CompositeObjective, beam: &mut [Hypothesis], k: usize) -> Vec<Hypothesis> {
    let mut out = Vec::with_capacity(beam.len() * k);
    for h in beam.iter_mut() {
        let state = h.state(objective);
        let logp = objective.lm().log_probs(&state);
        for t in top_k_tokens(&logp, k) {
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            out.push(Hypothesis {
                tokens,
                lm_logprob: h.lm_logprob + logp[t],
                scores: h.scores.clone(),
                score: f64::NAN,
                sentences: h.sentences,
                parent_state: Some(state.clone()),
                state: None,
            });
        }
    }
    out
}

fn score_one(objective: &CompositeObjective, context: &[TokenId], h: &Hypothesis) -> Result<Vec<ScorerOutput>> {
    let ends_sentence = h
        .tokens
        .last()
        .is_some_and(|&t| objective.splitter().is_terminator(t));
    objective
        .scorers()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.carries_over() && !ends_sentence && i < h.scores.len() {
                Ok(h.scores[i])
            } else {
                s.score(context, &h.tokens)
            }
        })
        .collect()
}

/// Sets each candidate's scorer outputs and composite score from its full prefix.
///
/// Scorers that only change at sentence ends keep the parent's value unless the
/// candidate ends in a terminator.
pub fn score_candidates(objective: &CompositeObjective, context: &[TokenId], candidates: &mut [Hypothesis]) -> Result<()> {
    let outputs: Vec<Result<Vec<ScorerOutput>>> = candidates
        .par_iter()
        .map(|h| score_one(objective, context, h))
        .collect();
    for (h, out) in candidates.iter_mut().zip(outputs) {
        h.scores = out?;
        h.score = objective.combine_outputs(h.lm_logprob, &h.scores);
        h.sentences = objective.splitter().count_complete(&h.tokens);
    }
    Ok(())
}

/// Indices of `k` candidates. `tie_keys` orders equal scores (lower first) before the index does.
pub fn sample_next_beam(
    scores: &[f64],
    tie_keys: &[usize],
    k: usize,
    selection: SelectionMode,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if scores.len() < k {
        return Err(Error::TooFewCandidates {
            needed: k,
            got: scores.len(),
        });
    }
    let keys: Vec<f64> = match selection {
        SelectionMode::TopK => scores.to_vec(),
        // Perturbing with Gumbel noise and keeping the top k is sequential
        // sampling without replacement from softmax(score / t).
        SelectionMode::Sample => scores
            .iter()
            .map(|s| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                s / temperature - (-u.ln()).ln()
            })
            .collect(),
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .total_cmp(&keys[a])
            .then(tie_keys[a].cmp(&tie_keys[b]))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Composite score with the end symbol appended, from the hypothesis's own state.
///
/// Scorers ignore a trailing end symbol, so only the language-model term moves.
pub fn termination_score(objective: &CompositeObjective, h: &mut Hypothesis) -> f64 {
    let state = h.state(objective);
    let logp = objective.lm().log_probs(&state);
    objective.combine_outputs(h.lm_logprob + logp[EOS], &h.scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub best_score: Option<f64>,
    pub beam_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub continuation: Vec<TokenId>,
    /// Composite score of the continuation with the end symbol.
    pub score: f64,
    pub lm_logprob: f64,
    pub scorer_outputs: Vec<ScorerOutput>,
    pub steps: Vec<StepRecord>,
    /// Set when no hypothesis reached the target within `max_steps`.
    pub forced: bool,
}

struct Best {
    hypothesis: Hypothesis,
    score: f64,
}

fn eligible(h: &Hypothesis, config: &BeamConfig) -> bool {
    !h.tokens.is_empty() && config.target_sentences.is_none_or(|n| h.sentences >= n)
}

fn offer(best: &mut Option<Best>, h: &Hypothesis, score: f64) {
    if best.as_ref().is_none_or(|b| score > b.score) {
        *best = Some(Best {
            hypothesis: h.clone(),
            score,
        });
    }
}

pub fn beam_search(objective: &CompositeObjective, context: &[TokenId], config: &BeamConfig) -> Result<Generation> {
    config.validate()?;
    let k = config.beam_size;
    let mut r = rng::seeded(config.seed);
    let mut beam = vec![Hypothesis::root(objective, context)?];
    let mut best: Option<Best> = None;
    let mut steps = Vec::new();
    let mut last_beam: Vec<Hypothesis> = Vec::new();

    for step in 0..config.max_steps {
        // Stop once no hypothesis could beat the best by ending here.
        let mut all_below = best.is_some();
        for h in beam.iter_mut().filter(|h| !h.tokens.is_empty()) {
            let ts = termination_score(objective, h);
            if eligible(h, config) {
                offer(&mut best, h, ts);
            }
            if best.as_ref().is_none_or(|b| ts >= b.score) {
                all_below = false;
            }
        }
        if all_below {
            break;
        }

        let mut candidates = expand_hypotheses(objective, &mut beam, k);
        score_candidates(objective, context, &mut candidates)?;
        let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
        let last_tokens: Vec<usize> = candidates.iter().map(|c| *c.tokens.last().unwrap()).collect();
        let picked = sample_next_beam(
            &scores,
            &last_tokens,
            k.min(candidates.len()),
            config.selection,
            config.temperature,
            &mut r,
        )?;
        let mut slots: Vec<Option<Hypothesis>> = candidates.into_iter().map(Some).collect();
        beam = picked.iter().map(|&i| slots[i].take().unwrap()).collect();

        // Hypotheses that reached the target length are finished, not expanded further.
        if let Some(target) = config.target_sentences {
            let (mut done, rest): (Vec<_>, Vec<_>) = beam.into_iter().partition(|h| h.sentences >= target);
            for h in done.iter_mut() {
                let ts = termination_score(objective, h);
                offer(&mut best, h, ts);
            }
            beam = rest;
        }
        steps.push(StepRecord {
            step,
            best_score: best.as_ref().map(|b| b.score),
            beam_scores: beam.iter().map(|h| h.score).collect(),
        });
        if beam.is_empty() {
            break;
        }
        last_beam = beam.clone();
    }

    let mut forced = false;
    let best = match best {
        Some(b) => b,
        None => {
            forced = true;
            log::warn!("no continuation reached the target within {} steps", config.max_steps);
            let mut pool = if beam.is_empty() { last_beam } else { beam };
            let mut chosen: Option<Best> = None;
            for h in pool.iter_mut() {
                let ts = termination_score(objective, h);
                offer(&mut chosen, h, ts);
            }
            chosen.ok_or(Error::Empty("beam"))?
        }
    };
    let h = best.hypothesis;
    Ok(Generation {
        lm_logprob: h.lm_logprob,
        scorer_outputs: h.scores,
        continuation: h.tokens,
        score: best.score,
        steps,
        forced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn top_k_breaks_ties_by_lower_id() {
        let logp = vec![0.0, 0.0, 0.0, 0.0, -1.0, -0.5, -0.5, -2.0];
        assert_eq!(top_k_tokens(&logp, 2), vec![5, 6]);
        assert_eq!(top_k_tokens(&logp, 3), vec![5, 6, 4]);
    }

    #[test]
    fn top_k_selection_orders_by_score_then_keys() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let picked = sample_next_beam(&[1.0, 3.0, 3.0, 2.0], &[9, 8, 7, 6], 3, SelectionMode::TopK, 1.0, &mut r).unwrap();
        assert_eq!(picked, vec![2, 1, 3]);
        assert!(matches!(
            sample_next_beam(&[1.0], &[0], 2, SelectionMode::TopK, 1.0, &mut r),
            Err(Error::TooFewCandidates { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn sampling_draws_distinct_candidates() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut picked = sample_next_beam(&[0.0; 6], &[0; 6], 4, SelectionMode::Sample, 1.8, &mut r).unwrap();
            picked.sort();
            picked.dedup();
            assert_eq!(picked.len(), 4);
        }
    }

    #[test]
    fn two_to_one_odds_at_unit_temperature() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                sample_next_beam(&[0.0, 2f64.ln()], &[0, 1], 1, SelectionMode::Sample, 1.0, &mut r).unwrap()[0] == 1
            })
            .count();
        let p = 2.0 / 3.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * sigma);
    }
}
