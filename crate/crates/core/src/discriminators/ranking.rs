use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{RankingPair, TokenId};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer};
use crate::rng::{self, Rng};
use crate::tensor::{log_sigmoid, Grads, ParamId, ParamStore, Tape, Var};

/// A scorer trained to rank gold continuations above negatives.
pub trait RankingScorer {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Parameters the optimizer must leave alone.
    fn frozen(&self) -> Vec<ParamId> {
        Vec::new()
    }

    /// Ranking score `s(x, y)` recorded on `tape`; dropout applies only when `rng` is given.
    fn score_var(
        &self,
        tape: &mut Tape,
        context: &[TokenId],
        y: &[TokenId],
        dropout: f64,
        rng: Option<&mut Rng>,
    ) -> Var;

    fn ranking_score(&self, context: &[TokenId], y: &[TokenId]) -> f64 {
        let mut tape = Tape::new(self.params());
        let v = self.score_var(&mut tape, context, y, 0.0, None);
        tape.scalar(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for RankingTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 5,
            dropout: 0.5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// Mean pair loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of training pairs with `s(gold) > s(negative)` after training.
    pub accuracy: f64,
}

/// `−log σ(s_gold − s_negative)`
pub fn ranking_loss(gold: f64, negative: f64) -> f64 {
    -log_sigmoid(gold - negative)
}

pub fn ranking_accuracy<S: RankingScorer + ?Sized>(scorer: &S, pairs: &[RankingPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let wins = pairs
        .iter()
        .filter(|p| scorer.ranking_score(&p.context, &p.gold) > scorer.ranking_score(&p.context, &p.negative))
        .count();
    wins as f64 / pairs.len() as f64
}

/// Mean ranking loss of a batch of pairs on one tape.
pub(crate) fn batch_loss<S: RankingScorer + ?Sized>(
    scorer: &S,
    tape: &mut Tape,
    pairs: &[&RankingPair],
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> Var {
    let mut total: Option<Var> = None;
    for p in pairs {
        let g = scorer.score_var(tape, &p.context, &p.gold, dropout, rng.as_deref_mut());
        let n = scorer.score_var(tape, &p.context, &p.negative, dropout, rng.as_deref_mut());
        let diff = tape.sub(g, n);
        let l = tape.log_sigmoid(diff);
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    tape.scale(total.expect("empty batch"), -1.0 / pairs.len() as f64)
}

/// Mean pair loss and its gradients without dropout.
pub fn pair_loss_and_grads<S: RankingScorer + ?Sized>(scorer: &S, pairs: &[RankingPair]) -> (f64, Grads) {
    let refs: Vec<&RankingPair> = pairs.iter().collect();
    let mut tape = Tape::new(scorer.params());
    let l = batch_loss(scorer, &mut tape, &refs, 0.0, None);
    (tape.scalar(l), tape.backward(l))
}

pub fn pair_loss<S: RankingScorer + ?Sized>(scorer: &S, pairs: &[RankingPair]) -> f64 {
    let refs: Vec<&RankingPair> = pairs.iter().collect();
    let mut tape = Tape::new(scorer.params());
    let l = batch_loss(scorer, &mut tape, &refs, 0.0, None);
    tape.scalar(l)
}

/// Adam on `mean −log σ(s(gold) − s(negative))` over shuffled mini-batches.
pub fn train_ranking_scorer<S: RankingScorer + ?Sized>(
    scorer: &mut S,
    pairs: &[RankingPair],
    config: &RankingTrainConfig,
) -> Result<RankingReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("ranking pairs"));
    }
    if config.batch_size == 0 || config.learning_rate < 0.0 || !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Config("ranking batch size must be positive, lr >= 0, dropout in [0, 1)".into()));
    }
    let mut opt = Adam::new(scorer.params(), config.learning_rate);
    opt.frozen = scorer.frozen();
    let mut r = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&RankingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::new(scorer.params());
                let l = batch_loss(scorer, &mut tape, &batch, config.dropout, Some(&mut r));
                (tape.scalar(l), tape.backward(l))
            };
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("ranking loss {loss} in epoch {epoch}")));
            }
            opt.step(scorer.params_mut(), &grads);
            sum += loss * batch.len() as f64;
        }
        let mean = sum / pairs.len() as f64;
        log::info!("ranking epoch {epoch} loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(RankingReport {
        epoch_losses,
        accuracy: ranking_accuracy(scorer, pairs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_cost_log_two() {
        assert!((ranking_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn swapped_pair_losses_sum_to_at_least_two_log_two() {
        for (g, n) in [(0.0, 0.0), (1.5, -0.2), (-3.0, 4.0)] {
            let sum = ranking_loss(g, n) + ranking_loss(n, g);
            assert!(sum >= 2.0 * std::f64::consts::LN_2 - 1e-12);
            if g == n {
                assert!((sum - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
            }
        }
    }
}
