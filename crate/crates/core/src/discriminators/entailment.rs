use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_vocab, strip_end, ScorerOutput};
use crate::corpus::{NliLabel, NliTriple, SentenceSplitter, TokenId};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::optim::{AdaGrad, Optimizer};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntailmentConfig {
    pub hidden_size: usize,
}

impl Default for EntailmentConfig {
    fn default() -> Self {
        Self { hidden_size: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// Starting value of AdaGrad's squared-gradient sums.
    pub initial_accumulator: f64,
    pub seed: u64,
}

impl Default for NliTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            batch_size: 16,
            epochs: 10,
            dropout: 0.2,
            initial_accumulator: 0.1,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliReport {
    pub epoch_losses: Vec<f64>,
    /// Accuracy on the training triples after the last epoch.
    pub accuracy: f64,
}

/// Decomposable attention classifier (attend, compare, aggregate) without
/// intra-sentence attention, used to penalise sentences that follow from or
/// contradict what came before.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntailmentScorer {
    config: EntailmentConfig,
    splitter: SentenceSplitter,
    params: ParamStore,
    embedding: ParamId,
    projection: Linear,
    attend: Mlp2,
    compare: Mlp2,
    aggregate: Mlp2,
    output: Linear,
}

impl EntailmentScorer {
    pub fn new(config: EntailmentConfig, embeddings: Array2<f64>, splitter: SentenceSplitter, seed: u64) -> Result<Self> {
        let h = config.hidden_size;
        if h == 0 || embeddings.ncols() == 0 {
            return Err(Error::Config("entailment hidden size and embedding width must be positive".into()));
        }
        let d = embeddings.ncols();
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        let embedding = params.add("nli.embedding", embeddings);
        let projection = Linear::new(&mut params, "nli.projection", d, h, false, &mut r);
        let attend = Mlp2::new(&mut params, "nli.attend", h, h, &mut r);
        let compare = Mlp2::new(&mut params, "nli.compare", 2 * h, h, &mut r);
        let aggregate = Mlp2::new(&mut params, "nli.aggregate", 2 * h, h, &mut r);
        let output = Linear::new(&mut params, "nli.output", h, 3, true, &mut r);
        Ok(Self {
            config,
            splitter,
            params,
            embedding,
            projection,
            attend,
            compare,
            aggregate,
            output,
        })
    }

    pub fn config(&self) -> &EntailmentConfig {
        &self.config
    }

    pub fn splitter(&self) -> &SentenceSplitter {
        &self.splitter
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        self.params.get(self.embedding)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    /// Class logits `1×3` for premise `a` and hypothesis `b`.
    fn logits_var(&self, tape: &mut Tape, a: &[TokenId], b: &[TokenId], rate: f64, mut rng: Option<&mut Rng>) -> Var {
        let e = tape.param(self.embedding);
        let ea = tape.gather_rows(e, a);
        let eb = tape.gather_rows(e, b);
        let a_bar = self.projection.forward(tape, ea);
        let b_bar = self.projection.forward(tape, eb);

        let fa = self.attend.forward(tape, a_bar, rate, rng.as_deref_mut());
        let fb = self.attend.forward(tape, b_bar, rate, rng.as_deref_mut());
        let scores = tape.matmul_t(fa, fb);
        let to_b = tape.softmax_rows(scores);
        let beta = tape.matmul(to_b, b_bar);
        let scores_t = tape.transpose(scores);
        let to_a = tape.softmax_rows(scores_t);
        let alpha = tape.matmul(to_a, a_bar);

        let pa = tape.concat_cols(a_bar, beta);
        let pb = tape.concat_cols(b_bar, alpha);
        let v1 = self.compare.forward(tape, pa, rate, rng.as_deref_mut());
        let v2 = self.compare.forward(tape, pb, rate, rng.as_deref_mut());
        let v1 = tape.sum_rows(v1);
        let v2 = tape.sum_rows(v2);
        let v = tape.concat_cols(v1, v2);
        let hidden = self.aggregate.forward(tape, v, rate, rng);
        self.output.forward(tape, hidden)
    }

    fn validate(&self, a: &[TokenId], b: &[TokenId]) -> Result<()> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let v = self.embeddings().nrows();
        check_vocab(a, v)?;
        check_vocab(b, v)
    }

    /// Log-probabilities in label order (contradiction, entailment, neutral).
    pub fn log_probs(&self, a: &[TokenId], b: &[TokenId]) -> Result<[f64; 3]> {
        self.validate(a, b)?;
        let mut tape = Tape::new(&self.params);
        let logits = self.logits_var(&mut tape, a, b, 0.0, None);
        let lp = tape.log_softmax_rows(logits);
        let row = tape.value(lp);
        Ok([row[[0, 0]], row[[0, 1]], row[[0, 2]]])
    }

    pub fn classify(&self, a: &[TokenId], b: &[TokenId]) -> Result<[f64; 3]> {
        Ok(self.log_probs(a, b)?.map(f64::exp))
    }

    pub fn predict(&self, a: &[TokenId], b: &[TokenId]) -> Result<NliLabel> {
        let lp = self.log_probs(a, b)?;
        let best = (0..3).fold(0, |m, i| if lp[i] > lp[m] { i } else { m });
        Ok(NliLabel::ALL[best])
    }

    /// `min_{a ∈ S(x) ∪ S_init(y)} log P(neutral | a, S_last(y))`.
    ///
    /// Only complete sentences take part. With no complete sentence in `y`
    /// (or nothing to compare against) the score is 0, so a prefix that does
    /// not end a sentence always scores the same as its last sentence boundary.
    pub fn score(&self, context: &[TokenId], y: &[TokenId]) -> Result<ScorerOutput> {
        let y = strip_end(y);
        let done = self.splitter.complete_sentences(self.splitter.complete_prefix(y));
        let Some((last, earlier)) = done.split_last() else {
            return Ok(ScorerOutput { raw: 0.0, log_prob: 0.0 });
        };
        let mut value: Option<f64> = None;
        for premise in self.splitter.complete_sentences(context).iter().chain(earlier) {
            let neutral = self.log_probs(premise, last)?[NliLabel::Neutral.index()];
            value = Some(value.map_or(neutral, |v: f64| v.min(neutral)));
        }
        let v = value.unwrap_or(0.0);
        Ok(ScorerOutput { raw: v, log_prob: v })
    }

    /// Mean cross-entropy of a batch on one tape.
    pub(crate) fn batch_loss(&self, tape: &mut Tape, batch: &[&NliTriple], rate: f64, mut rng: Option<&mut Rng>) -> Var {
        let mut total: Option<Var> = None;
        for t in batch {
            let logits = self.logits_var(tape, &t.premise, &t.hypothesis, rate, rng.as_deref_mut());
            let lp = tape.log_softmax_rows(logits);
            let picked = tape.pick_sum(lp, &[(0, t.label.index())]);
            total = Some(match total {
                Some(s) => tape.add(s, picked),
                None => picked,
            });
        }
        tape.scale(total.expect("empty batch"), -1.0 / batch.len() as f64)
    }

    pub fn loss(&self, triples: &[NliTriple]) -> f64 {
        let refs: Vec<&NliTriple> = triples.iter().collect();
        let mut tape = Tape::new(&self.params);
        let l = self.batch_loss(&mut tape, &refs, 0.0, None);
        tape.scalar(l)
    }

    pub fn loss_and_grads(&self, triples: &[NliTriple]) -> (f64, crate::tensor::Grads) {
        let refs: Vec<&NliTriple> = triples.iter().collect();
        let mut tape = Tape::new(&self.params);
        let l = self.batch_loss(&mut tape, &refs, 0.0, None);
        (tape.scalar(l), tape.backward(l))
    }

    pub fn accuracy(&self, triples: &[NliTriple]) -> Result<f64> {
        if triples.is_empty() {
            return Err(Error::Empty("nli triples"));
        }
        let mut correct = 0;
        for t in triples {
            if self.predict(&t.premise, &t.hypothesis)? == t.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / triples.len() as f64)
    }

    /// AdaGrad on mean cross-entropy over shuffled mini-batches.
    pub fn train(&mut self, triples: &[NliTriple], config: &NliTrainConfig) -> Result<NliReport> {
        let labels = NliLabel::ALL.iter().filter(|l| triples.iter().any(|t| t.label == **l)).count();
        if labels < 3 {
            return Err(Error::SingleClass(labels));
        }
        if config.batch_size == 0 || config.learning_rate < 0.0 || config.initial_accumulator < 0.0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config("nli batch size must be positive, lr >= 0, dropout in [0, 1)".into()));
        }
        for t in triples {
            self.validate(&t.premise, &t.hypothesis)?;
        }
        let mut opt = AdaGrad::with_accumulator(&self.params, config.learning_rate, config.initial_accumulator);
        let mut r = rng::seeded(config.seed);
        let mut order: Vec<usize> = (0..triples.len()).collect();
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut r);
            let mut sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&NliTriple> = chunk.iter().map(|&i| &triples[i]).collect();
                let (loss, grads) = {
                    let mut tape = Tape::new(&self.params);
                    let l = self.batch_loss(&mut tape, &batch, config.dropout, Some(&mut r));
                    (tape.scalar(l), tape.backward(l))
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("nli loss {loss} in epoch {epoch}")));
                }
                opt.step(&mut self.params, &grads);
                sum += loss * batch.len() as f64;
            }
            let mean = sum / triples.len() as f64;
            log::info!("nli epoch {epoch} loss {mean:.4}");
            epoch_losses.push(mean);
        }
        Ok(NliReport {
            epoch_losses,
            accuracy: self.accuracy(triples)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    const DOT: TokenId = 4;

    fn scorer() -> EntailmentScorer {
        let e = uniform(&mut rng::seeded(3), 12, 4, 0.5);
        EntailmentScorer::new(EntailmentConfig { hidden_size: 5 }, e, SentenceSplitter::new(vec![DOT]), 9).unwrap()
    }

    fn zero_output(s: &mut EntailmentScorer) {
        let out = s.output_layer().clone();
        s.params_mut().get_mut(out.weight).fill(0.0);
        s.params_mut().get_mut(out.bias.unwrap()).fill(0.0);
    }

    #[test]
    fn zeroed_output_layer_is_uniform() {
        let mut s = scorer();
        zero_output(&mut s);
        for p in s.classify(&[5, 6, DOT], &[7, DOT]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_complete_sentence_scores_zero() {
        let s = scorer();
        assert_eq!(s.score(&[5, 6, DOT], &[7, 8]).unwrap().log_prob, 0.0);
        assert_eq!(s.score(&[5, 6, DOT], &[]).unwrap().log_prob, 0.0);
    }

    #[test]
    fn single_premise_is_the_neutral_log_prob() {
        let s = scorer();
        let out = s.score(&[5, 6, DOT], &[7, 8, DOT, 9]).unwrap();
        let direct = s.log_probs(&[5, 6, DOT], &[7, 8, DOT]).unwrap()[2];
        assert_eq!(out.log_prob, direct);
    }

    #[test]
    fn trailing_words_do_not_change_the_score() {
        let s = scorer();
        let ctx = [5, 6, DOT, 10, DOT];
        let base = s.score(&ctx, &[7, 8, DOT, 9, DOT]).unwrap();
        let longer = s.score(&ctx, &[7, 8, DOT, 9, DOT, 11, 5]).unwrap();
        assert_eq!(base, longer);
    }

    #[test]
    fn single_class_data_is_rejected() {
        let mut s = scorer();
        let t = NliTriple {
            premise: vec![5, DOT],
            hypothesis: vec![6, DOT],
            label: NliLabel::Neutral,
        };
        assert!(matches!(s.train(&[t.clone(), t], &NliTrainConfig::default()), Err(Error::SingleClass(1))));
    }
}
