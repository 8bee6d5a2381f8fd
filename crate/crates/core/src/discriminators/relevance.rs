use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_vocab, strip_end, RankingScorer, ScorerOutput};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{dropout, uniform, Linear};
use crate::rng::{self, Rng};
use crate::tensor::{log_sigmoid, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    /// Convolution output channels; the pooled vectors have this dimension.
    pub filters: usize,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self { filters: 64 }
    }
}

/// Width-3 convolution as a linear map over `[x_{i−1}, x_i, x_{i+1}]`, zero padded.
fn conv3(tape: &mut Tape, conv: &Linear, x: Var) -> Var {
    let prev = tape.shift_rows(x, 1);
    let next = tape.shift_rows(x, -1);
    let left = tape.concat_cols(prev, x);
    let window = tape.concat_cols(left, next);
    conv.forward(tape, window)
}

/// Convolutional encoders for context and continuation, compared elementwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelevanceScorer {
    config: RelevanceConfig,
    params: ParamStore,
    embedding: ParamId,
    conv_context: Linear,
    conv_continuation: Linear,
    readout: ParamId,
}

impl RelevanceScorer {
    pub fn new(config: RelevanceConfig, embeddings: Array2<f64>, seed: u64) -> Result<Self> {
        if config.filters == 0 {
            return Err(Error::Config("relevance filters must be positive".into()));
        }
        let d = embeddings.ncols();
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        let embedding = params.add("rel.embedding", embeddings);
        let conv_context = Linear::new(&mut params, "rel.conv_a", 3 * d, config.filters, true, &mut r);
        let conv_continuation = Linear::new(&mut params, "rel.conv_b", 3 * d, config.filters, true, &mut r);
        let bound = 1.0 / (config.filters as f64).sqrt();
        let readout = params.add("rel.w", uniform(&mut r, config.filters, 1, bound));
        Ok(Self {
            config,
            params,
            embedding,
            conv_context,
            conv_continuation,
            readout,
        })
    }

    pub fn config(&self) -> &RelevanceConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        self.params.get(self.embedding)
    }

    pub fn readout_id(&self) -> ParamId {
        self.readout
    }

    /// Max-pooled convolution features of `tokens`, a `1×filters` row.
    fn encode(&self, tape: &mut Tape, conv: &Linear, tokens: &[TokenId], rate: f64, mut rng: Option<&mut Rng>) -> Var {
        let e = tape.param(self.embedding);
        let x = tape.gather_rows(e, tokens);
        let x = dropout(tape, x, rate, rng.as_deref_mut());
        let c = conv3(tape, conv, x);
        let c = dropout(tape, c, rate, rng);
        tape.max_rows(c)
    }

    /// `(a, b)`: pooled context and continuation vectors.
    pub fn pooled(&self, context: &[TokenId], y: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate(context, strip_end(y))?;
        let mut tape = Tape::new(&self.params);
        let a = self.encode(&mut tape, &self.conv_context, context, 0.0, None);
        let b = self.encode(&mut tape, &self.conv_continuation, strip_end(y), 0.0, None);
        Ok((tape.value(a).iter().copied().collect(), tape.value(b).iter().copied().collect()))
    }

    fn validate(&self, context: &[TokenId], y: &[TokenId]) -> Result<()> {
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        if y.is_empty() {
            return Err(Error::Empty("continuation"));
        }
        let v = self.embeddings().nrows();
        check_vocab(context, v)?;
        check_vocab(y, v)
    }

    fn raw_var(&self, tape: &mut Tape, context: &[TokenId], y: &[TokenId], rate: f64, mut rng: Option<&mut Rng>) -> Var {
        let a = self.encode(tape, &self.conv_context, context, rate, rng.as_deref_mut());
        let b = self.encode(tape, &self.conv_continuation, y, rate, rng);
        let ab = tape.mul(a, b);
        let w = tape.param(self.readout);
        tape.matmul(ab, w)
    }

    /// `s_rel = w_l · (a ∘ b)`, logistic-scaled for the log-probability form.
    pub fn score(&self, context: &[TokenId], y: &[TokenId]) -> Result<ScorerOutput> {
        let y = strip_end(y);
        self.validate(context, y)?;
        let mut tape = Tape::new(&self.params);
        let s = self.raw_var(&mut tape, context, y, 0.0, None);
        let raw = tape.scalar(s);
        Ok(ScorerOutput {
            raw,
            log_prob: log_sigmoid(raw),
        })
    }
}

impl RankingScorer for RelevanceScorer {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn score_var(&self, tape: &mut Tape, context: &[TokenId], y: &[TokenId], rate: f64, rng: Option<&mut Rng>) -> Var {
        self.raw_var(tape, context, strip_end(y), rate, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scorer(filters: usize) -> RelevanceScorer {
        let e = uniform(&mut rng::seeded(4), 10, 3, 0.5);
        RelevanceScorer::new(RelevanceConfig { filters }, e, 5).unwrap()
    }

    #[test]
    fn zero_readout_gives_log_one_half() {
        let mut s = scorer(4);
        let w = s.readout_id();
        s.params_mut().get_mut(w).fill(0.0);
        let out = s.score(&[4, 5, 6], &[7, 8]).unwrap();
        assert_eq!(out.raw, 0.0);
        assert!((out.log_prob + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pooled_vectors_have_fixed_width() {
        let s = scorer(6);
        for (x, y) in [(&[4][..], &[5][..]), (&[4, 5, 6, 7, 8], &[9, 4, 5])] {
            let (a, b) = s.pooled(x, y).unwrap();
            assert_eq!((a.len(), b.len()), (6, 6));
        }
    }

    #[test]
    fn readout_of_ones_sums_the_product() {
        let mut s = scorer(5);
        let w = s.readout_id();
        s.params_mut().get_mut(w).fill(1.0);
        let (a, b) = s.pooled(&[4, 5], &[6, 7, 8]).unwrap();
        let expected: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let raw = s.score(&[4, 5], &[6, 7, 8]).unwrap().raw;
        assert!((raw - expected).abs() < 1e-12);
    }

    #[test]
    fn single_position_pooling_is_the_convolution_output() {
        let s = scorer(3);
        let mut tape = Tape::new(&s.params);
        let e = tape.param(s.embedding);
        let x = tape.gather_rows(e, &[7]);
        let c = conv3(&mut tape, &s.conv_continuation, x);
        let conv: Vec<f64> = tape.value(c).iter().copied().collect();
        let (_, b) = s.pooled(&[4], &[7]).unwrap();
        assert_eq!(conv, b);
    }
}
