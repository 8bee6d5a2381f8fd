use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_vocab, strip_end, RankingScorer, ScorerOutput};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{dropout, uniform};
use crate::rng::{self, Rng};
use crate::tensor::{log_sigmoid, ParamId, ParamStore, Tape, Var};

/// Bag-of-words style model: a linear readout of max-pooled embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleScorer {
    params: ParamStore,
    embedding: ParamId,
    readout: ParamId,
}

impl StyleScorer {
    pub fn new(embeddings: Array2<f64>, seed: u64) -> Result<Self> {
        let d = embeddings.ncols();
        if d == 0 {
            return Err(Error::Config("style embeddings need at least one column".into()));
        }
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        let embedding = params.add("style.embedding", embeddings);
        let readout = params.add("style.w", uniform(&mut r, d, 1, 1.0 / (d as f64).sqrt()));
        Ok(Self {
            params,
            embedding,
            readout,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        self.params.get(self.embedding)
    }

    pub fn readout_id(&self) -> ParamId {
        self.readout
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    fn pooled_var(&self, tape: &mut Tape, y: &[TokenId], rate: f64, rng: Option<&mut Rng>) -> Var {
        let e = tape.param(self.embedding);
        let x = tape.gather_rows(e, y);
        let x = dropout(tape, x, rate, rng);
        tape.max_rows(x)
    }

    /// Dimension-wise maximum over the words of `y`.
    pub fn pooled(&self, y: &[TokenId]) -> Result<Vec<f64>> {
        let y = strip_end(y);
        self.validate(y)?;
        let mut tape = Tape::new(&self.params);
        let p = self.pooled_var(&mut tape, y, 0.0, None);
        Ok(tape.value(p).iter().copied().collect())
    }

    fn validate(&self, y: &[TokenId]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::Empty("continuation"));
        }
        check_vocab(y, self.embeddings().nrows())
    }

    /// `s_bow(y) = w_s · maxpool(e(y))`, logistic-scaled for the log-probability form.
    pub fn score(&self, _context: &[TokenId], y: &[TokenId]) -> Result<ScorerOutput> {
        let y = strip_end(y);
        self.validate(y)?;
        let mut tape = Tape::new(&self.params);
        let s = self.score_var(&mut tape, &[], y, 0.0, None);
        let raw = tape.scalar(s);
        Ok(ScorerOutput {
            raw,
            log_prob: log_sigmoid(raw),
        })
    }
}

impl RankingScorer for StyleScorer {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn score_var(&self, tape: &mut Tape, _context: &[TokenId], y: &[TokenId], rate: f64, rng: Option<&mut Rng>) -> Var {
        let p = self.pooled_var(tape, strip_end(y), rate, rng);
        let w = tape.param(self.readout);
        tape.matmul(p, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pooling_takes_per_dimension_maximum() {
        let mut e = Array2::zeros((6, 2));
        e.row_mut(4).assign(&array![0.1, 0.9]);
        e.row_mut(5).assign(&array![0.5, 0.2]);
        let s = StyleScorer::new(e, 0).unwrap();
        assert_eq!(s.pooled(&[4, 5]).unwrap(), vec![0.5, 0.9]);
        assert_eq!(s.pooled(&[5]).unwrap(), vec![0.5, 0.2]);
    }

    #[test]
    fn zero_readout_gives_log_one_half() {
        let mut s = StyleScorer::new(Array2::from_elem((6, 3), 0.3), 1).unwrap();
        let w = s.readout_id();
        s.params_mut().get_mut(w).fill(0.0);
        let out = s.score(&[], &[4, 5]).unwrap();
        assert!((out.log_prob + std::f64::consts::LN_2).abs() < 1e-12);
    }
}
