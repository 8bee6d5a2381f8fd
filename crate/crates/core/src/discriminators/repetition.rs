use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{check_vocab, strip_end, RankingScorer, ScorerOutput};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{dropout, uniform, GruCell};
use crate::rng::{self, Rng};
use crate::tensor::{log_sigmoid, sigmoid, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepetitionConfig {
    /// How many preceding tokens each position is compared against.
    pub window: usize,
    pub hidden_size: usize,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self {
            window: 8,
            hidden_size: 32,
        }
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `d_i = max_{i−k ≤ j < i} cos(e(y_j), e(y_i))`, with `−1` at the first position.
pub fn repetition_similarities(embeddings: &Array2<f64>, y: &[TokenId], window: usize) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::Empty("continuation"));
    }
    if window == 0 {
        return Err(Error::Config("repetition window must be at least 1".into()));
    }
    check_vocab(y, embeddings.nrows())?;
    Ok((0..y.len())
        .map(|i| {
            if i == 0 {
                return -1.0;
            }
            let cur = embeddings.row(y[i]);
            (i.saturating_sub(window)..i)
                .map(|j| if y[j] == y[i] { 1.0 } else { cosine(embeddings.row(y[j]), cur) })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Recurrent readout over windowed self-similarities; high when the text does not repeat itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepetitionScorer {
    config: RepetitionConfig,
    /// Fixed copy of the word embeddings; not trained.
    embeddings: Array2<f64>,
    params: ParamStore,
    gru: GruCell,
    readout: ParamId,
}

impl RepetitionScorer {
    pub fn new(config: RepetitionConfig, embeddings: Array2<f64>, seed: u64) -> Result<Self> {
        if config.window == 0 || config.hidden_size == 0 {
            return Err(Error::Config("repetition window and hidden size must be positive".into()));
        }
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        let gru = GruCell::new(&mut params, "rep.gru", 1, config.hidden_size, &mut r);
        let bound = 1.0 / (config.hidden_size as f64).sqrt();
        let readout = params.add("rep.w", uniform(&mut r, config.hidden_size, 1, bound));
        Ok(Self {
            config,
            embeddings,
            params,
            gru,
            readout,
        })
    }

    pub fn config(&self) -> &RepetitionConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn readout_id(&self) -> ParamId {
        self.readout
    }

    /// Pre-sigmoid value `w_r · RNN(d)`.
    fn logit_var(&self, tape: &mut Tape, y: &[TokenId], rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        let d = repetition_similarities(&self.embeddings, y, self.config.window)?;
        let inputs: Vec<Var> = d
            .iter()
            .map(|&v| tape.constant(Array2::from_elem((1, 1), v)))
            .collect();
        let h = self.gru.run(tape, &inputs);
        let h = dropout(tape, h, rate, rng);
        let w = tape.param(self.readout);
        Ok(tape.matmul(h, w))
    }

    /// `s_rep(y) = σ(w_r · RNN(d))`
    pub fn score(&self, _context: &[TokenId], y: &[TokenId]) -> Result<ScorerOutput> {
        let y = strip_end(y);
        let mut tape = Tape::new(&self.params);
        let z = self.logit_var(&mut tape, y, 0.0, None)?;
        let z = tape.scalar(z);
        Ok(ScorerOutput {
            raw: sigmoid(z),
            log_prob: log_sigmoid(z),
        })
    }
}

impl RankingScorer for RepetitionScorer {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn score_var(&self, tape: &mut Tape, _context: &[TokenId], y: &[TokenId], rate: f64, rng: Option<&mut Rng>) -> Var {
        let z = self
            .logit_var(tape, strip_end(y), rate, rng)
            .expect("ranking pairs hold non-empty in-vocabulary prefixes");
        tape.sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn repeats_in_window_give_one_and_orthogonal_words_zero() {
        let e = one_hot(10);
        let d = repetition_similarities(&e, &[4, 5, 6, 4], 8).unwrap();
        assert_eq!(d, vec![-1.0, 0.0, 0.0, 1.0]);
        // the earlier 4 has slid out of a window of 2
        let d = repetition_similarities(&e, &[4, 5, 6, 4], 2).unwrap();
        assert_eq!(d[3], 0.0);
        assert!(repetition_similarities(&e, &[], 8).is_err());
    }

    #[test]
    fn zero_readout_scores_one_half() {
        let mut s = RepetitionScorer::new(RepetitionConfig::default(), one_hot(12), 2).unwrap();
        let w = s.readout_id();
        s.params_mut().get_mut(w).fill(0.0);
        let out = s.score(&[], &[4, 5, 4, 5]).unwrap();
        assert_eq!(out.raw, 0.5);
        assert!((out.log_prob + std::f64::consts::LN_2).abs() < 1e-15);
        // a single token only sees the sentinel
        assert_eq!(s.score(&[], &[7]).unwrap().raw, 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_is_a_probability(y in proptest::collection::vec(4usize..12, 1..30), seed in 0u64..1000) {
            let e = uniform(&mut rng::seeded(seed), 12, 5, 1.0);
            let s = RepetitionScorer::new(RepetitionConfig { window: 3, hidden_size: 6 }, e, seed).unwrap();
            let out = s.score(&[], &y).unwrap();
            prop_assert!(out.raw > 0.0 && out.raw < 1.0);
            prop_assert!(out.log_prob <= 0.0);
        }

        #[test]
        fn similarities_lie_in_range(y in proptest::collection::vec(0usize..12, 1..30), seed in 0u64..1000) {
            let e = uniform(&mut rng::seeded(seed), 12, 4, 1.0);
            for d in repetition_similarities(&e, &y, 8).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&d));
            }
        }
    }
}
