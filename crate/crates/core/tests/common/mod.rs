#![allow(dead_code)]

use std::collections::BTreeSet;

use coopgen::corpus::{NliLabel, NliTriple, SentenceSplitter, TokenId, EOS};
use coopgen::discriminators::{
    pair_loss, pair_loss_and_grads, EntailmentConfig, EntailmentScorer, RankingScorer, RelevanceConfig,
    RelevanceScorer, RepetitionConfig, RepetitionScorer, StyleScorer,
};
use coopgen::corpus::{NegativeKind, RankingPair};
use coopgen::lm::{LanguageModel, LmConfig};
use coopgen::objective::{mixture_gradient, mixture_loss, Features};
use coopgen::tensor::{Grads, ParamStore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

/// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` against central differences.
///
/// Tensors whose gradient is exactly zero both ways count as error 0.
pub fn gradient_error<M>(
    model: &mut M,
    analytic: &Grads,
    params_mut: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
) -> (f64, String) {
    let ids: Vec<_> = params_mut(model).ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let shape = params_mut(model).get(id).dim();
        let mut numeric = Array2::<f64>::zeros(shape);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = params_mut(model).get(id)[[i, j]];
                params_mut(model).get_mut(id)[[i, j]] = orig + FD_STEP;
                let up = loss(model);
                params_mut(model).get_mut(id)[[i, j]] = orig - FD_STEP;
                let down = loss(model);
                params_mut(model).get_mut(id)[[i, j]] = orig;
                numeric[[i, j]] = (up - down) / (2.0 * FD_STEP);
            }
        }
        let a = analytic.get(id);
        let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
        let err = if scale == 0.0 { diff } else { diff / scale };
        if err > worst.0 {
            worst = (err, params_mut(model).name(id).to_string());
        }
    }
    worst
}

/// Moves every parameter off its initial value so that zero-initialised
/// biases do not sit exactly on a ReLU kink.
pub fn jitter(params: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.get_mut(id).mapv_inplace(|v| v + r.random_range(-scale..scale));
    }
}

pub fn random_tokens(r: &mut ChaCha8Rng, len: usize, lo: usize, hi: usize) -> Vec<TokenId> {
    (0..len).map(|_| r.random_range(lo..hi)).collect()
}

pub fn small_lm(vocab: usize, hidden: usize, seed: u64) -> LanguageModel {
    let config = LmConfig {
        embedding_dim: 6,
        hidden_size: hidden,
        num_layers: 2,
        cluster_fractions: vec![0.4, 0.3],
    };
    LanguageModel::new(vocab, config, seed).unwrap()
}

pub fn lm_gradient_error(hidden: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut lm = small_lm(10, hidden, seed);
    jitter(lm.params_mut(), seed, 0.3);
    let (steps, batch) = (6, 3);
    let inputs: Vec<Vec<TokenId>> = (0..steps).map(|_| random_tokens(&mut r, batch, 0, 10)).collect();
    let targets: Vec<Vec<TokenId>> = (0..steps).map(|_| random_tokens(&mut r, batch, 0, 10)).collect();
    let (_, grads) = lm.window_loss_and_grads(&inputs, &targets);
    gradient_error(&mut lm, &grads, |m| m.params_mut(), |m| m.window_loss(&inputs, &targets)).0
}

/// Pairs over ids `4..vocab`; the negative is drawn independently of the gold.
pub fn random_pairs(r: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<RankingPair> {
    (0..n)
        .map(|_| {
            let len = r.random_range(3..9);
            let ctx_len = r.random_range(4..10);
            RankingPair {
                context: random_tokens(r, ctx_len, 4, vocab),
                gold: random_tokens(r, len, 4, vocab),
                negative: random_tokens(r, len, 4, vocab),
                prefix_fraction: 1.0,
                negative_kind: NegativeKind::RandomEnding,
            }
        })
        .collect()
}

pub fn ranking_gradient_error<S: RankingScorer>(mut scorer: S, pairs: &[RankingPair]) -> f64 {
    jitter(scorer.params_mut(), 99, 0.1);
    let (_, grads) = pair_loss_and_grads(&scorer, pairs);
    gradient_error(&mut scorer, &grads, |s| s.params_mut(), |s| pair_loss(s, pairs)).0
}

pub fn repetition_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let emb = random_matrix(&mut r, 16, 5, 0.8);
    let s = RepetitionScorer::new(RepetitionConfig { window: 4, hidden_size: 6 }, emb, seed).unwrap();
    ranking_gradient_error(s, &random_pairs(&mut r, 6, 16))
}

pub fn relevance_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let emb = random_matrix(&mut r, 16, 5, 0.8);
    let s = RelevanceScorer::new(RelevanceConfig { filters: 6 }, emb, seed).unwrap();
    ranking_gradient_error(s, &random_pairs(&mut r, 6, 16))
}

pub fn style_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let emb = random_matrix(&mut r, 16, 5, 0.8);
    let s = StyleScorer::new(emb, seed).unwrap();
    ranking_gradient_error(s, &random_pairs(&mut r, 6, 16))
}

pub fn nli_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let emb = random_matrix(&mut r, 16, 5, 0.8);
    let mut s = EntailmentScorer::new(EntailmentConfig { hidden_size: 6 }, emb, SentenceSplitter::new(vec![4]), seed)
        .unwrap();
    let triples: Vec<NliTriple> = (0..6)
        .map(|i| {
            let (a, b) = (r.random_range(2..7), r.random_range(2..7));
            NliTriple {
                premise: random_tokens(&mut r, a, 5, 16),
                hypothesis: random_tokens(&mut r, b, 5, 16),
                label: NliLabel::ALL[i % 3],
            }
        })
        .collect();
    jitter(s.params_mut(), seed, 0.1);
    let (_, grads) = s.loss_and_grads(&triples);
    gradient_error(&mut s, &grads, |m| m.params_mut(), |m| m.loss(&triples)).0
}

/// Worst relative error of the λ-gradient over random gold/generated feature pairs.
pub fn lambda_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = r.random_range(1..5);
        let feats = |r: &mut ChaCha8Rng| Features {
            lm: r.random_range(-40.0..-1.0),
            scores: (0..k).map(|_| r.random_range(-5.0..0.0)).collect(),
        };
        let (g, y) = (feats(&mut r), feats(&mut r));
        let w: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let analytic = mixture_gradient(&g, &y, &w);
        let mut numeric = vec![0.0; k];
        for j in 0..k {
            let mut up = w.clone();
            let mut down = w.clone();
            up[j] += FD_STEP;
            down[j] -= FD_STEP;
            numeric[j] = (mixture_loss(&g, &y, &up) - mixture_loss(&g, &y, &down)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(if scale == 0.0 { diff } else { diff / scale });
    }
    worst
}

/// Direct two-stage probabilities with plain exponentials.
pub fn naive_clustered_probs(head_logits: &[f64], tail_logits: &[Vec<f64>]) -> Vec<f64> {
    let z: f64 = head_logits.iter().map(|v| v.exp()).sum();
    let n_head = head_logits.len() - tail_logits.len();
    let mut out: Vec<f64> = head_logits[..n_head].iter().map(|v| v.exp() / z).collect();
    for (t, logits) in tail_logits.iter().enumerate() {
        let cluster = head_logits[n_head + t].exp() / z;
        let zt: f64 = logits.iter().map(|v| v.exp()).sum();
        out.extend(logits.iter().map(|v| cluster * v.exp() / zt));
    }
    out
}

/// Per-example distinct-token and distinct-trigram percentages by set enumeration.
pub fn brute_force_diversity(texts: &[Vec<String>]) -> (f64, f64) {
    let mut vocab = 0.0;
    let mut trigrams = 0.0;
    for t in texts {
        let words: BTreeSet<&str> = t.iter().map(String::as_str).collect();
        vocab += 100.0 * words.len() as f64 / t.len() as f64;
        trigrams += if t.len() < 3 {
            100.0
        } else {
            let mut all = Vec::new();
            for i in 0..t.len() - 2 {
                all.push(format!("{}\u{1}{}\u{1}{}", t[i], t[i + 1], t[i + 2]));
            }
            let distinct: BTreeSet<&String> = all.iter().collect();
            100.0 * distinct.len() as f64 / all.len() as f64
        };
    }
    let n = texts.len() as f64;
    (vocab / n, trigrams / n)
}

/// Textbook beam search on language-model scores, recomputing each prefix
/// from scratch. Finished hypotheses leave the beam; the search stops once
/// no live hypothesis could end above the best finished one.
pub fn plain_beam_search(
    lm: &LanguageModel,
    context: &[TokenId],
    beam_size: usize,
    max_steps: usize,
    splitter: &SentenceSplitter,
    target: usize,
) -> Vec<TokenId> {
    let next = |toks: &[TokenId]| {
        let mut prefix = context.to_vec();
        prefix.extend_from_slice(toks);
        lm.next_token_logprobs(&prefix).unwrap()
    };
    let end_score = |toks: &[TokenId], lp: f64| lp + next(toks)[EOS];
    let mut beam: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut last = Vec::new();
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    for _ in 0..max_steps {
        if let Some((_, b)) = &best {
            if beam.iter().all(|(t, lp)| end_score(t, *lp) < *b) {
                break;
            }
        }
        let mut cands: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for (toks, lp) in &beam {
            let dist = next(toks);
            let mut ids: Vec<TokenId> = (4..dist.len()).collect();
            ids.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
            for &t in ids.iter().take(beam_size) {
                let mut c = toks.clone();
                c.push(t);
                cands.push((c, lp + dist[t]));
            }
        }
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| {
            cands[b]
                .1
                .partial_cmp(&cands[a].1)
                .unwrap()
                .then(cands[a].0.last().cmp(&cands[b].0.last()))
                .then(a.cmp(&b))
        });
        order.truncate(beam_size);
        beam = Vec::new();
        for i in order {
            let (toks, lp) = cands[i].clone();
            if splitter.count_complete(&toks) >= target {
                let s = end_score(&toks, lp);
                if best.as_ref().is_none_or(|b| s > b.1) {
                    best = Some((toks, s));
                }
            } else {
                beam.push((toks, lp));
            }
        }
        if beam.is_empty() {
            break;
        }
        last = beam.clone();
    }
    match best {
        Some((toks, _)) => toks,
        None => {
            let pool = if beam.is_empty() { last } else { beam };
            let mut chosen: Option<(Vec<TokenId>, f64)> = None;
            for (toks, lp) in pool {
                let s = end_score(&toks, lp);
                if chosen.as_ref().is_none_or(|c| s > c.1) {
                    chosen = Some((toks, s));
                }
            }
            chosen.unwrap().0
        }
    }
}
