//! Corpus BLEU and per-example diversity statistics.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub avg_length: f64,
    pub vocab_pct: f64,
    pub trigram_pct: f64,
}

/// Mean length, and per-example percentages of distinct words and distinct
/// trigrams averaged over examples. Fewer than three tokens count as 100% distinct trigrams.
pub fn diversity_metrics<T: Eq + Hash>(generations: &[Vec<T>]) -> Result<Diversity> {
    if generations.is_empty() {
        return Err(Error::Empty("generations"));
    }
    let mut length = 0.0;
    let mut vocab = 0.0;
    let mut trigrams = 0.0;
    for g in generations {
        if g.is_empty() {
            return Err(Error::Empty("generation"));
        }
        length += g.len() as f64;
        let unique: HashSet<&T> = g.iter().collect();
        vocab += 100.0 * unique.len() as f64 / g.len() as f64;
        trigrams += if g.len() < 3 {
            100.0
        } else {
            let tri: HashSet<(&T, &T, &T)> = g.windows(3).map(|w| (&w[0], &w[1], &w[2])).collect();
            100.0 * tri.len() as f64 / (g.len() - 2) as f64
        };
    }
    let n = generations.len() as f64;
    Ok(Diversity {
        avg_length: length / n,
        vocab_pct: vocab / n,
        trigram_pct: trigrams / n,
    })
}

pub const BLEU_MAX_N: usize = 4;
pub const BLEU_SMOOTHING: &str = "add-one on n>=2 precisions";

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0–100 scale with clipped n-gram precisions up to `max_n`,
/// add-one smoothing for orders above one, and the usual brevity penalty.
pub fn corpus_bleu<T: Eq + Hash>(generations: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if generations.len() != references.len() {
        return Err(Error::LengthMismatch(generations.len(), references.len()));
    }
    if generations.is_empty() || max_n == 0 {
        return Err(Error::Empty("bleu input"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in generations.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 || hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else {
            (matches[n] as f64 + 1.0) / (totals[n] as f64 + 1.0)
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * log_p.exp()).min(100.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub n_examples: usize,
    pub bleu: f64,
    pub avg_length: f64,
    pub trigram_pct: f64,
    pub vocab_pct: f64,
    /// Meteor needs an external aligner and is not computed.
    pub meteor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub system: MetricsReport,
    /// Diversity of the references themselves, for comparison.
    pub reference: MetricsReport,
}

pub fn evaluate_generations<T: Eq + Hash>(generations: &[Vec<T>], references: &[Vec<T>], label: &str) -> Result<Evaluation> {
    let bleu = corpus_bleu(generations, references, BLEU_MAX_N)?;
    let d = diversity_metrics(generations)?;
    let rd = diversity_metrics(references)?;
    let report = |system: &str, bleu: f64, d: Diversity| MetricsReport {
        system: system.to_string(),
        n_examples: generations.len(),
        bleu,
        avg_length: d.avg_length,
        trigram_pct: d.trigram_pct,
        vocab_pct: d.vocab_pct,
        meteor: None,
    };
    Ok(Evaluation {
        system: report(label, bleu, d),
        reference: report("reference", 100.0, rd),
    })
}

/// Aligned plain-text table, one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let mut out = format!("# BLEU: corpus-level, max n = {BLEU_MAX_N}, {BLEU_SMOOTHING}; Meteor: unavailable\n");
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>7}  {:>7}  {:>8}  {:>6}  {:>6}",
        "system", "n", "BLEU", "Meteor", "Length", "Vocab", "Trigr."
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>7.2}  {:>7}  {:>8.2}  {:>6.2}  {:>6.2}",
            r.system, r.n_examples, r.bleu, "n/a", r.avg_length, r.vocab_pct, r.trigram_pct
        );
    }
    out
}
