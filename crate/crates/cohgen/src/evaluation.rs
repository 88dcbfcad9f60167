//! Corpus-level generation metrics: BLEU with clipped modified n-gram
//! precision and brevity penalty, distinct-n and distinct-sentence diversity
//! rates, and the mean embedding coherence of outputs against their contexts.

use crate::coherence::coherence;
use crate::error::{Error, Result};
use crate::glove::EmbeddingMatrix;
use crate::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use std::collections::HashSet;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Cumulative corpus BLEU-n (percent) for n = 1..=max_n: geometric mean of
/// clipped modified precisions times the brevity penalty, no smoothing.
pub fn bleu(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    if max_n < 1 {
        return Err(Error::Input("max_n must be >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &hc {
                let clip = rc.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
            totals[n - 1] += h.len().saturating_sub(n - 1).max(0);
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let mut out = Vec::with_capacity(max_n);
    for k in 1..=max_n {
        let score = if precisions[..k].iter().any(|&p| p == 0.0) {
            0.0
        } else {
            let log_mean: f64 =
                precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
            bp * log_mean.exp()
        };
        out.push(100.0 * score);
    }
    Ok(out)
}

/// Modified n-gram precision alone (the clipped-count ratio), exposed for
/// direct verification.
pub fn modified_precision(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    n: usize,
) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Input("mismatched or empty evaluation set".into()));
    }
    let mut matched = 0usize;
    let mut total = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let hc = ngram_counts(h, n);
        let rc = ngram_counts(r, n);
        for (gram, &count) in &hc {
            matched += count.min(rc.get(gram).copied().unwrap_or(0));
        }
        total += h.len().saturating_sub(n - 1);
    }
    if total == 0 {
        return Err(Error::Input(format!("no {n}-grams in hypotheses")));
    }
    Ok(matched as f64 / total as f64)
}

/// 100 × unique n-grams / total n-grams across all hypotheses.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Input("n must be >= 1".into()));
    }
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        if h.len() >= n {
            for w in h.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Input(format!(
            "no hypothesis has at least {n} tokens"
        )));
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

/// 100 × unique hypothesis strings / hypothesis count.
pub fn distinct_sent(hypotheses: &[Vec<String>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Input("empty hypothesis list".into()));
    }
    let unique: HashSet<String> = hypotheses.iter().map(|h| h.join(" ")).collect();
    Ok(100.0 * unique.len() as f64 / hypotheses.len() as f64)
}

/// Mean coherence of each hypothesis against its context; undefined pairs
/// are skipped and counted.
pub fn coh_metric(
    contexts: &[Vec<String>],
    hypotheses: &[Vec<String>],
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<(f64, usize)> {
    if contexts.len() != hypotheses.len() {
        return Err(Error::Input(format!(
            "{} contexts vs {} hypotheses",
            contexts.len(),
            hypotheses.len()
        )));
    }
    let mut total = 0.0;
    let mut defined = 0usize;
    let mut skipped = 0usize;
    for (c, h) in contexts.iter().zip(hypotheses) {
        match coherence(&vocab.encode(c), &vocab.encode(h), glv, vocab) {
            Ok(s) => {
                total += s.value();
                defined += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    if defined == 0 {
        return Err(Error::UndefinedCoherence);
    }
    Ok((total / defined as f64, skipped))
}

/// Deterministic subset of `n` hypotheses (indices shared across parallel
/// metric lists), mirroring the 4k-sample convention for distinct metrics.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub bleu4: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub coh: f64,
    pub d1: f64,
    pub d2: f64,
    pub d_sent: f64,
    pub n_items: usize,
    pub coh_skipped: usize,
}

impl EvalReport {
    /// `key value` lines, machine-readable.
    pub fn to_kv(&self) -> String {
        format!(
            "bleu {:.4}\nb1 {:.4}\nb2 {:.4}\nb3 {:.4}\ncoh {:.4}\nd1 {:.4}\nd2 {:.4}\n\
             d_sent {:.4}\nn_items {}\ncoh_skipped {}\n",
            self.bleu4,
            self.b1,
            self.b2,
            self.b3,
            self.coh,
            self.d1,
            self.d2,
            self.d_sent,
            self.n_items,
            self.coh_skipped
        )
    }

    /// Fixed-column table in the standard column order.
    pub fn to_table(&self) -> String {
        let header = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "BLEU%", "B1%", "B2%", "B3%", "Coh", "D-1%", "D-2%", "D-Sent%"
        );
        let row = format!(
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.3} {:>8.2} {:>8.2} {:>8.2}",
            self.bleu4, self.b1, self.b2, self.b3, self.coh, self.d1, self.d2, self.d_sent
        );
        format!("{header}\n{row}\n")
    }
}

/// Compute every metric over aligned (context, hypothesis, reference) lists.
pub fn evaluate(
    contexts: &[Vec<String>],
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    if hypotheses.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let b = bleu(hypotheses, references, 4)?;
    let (coh, coh_skipped) = coh_metric(contexts, hypotheses, glv, vocab)?;
    Ok(EvalReport {
        bleu4: b[3],
        b1: b[0],
        b2: b[1],
        b3: b[2],
        coh,
        d1: distinct_n(hypotheses, 1)?,
        d2: distinct_n(hypotheses, 2)?,
        d_sent: distinct_sent(hypotheses)?,
        n_items: hypotheses.len(),
        coh_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn sents(list: &[&str]) -> Vec<Vec<String>> {
        list.iter().map(|s| toks(s)).collect()
    }

    #[test]
    fn bleu_self_evaluation_is_100() {
        let refs = sents(&["the cat sat on the mat", "a dog barks", "hello world again"]);
        let scores = bleu(&refs, &refs, 4).unwrap();
        for s in scores {
            assert_eq!(s, 100.0);
        }
    }

    #[test]
    fn clipped_precision_hand_example() {
        // "the the the the" vs "the cat sat": clip("the") = 1, 4 unigrams
        let p1 = modified_precision(
            &sents(&["the the the the"]),
            &sents(&["the cat sat"]),
            1,
        )
        .unwrap();
        assert_eq!(p1, 0.25);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        // hyp 2 tokens, ref 4 tokens, perfect unigram precision
        let hyp = sents(&["a b"]);
        let reference = sents(&["a b c d"]);
        let b1 = bleu(&hyp, &reference, 1).unwrap()[0];
        let expected = 100.0 * (1.0f64 - 4.0 / 2.0).exp();
        assert!((b1 - expected).abs() < 1e-9, "{b1} vs {expected}");
    }

    #[test]
    fn bleu_zero_matches_is_zero_not_nan() {
        let b = bleu(&sents(&["x y"]), &sents(&["p q"]), 4).unwrap();
        for s in b {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn bleu_is_corpus_level_permutation_invariant() {
        let hyp = sents(&["a b c", "d e", "f g h i"]);
        let refs = sents(&["a b x", "d y", "f g z i"]);
        let fwd = bleu(&hyp, &refs, 4).unwrap();
        let perm = [2usize, 0, 1];
        let hyp_p: Vec<_> = perm.iter().map(|&i| hyp[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let rev = bleu(&hyp_p, &refs_p, 4).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn bleu_length_mismatch_is_error() {
        assert!(bleu(&sents(&["a"]), &sents(&["a", "b"]), 4).is_err());
    }

    #[test]
    fn distinct_unigram_hand_count() {
        // unique {a, b, c} = 3 over 4 total
        let d = distinct_n(&sents(&["a b", "a c"]), 1).unwrap();
        assert_eq!(d, 75.0);
    }

    #[test]
    fn distinct_all_unique_is_100() {
        let d = distinct_n(&sents(&["p q r s"]), 1).unwrap();
        assert_eq!(d, 100.0);
    }

    #[test]
    fn distinct_too_short_is_error() {
        assert!(distinct_n(&sents(&["a", "b"]), 2).is_err());
    }

    #[test]
    fn distinct_is_order_invariant() {
        let a = sents(&["a b", "c d", "a b"]);
        let b = sents(&["a b", "a b", "c d"]);
        assert_eq!(distinct_n(&a, 2).unwrap(), distinct_n(&b, 2).unwrap());
    }

    #[test]
    fn d_sent_hand_count() {
        let d = distinct_sent(&sents(&["a b", "a b", "c"])).unwrap();
        assert!((d - 66.67).abs() < 0.01);
    }

    #[test]
    fn d_sent_extremes() {
        let all_same = distinct_sent(&sents(&["x", "x", "x", "x"])).unwrap();
        assert_eq!(all_same, 25.0);
        let all_diff = distinct_sent(&sents(&["x", "y", "z"])).unwrap();
        assert_eq!(all_diff, 100.0);
    }

    #[test]
    fn duplicating_hypotheses_cannot_increase_d_sent() {
        let hyp = sents(&["a b", "c d", "a b"]);
        let mut doubled = hyp.clone();
        doubled.extend(hyp.clone());
        assert!(distinct_sent(&doubled).unwrap() <= distinct_sent(&hyp).unwrap());
    }

    #[test]
    fn coh_metric_matches_manual_mean() {
        use crate::corpus::{synth_corpus, synth_embeddings};
        use crate::vocab::Vocabulary;
        use std::collections::HashSet;
        let pairs = synth_corpus(4, 30, 0.5, 33).unwrap();
        let tokens: Vec<String> = pairs
            .iter()
            .flat_map(|p| p.context_tokens().into_iter().chain(p.response.iter().cloned()))
            .collect();
        let vocab = Vocabulary::build(tokens.iter(), 1, 1000, &HashSet::new()).unwrap();
        let glv = synth_embeddings(4, &vocab, 0.2);
        let contexts: Vec<Vec<String>> = pairs.iter().map(|p| p.context_tokens()).collect();
        let hyps: Vec<Vec<String>> = pairs.iter().map(|p| p.response.clone()).collect();
        let (mean, skipped) = coh_metric(&contexts, &hyps, &glv, &vocab).unwrap();
        assert_eq!(skipped, 0);
        let manual: f64 = contexts
            .iter()
            .zip(&hyps)
            .map(|(c, h)| {
                coherence(&vocab.encode(c), &vocab.encode(h), &glv, &vocab)
                    .unwrap()
                    .value()
            })
            .sum::<f64>()
            / contexts.len() as f64;
        assert!((mean - manual).abs() < 1e-9);
    }

    #[test]
    fn sample_indices_is_deterministic_and_bounded() {
        let a = sample_indices(100, 10, 5);
        let b = sample_indices(100, 10, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|&i| i < 100));
        assert_eq!(sample_indices(5, 10, 0), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn evaluate_recomposes_from_individual_metrics() {
        use crate::corpus::{synth_corpus, synth_embeddings};
        use crate::vocab::Vocabulary;
        use std::collections::HashSet;
        let pairs = synth_corpus(3, 20, 0.3, 44).unwrap();
        let tokens: Vec<String> = pairs
            .iter()
            .flat_map(|p| p.context_tokens().into_iter().chain(p.response.iter().cloned()))
            .collect();
        let vocab = Vocabulary::build(tokens.iter(), 1, 1000, &HashSet::new()).unwrap();
        let glv = synth_embeddings(3, &vocab, 0.2);
        let contexts: Vec<Vec<String>> = pairs.iter().map(|p| p.context_tokens()).collect();
        let hyps: Vec<Vec<String>> = pairs.iter().map(|p| p.response.clone()).collect();
        let report = evaluate(&contexts, &hyps, &hyps, &glv, &vocab).unwrap();
        // responses are 2-3 tokens, so orders 1-3 have support; BLEU-4 has
        // no 4-grams at all and correctly reports 0 without smoothing
        assert_eq!(report.b1, 100.0);
        assert_eq!(report.b2, 100.0);
        assert_eq!(report.b3, 100.0);
        assert_eq!(report.bleu4, 0.0);
        let d1 = distinct_n(&hyps, 1).unwrap();
        let ds = distinct_sent(&hyps).unwrap();
        assert_eq!(report.d1.to_bits(), d1.to_bits());
        assert_eq!(report.d_sent.to_bits(), ds.to_bits());
        assert!(report.to_kv().contains("b1 100.0000"));
        assert!(report.to_table().contains("BLEU%"));
    }
}
