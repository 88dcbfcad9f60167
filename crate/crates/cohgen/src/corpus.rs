//! Dialogue corpus pipeline: TSV ingestion, coherence scoring, normal fit,
//! threshold filtering, splitting, and synthetic fixture generation.

use crate::coherence::coherence;
use crate::error::{Error, Result};
use crate::glove::EmbeddingMatrix;
use crate::vocab::{tokenize, Vocabulary};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Turn separator inside the context column.
pub const TURN_SEP: &str = " ## ";
/// Artifact header prefix. `#%` cannot open a content line because written
/// tokens are space-separated single units.
pub const HEADER_PREFIX: &str = "#%";

pub const MAX_CONTEXT_TOKENS: usize = 120;
pub const MAX_RESPONSE_TOKENS: usize = 30;

/// A 3-turn dialogue context plus its response, optionally scored.
#[derive(Clone, Debug, PartialEq)]
pub struct DialoguePair {
    pub context_turns: [Vec<String>; 3],
    pub response: Vec<String>,
    pub coherence: Option<f64>,
}

impl DialoguePair {
    /// All context turns concatenated into one token sequence.
    pub fn context_tokens(&self) -> Vec<String> {
        self.context_turns.iter().flatten().cloned().collect()
    }

    pub fn context_len(&self) -> usize {
        self.context_turns.iter().map(|t| t.len()).sum()
    }

    fn check_lengths(&self) -> std::result::Result<(), String> {
        if self.context_turns.iter().any(|t| t.is_empty()) || self.response.is_empty() {
            return Err("empty turn".into());
        }
        if self.context_len() >= MAX_CONTEXT_TOKENS {
            return Err(format!("context length {} >= {MAX_CONTEXT_TOKENS}", self.context_len()));
        }
        if self.response.len() >= MAX_RESPONSE_TOKENS {
            return Err(format!("response length {} >= {MAX_RESPONSE_TOKENS}", self.response.len()));
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let ctx = self
            .context_turns
            .iter()
            .map(|t| t.join(" "))
            .collect::<Vec<_>>()
            .join(TURN_SEP);
        match self.coherence {
            Some(c) => format!("{ctx}\t{}\t{c}", self.response.join(" ")),
            None => format!("{ctx}\t{}", self.response.join(" ")),
        }
    }
}

/// Parse one dialogue TSV line: `turn1 ## turn2 ## turn3<TAB>response[<TAB>score]`.
pub fn parse_pair_line(line: &str) -> std::result::Result<DialoguePair, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 2 || cols.len() > 3 {
        return Err(format!("expected 2 or 3 tab-separated columns, got {}", cols.len()));
    }
    let turns: Vec<&str> = cols[0].split(TURN_SEP).collect();
    if turns.len() != 3 {
        return Err(format!("expected 3 context turns, got {}", turns.len()));
    }
    let context_turns = [tokenize(turns[0]), tokenize(turns[1]), tokenize(turns[2])];
    let response = tokenize(cols[1]);
    let coherence = match cols.get(2) {
        Some(s) => Some(s.trim().parse::<f64>().map_err(|e| format!("bad score: {e}"))?),
        None => None,
    };
    Ok(DialoguePair { context_turns, response, coherence })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadStats {
    pub read: usize,
    pub yielded: usize,
    pub dropped_malformed: usize,
    pub dropped_length: usize,
}

/// Streaming reader over a dialogue TSV. Malformed and over-length lines are
/// dropped and counted; in strict mode the first malformed line is an error.
pub struct PairReader<R: BufRead> {
    lines: std::io::Lines<R>,
    line_no: usize,
    strict: bool,
    pub stats: LoadStats,
}

impl PairReader<BufReader<std::fs::File>> {
    pub fn open(path: &Path, strict: bool) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(PairReader::new(BufReader::new(f), strict))
    }
}

impl<R: BufRead> PairReader<R> {
    pub fn new(reader: R, strict: bool) -> Self {
        PairReader { lines: reader.lines(), line_no: 0, strict, stats: LoadStats::default() }
    }
}

impl<R: BufRead> Iterator for PairReader<R> {
    type Item = Result<DialoguePair>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() || line.starts_with(HEADER_PREFIX) {
                continue;
            }
            self.stats.read += 1;
            match parse_pair_line(&line) {
                Ok(pair) => match pair.check_lengths() {
                    Ok(()) => {
                        self.stats.yielded += 1;
                        return Some(Ok(pair));
                    }
                    Err(_) => {
                        self.stats.dropped_length += 1;
                        continue;
                    }
                },
                Err(msg) => {
                    self.stats.dropped_malformed += 1;
                    if self.strict {
                        return Some(Err(Error::Parse { line: self.line_no, msg }));
                    }
                    continue;
                }
            }
        }
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<DialoguePair>> {
    PairReader::open(path, false)?.collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ScoreStats {
    pub scored: usize,
    pub dropped_undefined: usize,
    /// Largest number of pairs held in memory at once (chunked streaming).
    pub max_buffered: usize,
}

/// Score a stream of pairs in order-preserving parallel chunks, invoking
/// `sink` for each scored pair. Pairs with undefined coherence are dropped
/// and counted. Peak memory is bounded by `chunk_size`.
pub fn score_stream<I, F>(
    pairs: I,
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
    chunk_size: usize,
    mut sink: F,
) -> Result<ScoreStats>
where
    I: Iterator<Item = Result<DialoguePair>>,
    F: FnMut(DialoguePair) -> Result<()>,
{
    let mut stats = ScoreStats::default();
    let mut buf: Vec<DialoguePair> = Vec::with_capacity(chunk_size);
    let mut pairs = pairs.peekable();
    loop {
        buf.clear();
        while buf.len() < chunk_size {
            match pairs.next() {
                Some(p) => buf.push(p?),
                None => break,
            }
        }
        if buf.is_empty() {
            break;
        }
        stats.max_buffered = stats.max_buffered.max(buf.len());
        let scored: Vec<Option<DialoguePair>> = buf
            .par_iter()
            .map(|p| {
                let ctx = vocab.encode(&p.context_tokens());
                let resp = vocab.encode(&p.response);
                match coherence(&ctx, &resp, emb, vocab) {
                    Ok(c) => {
                        let mut q = p.clone();
                        q.coherence = Some(c.value());
                        Some(q)
                    }
                    Err(_) => None,
                }
            })
            .collect();
        for s in scored {
            match s {
                Some(p) => {
                    stats.scored += 1;
                    sink(p)?;
                }
                None => stats.dropped_undefined += 1,
            }
        }
        if pairs.peek().is_none() {
            break;
        }
    }
    Ok(stats)
}

/// In-memory convenience wrapper over [`score_stream`].
pub fn score_pairs(
    pairs: &[DialoguePair],
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<(Vec<DialoguePair>, ScoreStats)> {
    let mut out = Vec::with_capacity(pairs.len());
    let stats = score_stream(
        pairs.iter().cloned().map(Ok),
        emb,
        vocab,
        4096,
        |p| {
            out.push(p);
            Ok(())
        },
    )?;
    Ok((out, stats))
}

/// Normal fit over observed coherence scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoherenceDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub cutoff: f64,
}

/// mu = sample mean, sigma = population standard deviation,
/// cutoff = mu + 2 sigma.
pub fn fit_coherence_distribution(scores: &[f64]) -> Result<CoherenceDistribution> {
    if scores.len() < 2 {
        return Err(Error::InsufficientData { need: 2, have: scores.len() });
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    Ok(CoherenceDistribution { mu, sigma, cutoff: mu + 2.0 * sigma })
}

/// Keep exactly the pairs with coherence >= threshold (inclusive),
/// preserving order.
pub fn filter_corpus(pairs: &[DialoguePair], threshold: f64) -> Result<Vec<DialoguePair>> {
    let mut out = Vec::new();
    for p in pairs {
        let c = p.coherence.ok_or(Error::MissingScore)?;
        if c >= threshold {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Disjoint seed-deterministic train/dev/test split (uniform sampling
/// without replacement).
pub fn split_corpus(
    pairs: &[DialoguePair],
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<(Vec<DialoguePair>, Vec<DialoguePair>, Vec<DialoguePair>)> {
    let need = sizes.0 + sizes.1 + sizes.2;
    if need > pairs.len() {
        return Err(Error::InsufficientData { need, have: pairs.len() });
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| -> Vec<DialoguePair> {
        idx[range].iter().map(|&i| pairs[i].clone()).collect()
    };
    Ok((
        take(0..sizes.0),
        take(sizes.0..sizes.0 + sizes.1),
        take(sizes.0 + sizes.1..need),
    ))
}

/// Words of one synthetic topic cluster.
pub fn topic_words(topic: usize) -> Vec<String> {
    (0..8).map(|j| format!("t{topic}w{j}")).collect()
}

/// Generate a topical synthetic corpus: context and response share a topic
/// with probability 1 - noise, otherwise the response comes from a different
/// topic. Deterministic under seed.
pub fn synth_corpus(
    topics: usize,
    pairs_per_topic: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<DialoguePair>> {
    if topics < 2 {
        return Err(Error::Input("need at least 2 topics".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Input("noise must be in [0, 1]".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let words: Vec<Vec<String>> = (0..topics).map(topic_words).collect();
    let mut out = Vec::with_capacity(topics * pairs_per_topic);
    for topic in 0..topics {
        for _ in 0..pairs_per_topic {
            let turn = |rng: &mut ChaCha12Rng, t: usize| -> Vec<String> {
                let n = rng.gen_range(2..=3);
                (0..n)
                    .map(|_| words[t][rng.gen_range(0..words[t].len())].clone())
                    .collect()
            };
            let context_turns = [
                turn(&mut rng, topic),
                turn(&mut rng, topic),
                turn(&mut rng, topic),
            ];
            let mismatched = rng.gen::<f64>() < noise;
            let resp_topic = if mismatched {
                let mut other = rng.gen_range(0..topics - 1);
                if other >= topic {
                    other += 1;
                }
                other
            } else {
                topic
            };
            let response = turn(&mut rng, resp_topic);
            out.push(DialoguePair { context_turns, response, coherence: None });
        }
    }
    Ok(out)
}

/// Hand-built embeddings for synthetic topics: words of one topic share a
/// unit direction; any two topics have cosine `shared`. Used as a controlled
/// stand-in for trained vectors in tests and fixtures.
pub fn synth_embeddings(topics: usize, vocab: &Vocabulary, shared: f64) -> EmbeddingMatrix {
    let dim = topics + 1;
    let base = shared.max(0.0).sqrt();
    let rest = (1.0 - base * base).sqrt();
    let mut m = EmbeddingMatrix::zeros(vocab.size(), dim);
    for topic in 0..topics {
        for w in topic_words(topic) {
            if let Some(id) = vocab.lookup(&w) {
                let row = m.row_mut(id);
                row[0] = base;
                row[topic + 1] = rest;
            }
        }
    }
    m
}

pub fn write_pairs<W: Write + ?Sized>(w: &mut W, pairs: &[DialoguePair]) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}", p.to_tsv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pair(line: &str) -> DialoguePair {
        parse_pair_line(line).unwrap()
    }

    #[test]
    fn parses_basic_line() {
        let p = pair("a ## b ## c\td");
        assert_eq!(p.context_turns[0], vec!["a"]);
        assert_eq!(p.context_turns[1], vec!["b"]);
        assert_eq!(p.context_turns[2], vec!["c"]);
        assert_eq!(p.response, vec!["d"]);
        assert_eq!(p.coherence, None);
    }

    #[test]
    fn parses_scored_line() {
        let p = pair("a ## b ## c\td\t0.75");
        assert_eq!(p.coherence, Some(0.75));
    }

    #[test]
    fn two_turns_is_malformed() {
        assert!(parse_pair_line("a ## b\td").is_err());
    }

    #[test]
    fn reader_drops_overlong_response() {
        let resp = vec!["w"; MAX_RESPONSE_TOKENS].join(" ");
        let data = format!("a ## b ## c\t{resp}\na ## b ## c\tok\n");
        let mut r = PairReader::new(std::io::Cursor::new(data), false);
        let pairs: Vec<_> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(r.stats.dropped_length, 1);
    }

    #[test]
    fn reader_strict_mode_errors_on_malformed() {
        let data = "a ## b\td\n";
        let mut r = PairReader::new(std::io::Cursor::new(data), true);
        assert!(matches!(r.next(), Some(Err(Error::Parse { line: 1, .. }))));
    }

    #[test]
    fn reader_skips_headers_and_blank_lines() {
        let data = "#% config foo=bar\n\na ## b ## c\td\n";
        let pairs: Vec<_> = PairReader::new(std::io::Cursor::new(data), true)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn tsv_round_trip() {
        let p = pair("hello there ## b ## c\tfine thanks\t0.5");
        assert_eq!(pair(&p.to_tsv()), p);
    }

    #[test]
    fn fit_two_point_scores() {
        let d = fit_coherence_distribution(&[0.0, 1.0]).unwrap();
        assert_eq!(d.mu, 0.5);
        assert_eq!(d.sigma, 0.5);
        assert_eq!(d.cutoff, 1.5);
    }

    #[test]
    fn fit_typical_magnitudes() {
        // mu 0.25 sigma 0.22 -> cutoff 0.69 (overridable threshold covers 0.68)
        let d = CoherenceDistribution { mu: 0.25, sigma: 0.22, cutoff: 0.25 + 2.0 * 0.22 };
        assert!((d.cutoff - 0.69).abs() < 1e-12);
    }

    #[test]
    fn fit_degenerate_scores() {
        assert!(matches!(
            fit_coherence_distribution(&[0.3, 0.3, 0.3]),
            Err(Error::DegenerateDistribution)
        ));
    }

    #[test]
    fn filter_is_inclusive_and_order_preserving() {
        let mut pairs: Vec<DialoguePair> = ["x", "y", "z"]
            .iter()
            .map(|t| pair(&format!("a ## b ## c\t{t}")))
            .collect();
        pairs[0].coherence = Some(0.68);
        pairs[1].coherence = Some(0.5);
        pairs[2].coherence = Some(0.9);
        let kept = filter_corpus(&pairs, 0.68).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].response, vec!["x"]);
        assert_eq!(kept[1].response, vec!["z"]);
    }

    #[test]
    fn filter_above_cosine_range_is_empty() {
        let mut p = pair("a ## b ## c\td");
        p.coherence = Some(1.0);
        assert!(filter_corpus(&[p], 1.1).unwrap().is_empty());
    }

    #[test]
    fn filter_unscored_is_error() {
        let p = pair("a ## b ## c\td");
        assert!(matches!(filter_corpus(&[p], 0.5), Err(Error::MissingScore)));
    }

    #[test]
    fn filter_is_idempotent_and_monotone() {
        let mut pairs = Vec::new();
        for i in 0..50 {
            let mut p = pair("a ## b ## c\td");
            p.coherence = Some(i as f64 / 50.0);
            pairs.push(p);
        }
        let once = filter_corpus(&pairs, 0.4).unwrap();
        let twice = filter_corpus(&once, 0.4).unwrap();
        assert_eq!(once, twice);
        let higher = filter_corpus(&pairs, 0.6).unwrap();
        assert!(higher.iter().all(|p| once.contains(p)));
    }

    #[test]
    fn split_partitions_disjointly() {
        let pairs: Vec<DialoguePair> = (0..10)
            .map(|i| pair(&format!("a ## b ## c\tr{i}")))
            .collect();
        let (tr, dev, te) = split_corpus(&pairs, (8, 1, 1), 7).unwrap();
        assert_eq!((tr.len(), dev.len(), te.len()), (8, 1, 1));
        let mut all: Vec<&DialoguePair> = tr.iter().chain(&dev).chain(&te).collect();
        all.sort_by_key(|p| p.response.clone());
        let mut orig: Vec<&DialoguePair> = pairs.iter().collect();
        orig.sort_by_key(|p| p.response.clone());
        assert_eq!(all, orig);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let pairs: Vec<DialoguePair> = (0..10)
            .map(|i| pair(&format!("a ## b ## c\tr{i}")))
            .collect();
        let s1 = split_corpus(&pairs, (6, 2, 2), 3).unwrap();
        let s2 = split_corpus(&pairs, (6, 2, 2), 3).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn split_insufficient_is_error() {
        let pairs: Vec<DialoguePair> = (0..9)
            .map(|i| pair(&format!("a ## b ## c\tr{i}")))
            .collect();
        assert!(matches!(
            split_corpus(&pairs, (8, 1, 1), 0),
            Err(Error::InsufficientData { need: 10, have: 9 })
        ));
    }

    #[test]
    fn synth_noise_extremes() {
        let clean = synth_corpus(3, 20, 0.0, 1).unwrap();
        for p in &clean {
            let t = &p.context_turns[0][0][..2];
            assert!(p.response.iter().all(|w| w.starts_with(t)));
        }
        let noisy = synth_corpus(3, 20, 1.0, 1).unwrap();
        for p in &noisy {
            let t = &p.context_turns[0][0][..2];
            assert!(p.response.iter().all(|w| !w.starts_with(t)));
        }
    }

    #[test]
    fn synth_noise_half_concentrates() {
        let pairs = synth_corpus(4, 2500, 0.5, 9).unwrap();
        let shared = pairs
            .iter()
            .filter(|p| p.response[0][..2] == p.context_turns[0][0][..2])
            .count() as f64
            / pairs.len() as f64;
        assert!((0.48..=0.52).contains(&shared), "shared fraction {shared}");
    }

    #[test]
    fn scoring_matches_bruteforce_mean() {
        let pairs = synth_corpus(4, 250, 0.5, 11).unwrap();
        let tokens: Vec<String> = pairs
            .iter()
            .flat_map(|p| {
                p.context_tokens()
                    .into_iter()
                    .chain(p.response.iter().cloned())
            })
            .collect();
        let vocab = Vocabulary::build(tokens.iter(), 1, 10_000, &HashSet::new()).unwrap();
        let emb = synth_embeddings(4, &vocab, 0.2);
        let (scored, stats) = score_pairs(&pairs, &emb, &vocab).unwrap();
        assert_eq!(stats.scored, scored.len());
        let mean: f64 =
            scored.iter().map(|p| p.coherence.unwrap()).sum::<f64>() / scored.len() as f64;
        // independent recomputation
        let brute: f64 = scored
            .iter()
            .map(|p| {
                coherence(
                    &vocab.encode(&p.context_tokens()),
                    &vocab.encode(&p.response),
                    &emb,
                    &vocab,
                )
                .unwrap()
                .value()
            })
            .sum::<f64>()
            / scored.len() as f64;
        assert!((mean - brute).abs() < 1e-9);
    }
}
