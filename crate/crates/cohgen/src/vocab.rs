//! Tokenization, vocabulary construction, and stop-word flags.

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bundled English function-word and punctuation list.
pub fn default_stopwords() -> HashSet<String> {
    include_str!("../data/stopwords_en.txt")
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Lowercase, split on whitespace, and peel leading/trailing punctuation off
/// into their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        for &c in &chars[..start] {
            out.push(c.to_string());
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end..] {
            out.push(c.to_string());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    frequency: Vec<u64>,
    is_stopword: Vec<bool>,
}

impl Vocabulary {
    /// Build from a token stream: frequency-sorted (ties by first
    /// occurrence), truncated to `max_size` including the four specials.
    pub fn build<I, S>(corpus: I, min_count: u64, max_size: usize, stopwords: &HashSet<String>) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut order = 0usize;
        for tok in corpus {
            let tok = tok.as_ref();
            let entry = counts.entry(tok.to_string()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            entry.0 += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut sorted: Vec<(String, u64, usize)> = counts
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_count)
            .map(|(t, (c, o))| (t, c, o))
            .collect();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let capacity = max_size.saturating_sub(NUM_SPECIALS);
        sorted.truncate(capacity);

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut frequency: Vec<u64> = vec![0; NUM_SPECIALS];
        for (t, c, _) in sorted {
            tokens.push(t);
            frequency.push(c);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let is_stopword = tokens
            .iter()
            .map(|t| stopwords.contains(&t.to_lowercase()))
            .collect();
        Ok(Vocabulary { tokens, ids, frequency, is_stopword })
    }

    /// Reconstruct a vocabulary from a plain token list (e.g. an embedding
    /// file). Specials keep frequency 0, everything else gets 1.
    pub fn from_tokens(tokens: Vec<String>, stopwords: &HashSet<String>) -> Result<Vocabulary> {
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::Input("token list is missing specials".into()));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Input(format!(
                    "token {i} is {:?}, expected special {s:?}",
                    tokens[i]
                )));
            }
        }
        let ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if ids.len() != tokens.len() {
            return Err(Error::Input("duplicate tokens in vocabulary".into()));
        }
        let frequency = tokens
            .iter()
            .enumerate()
            .map(|(i, _)| if i < NUM_SPECIALS { 0 } else { 1 })
            .collect();
        let is_stopword = tokens
            .iter()
            .map(|t| stopwords.contains(&t.to_lowercase()))
            .collect();
        Ok(Vocabulary { tokens, ids, frequency, is_stopword })
    }

    pub fn apply_stopwords(&mut self, stopwords: &HashSet<String>) {
        self.is_stopword = self
            .tokens
            .iter()
            .map(|t| stopwords.contains(&t.to_lowercase()))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequency[id as usize]
    }

    pub fn is_stopword(&self, id: u32) -> bool {
        self.is_stopword[id as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// `token<TAB>frequency<TAB>stop-flag` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.tokens.len() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.tokens[i],
                self.frequency[i],
                if self.is_stopword[i] { 1 } else { 0 }
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut frequency = Vec::new();
        let mut is_stopword = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let tok = parts.next().ok_or(Error::Parse { line: i + 1, msg: "missing token".into() })?;
            let freq: u64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { line: i + 1, msg: "bad frequency".into() })?;
            let flag = parts
                .next()
                .and_then(|s| s.parse::<u8>().ok())
                .ok_or(Error::Parse { line: i + 1, msg: "bad stop flag".into() })?;
            tokens.push(tok.to_string());
            frequency.push(freq);
            is_stopword.push(flag != 0);
        }
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::EmptyCorpus);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { tokens, ids, frequency, is_stopword })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_stops() -> HashSet<String> {
        HashSet::new()
    }

    #[test]
    fn build_counts_and_sorts() {
        let v = Vocabulary::build("a b a".split_whitespace(), 1, 100, &no_stops()).unwrap();
        assert_eq!(v.size(), 2 + NUM_SPECIALS);
        assert_eq!(v.token(4), "a");
        assert_eq!(v.frequency(v.id("a")), 2);
        assert_eq!(v.frequency(v.id("b")), 1);
    }

    #[test]
    fn empty_corpus_is_error() {
        let toks: Vec<&str> = vec![];
        assert!(matches!(
            Vocabulary::build(toks, 1, 100, &no_stops()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn stopword_flags_follow_list() {
        let stops: HashSet<String> = ["the".to_string()].into_iter().collect();
        let v = Vocabulary::build("the cat".split_whitespace(), 1, 100, &stops).unwrap();
        assert!(v.is_stopword(v.id("the")));
        assert!(!v.is_stopword(v.id("cat")));
    }

    #[test]
    fn truncation_reserves_specials() {
        let v = Vocabulary::build("a a a b b c".split_whitespace(), 1, 6, &no_stops()).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.lookup("c"), None);
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn frequency_ties_break_by_first_occurrence() {
        let v = Vocabulary::build("z q z q".split_whitespace(), 1, 100, &no_stops()).unwrap();
        assert!(v.id("z") < v.id("q"));
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("(end.)"), vec!["(", "end", ".", ")"]);
        assert_eq!(tokenize("..."), vec![".", ".", "."]);
    }

    #[test]
    fn ids_are_a_bijection() {
        let v = Vocabulary::build("x y z".split_whitespace(), 1, 100, &no_stops()).unwrap();
        for i in 0..v.size() as u32 {
            assert_eq!(v.id(v.token(i)), i);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let stops: HashSet<String> = ["b".to_string()].into_iter().collect();
        let v = Vocabulary::build("a b a".split_whitespace(), 1, 100, &stops).unwrap();
        v.save(&path).unwrap();
        let w = Vocabulary::load(&path).unwrap();
        assert_eq!(w.tokens(), v.tokens());
        assert_eq!(w.frequency(4), 2);
        assert!(w.is_stopword(w.id("b")));
    }
}
