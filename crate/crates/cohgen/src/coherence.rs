//! Coherence scoring between a dialogue context and a response: cosine
//! similarity of importance-weighted sentence embeddings, with a soft
//! variant that consumes output probability distributions.

use crate::error::{Error, Result};
use crate::glove::EmbeddingMatrix;
use crate::vocab::Vocabulary;

/// Cosine similarity value in [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct CoherenceScore(pub f64);

impl CoherenceScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    /// Sum of the importance weights that contributed; 0 means the vector is
    /// all zeros and coherence is undefined.
    pub weight_mass: f64,
}

/// Weight 1.0 for content words, 0.0 for stop words and UNK/specials.
pub fn importance_weights(tokens: &[u32], vocab: &Vocabulary) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(tokens
        .iter()
        .map(|&id| {
            if vocab.is_special(id) || vocab.is_stopword(id) {
                0.0
            } else {
                1.0
            }
        })
        .collect())
}

/// Importance-weighted sum of word vectors.
pub fn sentence_embedding(
    tokens: &[u32],
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<SentenceEmbedding> {
    let weights = importance_weights(tokens, vocab)?;
    let mut vector = vec![0.0; emb.dim()];
    let mut mass = 0.0;
    for (&id, &w) in tokens.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        mass += w;
        for (acc, v) in vector.iter_mut().zip(emb.row(id)) {
            *acc += w * v;
        }
    }
    Ok(SentenceEmbedding { vector, weight_mass: mass })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<CoherenceScore> {
    let (na, nb) = (norm(&a.vector), norm(&b.vector));
    if a.weight_mass == 0.0 || b.weight_mass == 0.0 || na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCoherence);
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok(CoherenceScore(dot / (na * nb)))
}

/// C(x, y): cosine similarity of the two weighted sentence embeddings.
pub fn coherence(
    context: &[u32],
    response: &[u32],
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<CoherenceScore> {
    let a = sentence_embedding(context, emb, vocab)?;
    let b = sentence_embedding(response, emb, vocab)?;
    cosine(&a, &b)
}

/// Soft response embedding: per position, the expectation of word vectors
/// under the output distribution. No importance weights here; callers should
/// pass an embedding matrix whose special rows are zeroed
/// ([`EmbeddingMatrix::with_zeroed_specials`]).
pub fn soft_sentence_embedding(
    dists: &[Vec<f64>],
    emb: &EmbeddingMatrix,
) -> Result<SentenceEmbedding> {
    if dists.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut vector = vec![0.0; emb.dim()];
    for dist in dists {
        if dist.len() != emb.rows() {
            return Err(Error::Input(format!(
                "distribution length {} != vocab size {}",
                dist.len(),
                emb.rows()
            )));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(total));
        }
        for (id, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (acc, v) in vector.iter_mut().zip(emb.row(id as u32)) {
                *acc += p * v;
            }
        }
    }
    let mass = if norm(&vector) == 0.0 { 0.0 } else { dists.len() as f64 };
    Ok(SentenceEmbedding { vector, weight_mass: mass })
}

/// Coherence with a soft response side: importance-weighted embedding sum on
/// the context, expectation embedding on the response.
pub fn soft_coherence(
    context: &[u32],
    dists: &[Vec<f64>],
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<CoherenceScore> {
    let a = sentence_embedding(context, emb, vocab)?;
    let b = soft_sentence_embedding(dists, &emb.with_zeroed_specials())?;
    cosine(&a, &b)
}
