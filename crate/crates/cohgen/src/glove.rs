//! GloVe-style embedding training: weighted least squares on log
//! co-occurrence counts with per-element adaptive-gradient updates.

use crate::cooccur::CooccurrenceTable;
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, NUM_SPECIALS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Vocabulary-indexed dense word vectors (row per token).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dim: usize) -> EmbeddingMatrix {
        EmbeddingMatrix { dim, data: vec![0.0; rows * dim] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<EmbeddingMatrix> {
        let dim = rows.first().map(|r| r.len()).ok_or(Error::EmptyCorpus)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::Input("ragged embedding rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let i = id as usize;
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row matrix with the special-token rows forced to zero; used by the
    /// soft coherence path.
    pub fn with_zeroed_specials(&self) -> EmbeddingMatrix {
        let mut m = self.clone();
        for id in 0..NUM_SPECIALS as u32 {
            for v in m.row_mut(id) {
                *v = 0.0;
            }
        }
        m
    }
}

/// Weighting f(x) = min(1, (x/x_max)^alpha).
pub fn glove_weight(x: f64, x_max: f64, alpha: f64) -> f64 {
    if x >= x_max {
        1.0
    } else {
        (x / x_max).powf(alpha)
    }
}

pub struct GloveConfig {
    pub dim: usize,
    pub epochs: usize,
    pub x_max: f64,
    pub alpha: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GloveConfig {
    fn default() -> GloveConfig {
        GloveConfig { dim: 100, epochs: 30, x_max: 100.0, alpha: 0.75, lr: 0.05, seed: 0 }
    }
}

/// Train embeddings over a co-occurrence table. Single-threaded and
/// bit-reproducible for a fixed seed. Returns center + context vectors
/// summed per token; special rows stay zero.
pub fn train_glove(
    table: &CooccurrenceTable,
    vocab_size: usize,
    cfg: &GloveConfig,
) -> Result<EmbeddingMatrix> {
    if table.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.dim < 1 {
        return Err(Error::Input("dim must be >= 1".into()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let init = 0.5 / d as f64;
    let mut gen = |n: usize| -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| rng.gen_range(-init..=init)).collect()
    };
    let mut w = gen(vocab_size * d);
    let mut wc = gen(vocab_size * d);
    let mut b = gen(vocab_size);
    let mut bc = gen(vocab_size);
    // AdaGrad accumulators start at 1 so early updates are bounded by lr
    let mut gw: Vec<f64> = vec![1.0; vocab_size * d];
    let mut gwc: Vec<f64> = vec![1.0; vocab_size * d];
    let mut gb: Vec<f64> = vec![1.0; vocab_size];
    let mut gbc: Vec<f64> = vec![1.0; vocab_size];

    let mut entries = table.sorted_entries();
    let mut prev_loss = f64::INFINITY;
    for _epoch in 0..cfg.epochs {
        entries.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, j, x) in &entries {
            let (i, j) = (i as usize, j as usize);
            let fw = glove_weight(x, cfg.x_max, cfg.alpha);
            let dotp: f64 = (0..d).map(|k| w[i * d + k] * wc[j * d + k]).sum();
            let diff = dotp + b[i] + bc[j] - x.ln();
            total += 0.5 * fw * diff * diff;
            let fdiff = fw * diff;
            for k in 0..d {
                let gi = fdiff * wc[j * d + k];
                let gj = fdiff * w[i * d + k];
                w[i * d + k] -= cfg.lr * gi / gw[i * d + k].sqrt();
                wc[j * d + k] -= cfg.lr * gj / gwc[j * d + k].sqrt();
                gw[i * d + k] += gi * gi;
                gwc[j * d + k] += gj * gj;
            }
            b[i] -= cfg.lr * fdiff / gb[i].sqrt();
            bc[j] -= cfg.lr * fdiff / gbc[j].sqrt();
            gb[i] += fdiff * fdiff;
            gbc[j] += fdiff * fdiff;
        }
        if !total.is_finite() {
            return Err(Error::DivergedTraining(format!("loss became {total}")));
        }
        prev_loss = total;
    }
    let _ = prev_loss;

    let mut out = EmbeddingMatrix::zeros(vocab_size, d);
    let trained: HashSet<u32> = table
        .sorted_entries()
        .iter()
        .flat_map(|&(a, bb, _)| [a, bb])
        .collect();
    for id in trained {
        let i = id as usize;
        let row = out.row_mut(id);
        for k in 0..d {
            row[k] = w[i * d + k] + wc[i * d + k];
        }
    }
    if !out.is_finite() {
        return Err(Error::DivergedTraining("non-finite embedding".into()));
    }
    Ok(out)
}

/// One line per token: `token v1 v2 ... vdim`, space-separated, `.` decimal.
/// Uses shortest exact float formatting, so round trips are lossless.
pub fn save_embeddings(m: &EmbeddingMatrix, vocab: &Vocabulary, path: &Path) -> Result<()> {
    if m.rows() != vocab.size() {
        return Err(Error::Input(format!(
            "embedding rows {} != vocab size {}",
            m.rows(),
            vocab.size()
        )));
    }
    let mut wtr = BufWriter::new(std::fs::File::create(path)?);
    for id in 0..vocab.size() as u32 {
        write!(wtr, "{}", vocab.token(id))?;
        for v in m.row(id) {
            write!(wtr, " {v}")?;
        }
        writeln!(wtr)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Stop-word flags are not stored in the embedding file; call
/// [`Vocabulary::apply_stopwords`] after loading.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingMatrix, Vocabulary)> {
    let rdr = BufReader::new(std::fs::File::open(path)?);
    let mut tokens = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in rdr.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let tok = parts
            .next()
            .ok_or(Error::Parse { line: i + 1, msg: "empty line".into() })?;
        let vals: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if let Some(d) = dim {
            if vals.len() != d {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {d} columns, got {}", vals.len()),
                });
            }
        } else {
            if vals.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "no vector columns".into() });
            }
            dim = Some(vals.len());
        }
        tokens.push(tok.to_string());
        rows.push(vals);
    }
    if tokens.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let m = EmbeddingMatrix::from_rows(rows)?;
    let vocab = Vocabulary::from_tokens(tokens, &HashSet::new())?;
    Ok((m, vocab))
}
