//! Response generation from a frozen model: z drawn from the prior, the
//! coherence code supplied as input, greedy or beam decoding.

use crate::coherence::{coherence, CoherenceScore};
use crate::error::{Error, Result};
use crate::glove::EmbeddingMatrix;
use crate::model::{GeneratorModel, Graph, Variant};
use crate::vocab::{Vocabulary, BOS, EOS, PAD, UNK};
use numcore::{LstmState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub enum CMode {
    /// Fixed coherence code in [−1, 1].
    Preset(f64),
    /// Code taken from the gold response's true coherence.
    Oracle(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub context: Vec<String>,
    pub c_mode: CMode,
    pub decode: DecodeMode,
    pub max_len: usize,
    pub seed: u64,
    /// Use the prior mean instead of a sample for z.
    pub mean_z: bool,
}

impl GenerationRequest {
    pub fn new(context: Vec<String>, c: f64) -> GenerationRequest {
        GenerationRequest {
            context,
            c_mode: CMode::Preset(c),
            decode: DecodeMode::Greedy,
            max_len: 30,
            seed: 0,
            mean_z: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.max_len < 1 {
            return Err(Error::Input("max_len must be >= 1".into()));
        }
        match self.c_mode {
            CMode::Preset(v) if !(-1.0..=1.0).contains(&v) => {
                Err(Error::Input(format!("preset c {v} outside [-1, 1]")))
            }
            CMode::Oracle(ref gold) if gold.is_empty() => {
                Err(Error::Input("oracle mode needs a gold response".into()))
            }
            _ => match self.decode {
                DecodeMode::Beam(0) => Err(Error::Input("beam width must be >= 1".into())),
                _ => Ok(()),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub coherence: Option<f64>,
    pub gates: Vec<f64>,
    pub c_used: f64,
    pub ended_with_eos: bool,
}

/// The true coherence between a context and its gold response.
pub fn oracle_c(
    context: &[String],
    gold: &[String],
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<CoherenceScore> {
    coherence(&vocab.encode(context), &vocab.encode(gold), glv, vocab)
}

/// Tokens that may never be emitted.
fn banned(id: usize) -> bool {
    id == PAD as usize || id == UNK as usize || id == BOS as usize
}

struct Hypothesis {
    ids: Vec<u32>,
    state: LstmState,
    log_prob: f64,
    gates: Vec<f64>,
    done: bool,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.log_prob / self.ids.len().max(1) as f64
    }
}

fn prefix_coherence(
    x: &[u32],
    prefix: &[u32],
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> f64 {
    if prefix.is_empty() {
        return 0.0;
    }
    coherence(x, prefix, glv, vocab).map(|c| c.value()).unwrap_or(0.0)
}

/// Decode one response. Deterministic for a fixed request seed.
pub fn generate(
    model: &GeneratorModel,
    request: &GenerationRequest,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<GenerationResult> {
    request.validate()?;
    let x = vocab.encode(&request.context);
    let c_used = match &request.c_mode {
        CMode::Preset(v) => *v,
        CMode::Oracle(gold) => oracle_c(&request.context, gold, glv, vocab)?.value(),
    };
    let mut rng = ChaCha12Rng::seed_from_u64(request.seed);
    let mut g = Graph::new(model, false)?;
    let (enc, summary) = g.encode_context(&x, &mut rng)?;
    let p = g.prior(&x, &mut rng)?;
    let z = if request.mean_z { p.mu } else { g.sample_latent(&p, &mut rng)? };
    let c_var = g.tape.constant(Tensor::vector(vec![c_used]))?;
    let s0 = g.init_decoder_state(summary, z, c_var)?;
    let scalar_gate =
        model.config.variant == Variant::CvaeXgate && model.config.lambda > 0.0;

    let width = match request.decode {
        DecodeMode::Greedy => 1,
        DecodeMode::Beam(w) => w,
    };

    // One decoder step for a hypothesis; returns the per-token log-probs and
    // the gate value, leaving expansion policy to the caller.
    let step = |g: &mut Graph,
                    hyp: &Hypothesis,
                    rng: &mut ChaCha12Rng|
     -> Result<(Vec<f64>, LstmState, f64)> {
        let prev = *hyp.ids.last().unwrap_or(&BOS);
        let y_emb = g.embed_id(prev)?;
        let signal = if scalar_gate {
            let cp = prefix_coherence(&x, &hyp.ids, glv, vocab);
            let cp = g.tape.scalar_const(cp)?;
            Some((c_var, cp))
        } else {
            None
        };
        let out = g.decoder_step(y_emb, &hyp.state, &enc, signal, rng)?;
        let gate = out
            .gate
            .map(|k| g.tape.value(k).item())
            .unwrap_or(0.0);
        Ok((g.tape.value(out.log_probs).data().to_vec(), out.state, gate))
    };

    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        state: s0,
        log_prob: 0.0,
        gates: Vec::new(),
        done: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..request.max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &alive {
            let (log_probs, state, gate) = step(&mut g, hyp, &mut rng)?;
            // rank token choices, skipping banned ids
            let mut ranked: Vec<(usize, f64)> = log_probs
                .iter()
                .copied()
                .enumerate()
                .filter(|&(id, _)| !banned(id))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            for &(id, lp) in ranked.iter().take(width) {
                let mut ids = hyp.ids.clone();
                let mut gates = hyp.gates.clone();
                gates.push(gate);
                let done = id == EOS as usize;
                if !done {
                    ids.push(id as u32);
                }
                candidates.push(Hypothesis {
                    ids,
                    state: state.clone(),
                    log_prob: hyp.log_prob + lp,
                    gates,
                    done,
                });
            }
        }
        candidates.sort_by(|a, b| b.normalized().total_cmp(&a.normalized()));
        alive = Vec::new();
        for cand in candidates {
            if cand.done {
                finished.push(cand);
            } else if alive.len() < width {
                alive.push(cand);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .into_iter()
        .max_by(|a, b| a.normalized().total_cmp(&b.normalized()))
        .ok_or_else(|| Error::Input("decoding produced no hypotheses".into()))?;

    let realized = coherence(&x, &best.ids, glv, vocab).ok().map(|c| c.value());
    Ok(GenerationResult {
        tokens: vocab.decode(&best.ids),
        ids: best.ids,
        log_prob: best.log_prob,
        coherence: realized,
        gates: best.gates,
        c_used,
        ended_with_eos: best.done,
    })
}

/// Seed for request `index` under a batch base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 of the combined value: decorrelates consecutive indices
    let mut s = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    s ^ (s >> 31)
}

/// Order-preserving parallel generation. Per-request errors are isolated;
/// results are independent of worker count because every request carries its
/// own seed.
pub fn generate_batch(
    model: &GeneratorModel,
    requests: &[GenerationRequest],
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    workers: usize,
) -> Result<Vec<Result<GenerationResult>>> {
    if workers < 1 {
        return Err(Error::Input("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        requests
            .par_iter()
            .map(|r| generate(model, r, glv, vocab))
            .collect()
    }))
}
