//! The composite training objective — reconstruction + KL, the coherence
//! signal loss, and the latent-reproduction loss — plus the mini-batch
//! training loop.

use crate::coherence::coherence;
use crate::corpus::DialoguePair;
use crate::error::{Error, Result};
use crate::glove::EmbeddingMatrix;
use crate::model::{GeneratorModel, Graph};
use crate::vocab::{Vocabulary, EOS};
use numcore::{clip_global_norm, AdamState, ParamSet, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::path::PathBuf;

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub lambda_c: f64,
    pub lambda_z: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Steps over which the KL weight ramps linearly from 0 to
    /// `kl_weight_max`; 0 applies the full weight from the first step.
    pub kl_anneal_steps: usize,
    pub kl_weight_max: f64,
    pub seed: u64,
    pub max_freerun_len: usize,
    pub clip_norm: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> TrainingConfig {
        TrainingConfig {
            lambda_c: 0.1,
            lambda_z: 0.1,
            batch_size: 32,
            epochs: 10,
            lr: 1e-3,
            kl_anneal_steps: 5_000,
            kl_weight_max: 1.0,
            seed: 0,
            max_freerun_len: 30,
            clip_norm: 5.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_c < 0.0 || self.lambda_z < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.batch_size < 1 || self.max_freerun_len < 1 {
            return Err(Error::Config("batch_size and max_freerun_len must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be > 0".into()));
        }
        if self.kl_weight_max < 0.0 {
            return Err(Error::Config("kl_weight_max must be >= 0".into()));
        }
        Ok(())
    }

    /// Monotone non-decreasing KL weight for a 1-based step index.
    pub fn kl_weight(&self, step: usize) -> f64 {
        if self.kl_anneal_steps == 0 {
            return self.kl_weight_max;
        }
        self.kl_weight_max * (step as f64 / self.kl_anneal_steps as f64).min(1.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub l_c: f64,
    pub l_z: f64,
}

impl LossReport {
    /// total must recompose from its parts exactly (tolerance 1e-9).
    pub fn consistent(&self, lambda_c: f64, lambda_z: f64) -> bool {
        let recomposed = self.reconstruction
            + self.kl_weight * self.kl
            + lambda_c * self.l_c
            + lambda_z * self.l_z;
        (self.total - recomposed).abs() <= 1e-9 * (1.0 + self.total.abs())
    }
}

/// Sample from N(0,1) truncated to [−1, 1] by rejection; keeps the coherence
/// code inside the cosine range.
pub fn sample_coherence_code<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if (-1.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Context ids and response ids (response terminated with EOS).
pub fn encode_pair(p: &DialoguePair, vocab: &Vocabulary) -> (Vec<u32>, Vec<u32>) {
    let x = vocab.encode(&p.context_tokens());
    let mut y = vocab.encode(&p.response);
    y.push(EOS);
    (x, y)
}

fn pair_coherence(
    p: &DialoguePair,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<f64> {
    match p.coherence {
        Some(c) => Ok(c),
        None => {
            let x = vocab.encode(&p.context_tokens());
            let y = vocab.encode(&p.response);
            Ok(coherence(&x, &y, glv, vocab)?.value())
        }
    }
}

pub struct GenLossParts {
    pub reconstruction: f64,
    pub kl: f64,
}

/// L_G on one pair: single-sample z ~ q(z|x,y), reconstruction −log p(y|·)
/// plus KL(q ∥ p). Returns values only; the training loop builds its own
/// graph for gradients.
#[allow(clippy::too_many_arguments)]
pub fn loss_generation<R: Rng>(
    model: &GeneratorModel,
    x: &[u32],
    y: &[u32],
    c_gold: f64,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<GenLossParts> {
    let mut g = Graph::new(model, false)?;
    let q = g.posterior(x, &y[..y.len() - 1], rng)?;
    let p = g.prior(x, rng)?;
    let z = g.sample_latent(&q, rng)?;
    let kl = g.kl(&q, &p)?;
    let c = g.tape.constant(Tensor::vector(vec![c_gold]))?;
    let (_, ll) = g.forward_teacher_forced(x, y, z, c, glv, vocab, rng)?;
    Ok(GenLossParts {
        reconstruction: -g.tape.value(ll).item(),
        kl: g.tape.value(kl).item(),
    })
}

/// L_c on one context: free-run at a sampled code and penalize the squared
/// gap between the code and the realized soft coherence. An undefined soft
/// coherence contributes the constant penalty 1 + c².
pub fn loss_coherence<R: Rng>(
    model: &GeneratorModel,
    x: &[u32],
    c_sampled: f64,
    max_len: usize,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new(model, false)?;
    let p = g.prior(x, rng)?;
    let z = g.sample_latent(&p, rng)?;
    let c = g.tape.constant(Tensor::vector(vec![c_sampled]))?;
    let run = g.forward_soft_freerun(x, z, c, max_len, glv, vocab, rng)?;
    Ok(match run.soft_coherence {
        Some(sc) => {
            let d = c_sampled - g.tape.value(sc).item();
            d * d
        }
        None => 1.0 + c_sampled * c_sampled,
    })
}

/// L_z on one context: free-run, feed the soft sequence back through the
/// posterior, and take −log N(z; μ, Σ) of the z that produced it.
pub fn loss_diversity<R: Rng>(
    model: &GeneratorModel,
    x: &[u32],
    c_sampled: f64,
    max_len: usize,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new(model, false)?;
    let p = g.prior(x, rng)?;
    let z = g.sample_latent(&p, rng)?;
    let c = g.tape.constant(Tensor::vector(vec![c_sampled]))?;
    let run = g.forward_soft_freerun(x, z, c, max_len, glv, vocab, rng)?;
    let dists: Vec<Var> = run.steps.iter().map(|s| s.dist).collect();
    let q = g.posterior_soft(x, &dists, rng)?;
    let z_val = g.tape.value(z).data().to_vec();
    Ok(g.gaussian_values(&q).neg_log_density(&z_val))
}

/// Differentiable composite loss for one pair, with gradients.
pub struct PairLossOutput {
    pub reconstruction: f64,
    pub kl: f64,
    pub l_c: f64,
    pub l_z: f64,
    pub total: f64,
    pub grads: ParamSet,
}

/// Build the full per-pair objective on one tape and backpropagate. The
/// free-run is shared between L_c and L_z. The latent target of L_z is
/// treated as a constant (the sample's value), not backpropagated through.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss<R: Rng>(
    model: &GeneratorModel,
    pair: &DialoguePair,
    cfg: &TrainingConfig,
    kl_weight: f64,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<PairLossOutput> {
    let (x, y) = encode_pair(pair, vocab);
    let c_gold = pair_coherence(pair, glv, vocab)?;
    let mut g = Graph::new(model, true)?;

    let q = g.posterior(&x, &y[..y.len() - 1], rng)?;
    let p = g.prior(&x, rng)?;
    let z = g.sample_latent(&q, rng)?;
    let kl = g.kl(&q, &p)?;
    let c = g.tape.constant(Tensor::vector(vec![c_gold]))?;
    let (_, ll) = g.forward_teacher_forced(&x, &y, z, c, glv, vocab, rng)?;
    let rec = g.tape.neg(ll)?;

    let mut total = rec;
    if kl_weight > 0.0 {
        let w = g.tape.scale(kl, kl_weight)?;
        total = g.tape.add(total, w)?;
    }

    let (mut lc_val, mut lz_val) = (0.0, 0.0);
    if cfg.lambda_c > 0.0 || cfg.lambda_z > 0.0 {
        let c_sampled = sample_coherence_code(rng);
        let zp = g.sample_latent(&p, rng)?;
        let cs = g.tape.constant(Tensor::vector(vec![c_sampled]))?;
        let run = g.forward_soft_freerun(&x, zp, cs, cfg.max_freerun_len, glv, vocab, rng)?;

        if cfg.lambda_c > 0.0 {
            let lc = match run.soft_coherence {
                Some(sc) => {
                    let d = g.tape.affine(sc, -1.0, c_sampled)?;
                    g.tape.mul(d, d)?
                }
                None => g.tape.scalar_const(1.0 + c_sampled * c_sampled)?,
            };
            lc_val = g.tape.value(lc).item();
            let w = g.tape.scale(lc, cfg.lambda_c)?;
            total = g.tape.add(total, w)?;
        }
        if cfg.lambda_z > 0.0 {
            let dists: Vec<Var> = run.steps.iter().map(|s| s.dist).collect();
            let qs = g.posterior_soft(&x, &dists, rng)?;
            let dim = g.config().latent_dim as f64;
            let diff = g.tape.sub(zp, qs.mu)?;
            let d2 = g.tape.mul(diff, diff)?;
            let neg_lv = g.tape.neg(qs.log_var)?;
            let inv = g.tape.exp(neg_lv)?;
            let quad = g.tape.mul(d2, inv)?;
            let s = g.tape.add(qs.log_var, quad)?;
            let ssum = g.tape.sum(s)?;
            let lz = g.tape.affine(
                ssum,
                0.5,
                0.5 * dim * (2.0 * std::f64::consts::PI).ln(),
            )?;
            lz_val = g.tape.value(lz).item();
            let w = g.tape.scale(lz, cfg.lambda_z)?;
            total = g.tape.add(total, w)?;
        }
    }

    let total_val = g.tape.value(total).item();
    if !total_val.is_finite() {
        return Err(Error::DivergedTraining(format!("loss became {total_val}")));
    }
    let grads = g.tape.backward(total)?;
    Ok(PairLossOutput {
        reconstruction: g.tape.value(rec).item(),
        kl: g.tape.value(kl).item(),
        l_c: lc_val,
        l_z: lz_val,
        total: total_val,
        grads: g.grads(&grads),
    })
}

fn add_scaled(acc: &mut ParamSet, g: &ParamSet, scale: f64) {
    for (name, t) in g.iter() {
        match acc.get_mut(name) {
            Some(a) => {
                for (av, tv) in a.data_mut().iter_mut().zip(t.data()) {
                    *av += scale * tv;
                }
            }
            None => {
                let mut t = t.clone();
                for v in t.data_mut() {
                    *v *= scale;
                }
                acc.insert(name, t);
            }
        }
    }
}

/// Mini-batch training loop: Adam with global-norm clipping, linear KL
/// annealing, per-epoch checkpoints. Deterministic for a fixed seed.
pub fn train(
    model: &mut GeneratorModel,
    pairs: &[DialoguePair],
    cfg: &TrainingConfig,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<Vec<LossReport>> {
    train_with_progress(model, pairs, cfg, glv, vocab, |_, _| {})
}

/// [`train`] with a per-epoch callback receiving the epoch index and its
/// averaged loss report.
pub fn train_with_progress(
    model: &mut GeneratorModel,
    pairs: &[DialoguePair],
    cfg: &TrainingConfig,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_acc = LossReport {
            step: 0,
            total: 0.0,
            reconstruction: 0.0,
            kl: 0.0,
            kl_weight: 0.0,
            l_c: 0.0,
            l_z: 0.0,
        };
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let kl_weight = cfg.kl_weight(step);
            let mut grads = ParamSet::new();
            let mut report = LossReport {
                step,
                total: 0.0,
                reconstruction: 0.0,
                kl: 0.0,
                kl_weight,
                l_c: 0.0,
                l_z: 0.0,
            };
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let out = pair_loss(model, &pairs[i], cfg, kl_weight, glv, vocab, &mut rng)?;
                add_scaled(&mut grads, &out.grads, scale);
                report.total += scale * out.total;
                report.reconstruction += scale * out.reconstruction;
                report.kl += scale * out.kl;
                report.l_c += scale * out.l_c;
                report.l_z += scale * out.l_z;
            }
            if !report.total.is_finite() {
                return Err(Error::DivergedTraining(format!(
                    "batch loss became {} at step {step}",
                    report.total
                )));
            }
            debug_assert!(report.consistent(cfg.lambda_c, cfg.lambda_z));
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads)?;

            epoch_acc.total += report.total;
            epoch_acc.reconstruction += report.reconstruction;
            epoch_acc.kl += report.kl;
            epoch_acc.kl_weight = report.kl_weight;
            epoch_acc.l_c += report.l_c;
            epoch_acc.l_z += report.l_z;
            batches += 1;
        }
        let n = batches as f64;
        reports.push(LossReport {
            step,
            total: epoch_acc.total / n,
            reconstruction: epoch_acc.reconstruction / n,
            kl: epoch_acc.kl / n,
            kl_weight: epoch_acc.kl_weight,
            l_c: epoch_acc.l_c / n,
            l_z: epoch_acc.l_z / n,
        });
        on_epoch(epoch, reports.last().unwrap());
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("ckpt-{epoch}.bin")))?;
        }
    }
    Ok(reports)
}

/// Central finite-difference verification of the analytic gradients of the
/// full composite per-pair objective. Returns the maximum relative error
/// over every parameter element. Requires dropout off so that replaying the
/// loss under the same seed is a pure function of the parameters.
pub fn composite_grad_check(
    model: &mut GeneratorModel,
    pair: &DialoguePair,
    cfg: &TrainingConfig,
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
    eps: f64,
) -> Result<f64> {
    if model.config.dropout != 0.0 {
        return Err(Error::Config("gradient check requires dropout = 0".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Input("eps must be > 0".into()));
    }
    let kl_weight = cfg.kl_weight_max;
    let eval = |m: &GeneratorModel| -> Result<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        Ok(pair_loss(m, pair, cfg, kl_weight, glv, vocab, &mut rng)?.total)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let analytic = pair_loss(model, pair, cfg, kl_weight, glv, vocab, &mut rng)?.grads;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut max_rel = 0.0f64;
    for name in &names {
        let len = model.params.require(name)?.len();
        for i in 0..len {
            let orig = model.params.require(name)?.data()[i];
            model.params.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(model)?;
            model.params.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(model)?;
            model.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Per-token reconstruction perplexity with the deterministic posterior mean
/// as z and the gold coherence as c.
pub fn reconstruction_perplexity(
    model: &GeneratorModel,
    pairs: &[DialoguePair],
    glv: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in pairs {
        let (x, y) = encode_pair(pair, vocab);
        let c_gold = pair_coherence(pair, glv, vocab)?;
        let mut g = Graph::new(model, false)?;
        let q = g.posterior(&x, &y[..y.len() - 1], &mut rng)?;
        let z = q.mu;
        let c = g.tape.constant(Tensor::vector(vec![c_gold]))?;
        let (_, ll) = g.forward_teacher_forced(&x, &y, z, c, glv, vocab, &mut rng)?;
        nll -= g.tape.value(ll).item();
        tokens += y.len();
    }
    Ok((nll / tokens as f64).exp())
}
