//! The conditional-VAE dialogue generator: context encoder, posterior and
//! prior networks, latent sampling, and an attention decoder whose input is
//! modulated by a coherence-conditioned context gate.

use crate::coherence::{coherence, sentence_embedding};
use crate::error::{Error, Result};
use crate::glove::EmbeddingMatrix;
use crate::vocab::{Vocabulary, BOS, EOS};
use numcore::{
    lstm_param_shapes, lstm_step, Gradients, LstmLayer, LstmState, LstmVars, ParamSet, Tape,
    Tensor, Var,
};
use rand::Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CvaeXgate,
    CvaeCgate,
    AttentionBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::CvaeXgate => "xgate",
            Variant::CvaeCgate => "cgate",
            Variant::AttentionBaseline => "attention",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "xgate" => Ok(Variant::CvaeXgate),
            "cgate" => Ok(Variant::CvaeCgate),
            "attention" => Ok(Variant::AttentionBaseline),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected xgate, cgate, or attention)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Encoder and decoder share one hidden size
/// because the attention score is a plain dot product.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub cond_hidden: usize,
    pub dropout: f64,
    /// Gate amplitude λ in k_i = λ·σ(c − c'_i); 0 disables the gate path
    /// entirely.
    pub lambda: f64,
    pub variant: Variant,
}

impl Default for GeneratorConfig {
    fn default() -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: 25_000,
            emb_dim: 100,
            enc_layers: 2,
            dec_layers: 2,
            hidden: 128,
            latent_dim: 20,
            cond_hidden: 64,
            dropout: 0.2,
            lambda: 1.0,
            variant: Variant::CvaeXgate,
        }
    }
}

impl GeneratorConfig {
    /// Smallest configuration that still exercises every code path; used for
    /// exhaustive gradient checks.
    pub fn micro() -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: 20,
            emb_dim: 8,
            enc_layers: 2,
            dec_layers: 2,
            hidden: 8,
            latent_dim: 4,
            cond_hidden: 4,
            dropout: 0.0,
            lambda: 1.0,
            variant: Variant::CvaeXgate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("cond_hidden", self.cond_hidden),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Named parameter shapes, in a fixed order shared by init, checkpoint,
    /// and the tape binding.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.push(("emb".into(), vec![self.vocab_size, self.emb_dim]));
        for (l, (ws, bs)) in lstm_param_shapes(self.enc_layers, self.emb_dim, self.hidden)
            .into_iter()
            .enumerate()
        {
            out.push((format!("enc.l{l}.w"), ws));
            out.push((format!("enc.l{l}.b"), bs));
        }
        for prefix in ["post", "prior"] {
            let (ws, bs) = lstm_param_shapes(1, self.emb_dim, self.cond_hidden)
                .pop()
                .unwrap();
            out.push((format!("{prefix}.l0.w"), ws));
            out.push((format!("{prefix}.l0.b"), bs));
            out.push((format!("{prefix}.mu.w"), vec![self.latent_dim, self.cond_hidden]));
            out.push((format!("{prefix}.mu.b"), vec![self.latent_dim]));
            out.push((format!("{prefix}.lv.w"), vec![self.latent_dim, self.cond_hidden]));
            out.push((format!("{prefix}.lv.b"), vec![self.latent_dim]));
        }
        let init_in = self.hidden + self.latent_dim + 1;
        for l in 0..self.dec_layers {
            out.push((format!("init.l{l}.w"), vec![self.hidden, init_in]));
            out.push((format!("init.l{l}.b"), vec![self.hidden]));
        }
        for (l, (ws, bs)) in
            lstm_param_shapes(self.dec_layers, self.emb_dim + self.hidden, self.hidden)
                .into_iter()
                .enumerate()
        {
            out.push((format!("dec.l{l}.w"), ws));
            out.push((format!("dec.l{l}.b"), bs));
        }
        out.push(("att.w".into(), vec![self.hidden, 2 * self.hidden]));
        out.push(("att.b".into(), vec![self.hidden]));
        out.push(("out.w".into(), vec![self.vocab_size, self.hidden]));
        out.push(("out.b".into(), vec![self.vocab_size]));
        // defined for every variant so checkpoints stay variant-portable
        out.push((
            "cgate.w".into(),
            vec![self.hidden, self.emb_dim + 2 * self.hidden],
        ));
        out.push(("cgate.b".into(), vec![self.hidden]));
        out
    }
}

pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

const INIT_SCALE: f64 = 0.08;

impl GeneratorModel {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<GeneratorModel> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            params.insert(&name, Tensor::uniform(shape, INIT_SCALE, &mut rng));
        }
        Ok(GeneratorModel { config, params })
    }

    /// All parameters zero; softmax outputs are exactly uniform.
    pub fn zeroed(config: GeneratorConfig) -> Result<GeneratorModel> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            params.insert(&name, Tensor::zeros(shape));
        }
        Ok(GeneratorModel { config, params })
    }

    fn header(&self) -> String {
        let c = &self.config;
        format!(
            "cohgen-generator v1\nvariant={}\nvocab_size={}\nemb_dim={}\nenc_layers={}\n\
             dec_layers={}\nhidden={}\nlatent_dim={}\ncond_hidden={}\ndropout={}\nlambda={}\n",
            c.variant.name(),
            c.vocab_size,
            c.emb_dim,
            c.enc_layers,
            c.dec_layers,
            c.hidden,
            c.latent_dim,
            c.cond_hidden,
            c.dropout,
            c.lambda
        )
    }

    fn config_from_header(header: &str) -> Result<GeneratorConfig> {
        let mut kv = HashMap::new();
        for line in header.lines().skip(1) {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint header missing {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| Error::Config(format!("bad {k}: {e}")))
        };
        let fnum = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|e| Error::Config(format!("bad {k}: {e}")))
        };
        Ok(GeneratorConfig {
            vocab_size: num("vocab_size")?,
            emb_dim: num("emb_dim")?,
            enc_layers: num("enc_layers")?,
            dec_layers: num("dec_layers")?,
            hidden: num("hidden")?,
            latent_dim: num("latent_dim")?,
            cond_hidden: num("cond_hidden")?,
            dropout: fnum("dropout")?,
            lambda: fnum("lambda")?,
            variant: get("variant")?.parse()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        numcore::checkpoint::save(path, &self.header(), &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GeneratorModel> {
        let (header, params) = numcore::checkpoint::load(path)?;
        if !header.starts_with("cohgen-generator v1") {
            return Err(Error::Config(format!(
                "not a generator checkpoint: header {:?}",
                header.lines().next().unwrap_or("")
            )));
        }
        let config = Self::config_from_header(&header)?;
        for (name, shape) in config.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(GeneratorModel { config, params })
    }
}

/// Diagonal Gaussian on the tape.
#[derive(Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Diagonal Gaussian as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> GaussianParams {
        GaussianParams { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (lv / 2.0).exp() * eps
            })
            .collect()
    }

    /// −log N(x; μ, Σ) for the diagonal Gaussian.
    pub fn neg_log_density(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for ((&m, &lv), &xi) in self.mean.iter().zip(&self.log_var).zip(x) {
            let d = xi - m;
            total += 0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + d * d * (-lv).exp());
        }
        total
    }
}

/// Closed-form KL between diagonal Gaussians, summed over dimensions:
/// ½ Σ [log(σ²_p/σ²_q) + (σ²_q + (μ_q − μ_p)²)/σ²_p − 1].
pub fn kl_divergence(q: &GaussianParams, p: &GaussianParams) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .zip(p.mean.iter().zip(&p.log_var))
        .map(|((&mq, &lq), (&mp, &lp))| {
            let d = mq - mp;
            0.5 * ((lp - lq) + (lq - lp).exp() + d * d * (-lp).exp() - 1.0)
        })
        .sum()
}

/// k_i = λ·σ(c − c'_i).
pub fn context_gate(c: f64, c_prefix: f64, lambda: f64) -> f64 {
    lambda / (1.0 + (c_prefix - c).exp())
}

/// One decoder step's tape handles.
pub struct StepOut {
    pub state: LstmState,
    pub dist: Var,
    pub log_probs: Var,
    pub attention: Var,
    pub weights: Var,
    /// Scalar gate value (mean over elements for the vector gate); absent
    /// when gating is disabled.
    pub gate: Option<Var>,
}

/// Soft free-run output: per-step distributions plus the differentiable
/// coherence of the whole soft response against the context. `None` when the
/// context has no content words under the scoring embeddings.
pub struct SoftRun {
    pub steps: Vec<StepOut>,
    pub soft_coherence: Option<Var>,
}

/// A model bound to a fresh tape. In training mode every parameter is a
/// differentiable leaf; in eval mode parameters are constants and dropout is
/// inactive.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m GeneratorModel,
    vars: HashMap<String, Var>,
    training: bool,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m GeneratorModel, training: bool) -> Result<Graph<'m>> {
        let mut tape = Tape::new();
        let mut vars = HashMap::new();
        for (name, t) in model.params.iter() {
            let v = if training {
                tape.leaf(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Graph { tape, model, vars, training })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.model.config
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Collect leaf gradients for every model parameter (zeros for
    /// non-participants).
    pub fn grads(&self, g: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.model.params.iter() {
            out.insert(name, g.get_or_zeros(self.vars[name], t.shape()));
        }
        out
    }

    fn linear(&mut self, w: &str, b: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.var(w), self.var(b));
        let y = self.tape.matvec(w, x)?;
        Ok(self.tape.add(y, b)?)
    }

    fn lstm_vars(&self, prefix: &str, layers: usize, hidden: usize) -> LstmVars {
        let layers = (0..layers)
            .map(|l| LstmLayer {
                w: self.var(&format!("{prefix}.l{l}.w")),
                b: self.var(&format!("{prefix}.l{l}.b")),
            })
            .collect();
        LstmVars { layers, hidden }
    }

    pub fn embed_id(&mut self, id: u32) -> Result<Var> {
        if id as usize >= self.config().vocab_size {
            return Err(Error::Input(format!(
                "token id {id} outside vocabulary of {}",
                self.config().vocab_size
            )));
        }
        let emb = self.var("emb");
        Ok(self.tape.lookup_row(emb, id as usize)?)
    }

    /// Expected embedding of a distribution over the vocabulary.
    pub fn embed_soft(&mut self, dist: Var) -> Result<Var> {
        let emb = self.var("emb");
        Ok(self.tape.matvec_t(dist, emb)?)
    }

    /// Run the context encoder; returns per-token top states and the final
    /// top-layer state as the summary.
    pub fn encode_context<R: Rng>(
        &mut self,
        x: &[u32],
        rng: &mut R,
    ) -> Result<(Vec<Var>, Var)> {
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        let inputs: Vec<Var> = x.iter().map(|&id| self.embed_id(id)).collect::<Result<_>>()?;
        let vars = self.lstm_vars("enc", self.config().enc_layers, self.config().hidden);
        let dropout = self.config().dropout;
        let training = self.training;
        let (tops, state) = numcore::lstm_forward(
            &mut self.tape,
            &vars,
            &inputs,
            None,
            dropout,
            training,
            rng,
        )?;
        Ok((tops, state.top()))
    }

    fn cond_gaussian<R: Rng>(
        &mut self,
        prefix: &str,
        inputs: &[Var],
        rng: &mut R,
    ) -> Result<GaussianVars> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let vars = self.lstm_vars(prefix, 1, self.config().cond_hidden);
        let dropout = self.config().dropout;
        let training = self.training;
        let (_, state) = numcore::lstm_forward(
            &mut self.tape,
            &vars,
            inputs,
            None,
            dropout,
            training,
            rng,
        )?;
        let h = state.top();
        let mu = self.linear(&format!("{prefix}.mu.w"), &format!("{prefix}.mu.b"), h)?;
        let lv = self.linear(&format!("{prefix}.lv.w"), &format!("{prefix}.lv.b"), h)?;
        Ok(GaussianVars { mu, log_var: lv })
    }

    /// q(z | x, y): context and gold response concatenated with an EOS
    /// separator, encoded by the posterior RNN.
    pub fn posterior<R: Rng>(
        &mut self,
        x: &[u32],
        y: &[u32],
        rng: &mut R,
    ) -> Result<GaussianVars> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut inputs = Vec::with_capacity(x.len() + 1 + y.len());
        for &id in x {
            inputs.push(self.embed_id(id)?);
        }
        inputs.push(self.embed_id(EOS)?);
        for &id in y {
            inputs.push(self.embed_id(id)?);
        }
        self.cond_gaussian("post", &inputs, rng)
    }

    /// Posterior over a soft response: distributions are consumed through
    /// their expected embeddings.
    pub fn posterior_soft<R: Rng>(
        &mut self,
        x: &[u32],
        dists: &[Var],
        rng: &mut R,
    ) -> Result<GaussianVars> {
        if x.is_empty() || dists.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut inputs = Vec::with_capacity(x.len() + 1 + dists.len());
        for &id in x {
            inputs.push(self.embed_id(id)?);
        }
        inputs.push(self.embed_id(EOS)?);
        for &d in dists {
            inputs.push(self.embed_soft(d)?);
        }
        self.cond_gaussian("post", &inputs, rng)
    }

    /// p(z | x): context-only condition network.
    pub fn prior<R: Rng>(&mut self, x: &[u32], rng: &mut R) -> Result<GaussianVars> {
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        let inputs: Vec<Var> = x.iter().map(|&id| self.embed_id(id)).collect::<Result<_>>()?;
        self.cond_gaussian("prior", &inputs, rng)
    }

    /// Reparameterized z = μ + exp(log_var/2) ⊙ ε.
    pub fn sample_latent<R: Rng>(&mut self, g: &GaussianVars, rng: &mut R) -> Result<Var> {
        let dim = self.tape.value(g.mu).len();
        let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps = self.tape.constant(Tensor::vector(eps))?;
        let half = self.tape.scale(g.log_var, 0.5)?;
        let sd = self.tape.exp(half)?;
        let noise = self.tape.mul(sd, eps)?;
        Ok(self.tape.add(g.mu, noise)?)
    }

    /// Closed-form KL(q ∥ p) on the tape.
    pub fn kl(&mut self, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
        let dim = self.tape.value(q.mu).len() as f64;
        let ldiff = self.tape.sub(p.log_var, q.log_var)?;
        let qdp = self.tape.sub(q.log_var, p.log_var)?;
        let ratio = self.tape.exp(qdp)?;
        let mdiff = self.tape.sub(q.mu, p.mu)?;
        let m2 = self.tape.mul(mdiff, mdiff)?;
        let neg_lp = self.tape.neg(p.log_var)?;
        let inv_p = self.tape.exp(neg_lp)?;
        let quad = self.tape.mul(m2, inv_p)?;
        let s = self.tape.add(ldiff, ratio)?;
        let s = self.tape.add(s, quad)?;
        let total = self.tape.sum(s)?;
        Ok(self.tape.affine(total, 0.5, -0.5 * dim)?)
    }

    /// Read a Gaussian's current values off the tape.
    pub fn gaussian_values(&self, g: &GaussianVars) -> GaussianParams {
        GaussianParams {
            mean: self.tape.value(g.mu).data().to_vec(),
            log_var: self.tape.value(g.log_var).data().to_vec(),
        }
    }

    /// s_0 from concat(h, z, c) through one learned linear map per decoder
    /// layer; cell states start at zero. The baseline variant zeroes z and c.
    pub fn init_decoder_state(&mut self, h: Var, z: Var, c: Var) -> Result<LstmState> {
        let cfg = self.config();
        let (layers, hidden, latent) = (cfg.dec_layers, cfg.hidden, cfg.latent_dim);
        let baseline = cfg.variant == Variant::AttentionBaseline;
        let (z, c) = if baseline {
            (
                self.tape.constant(Tensor::zeros(vec![latent]))?,
                self.tape.constant(Tensor::zeros(vec![1]))?,
            )
        } else {
            (z, c)
        };
        let cat = self.tape.concat(&[h, z, c])?;
        let mut hs = Vec::with_capacity(layers);
        let mut cs = Vec::with_capacity(layers);
        for l in 0..layers {
            hs.push(self.linear(&format!("init.l{l}.w"), &format!("init.l{l}.b"), cat)?);
            cs.push(self.tape.constant(Tensor::zeros(vec![hidden]))?);
        }
        Ok(LstmState { h: hs, c: cs })
    }

    /// Dot-product attention of the decoder state over encoder states.
    pub fn attention(&mut self, s_top: Var, enc: &[Var]) -> Result<(Var, Var)> {
        let scores: Vec<Var> = enc
            .iter()
            .map(|&h| self.tape.dot(s_top, h))
            .collect::<numcore::Result<_>>()?;
        let scores = self.tape.concat(&scores)?;
        let weights = self.tape.softmax(scores)?;
        let mut a: Option<Var> = None;
        for (j, &h) in enc.iter().enumerate() {
            let wj = self.tape.slice(weights, j, 1)?;
            let term = self.tape.smul(wj, h)?;
            a = Some(match a {
                Some(acc) => self.tape.add(acc, term)?,
                None => term,
            });
        }
        Ok((a.expect("attention over empty encoder states"), weights))
    }

    /// Scalar gate k = λ·σ(c − c_prefix) on the tape.
    pub fn gate(&mut self, c: Var, c_prefix: Var) -> Result<Var> {
        let lambda = self.config().lambda;
        let d = self.tape.sub(c, c_prefix)?;
        let s = self.tape.sigmoid(d)?;
        Ok(self.tape.scale(s, lambda)?)
    }

    fn gating_active(&self) -> bool {
        match self.config().variant {
            Variant::CvaeXgate => self.config().lambda > 0.0,
            Variant::CvaeCgate => true,
            Variant::AttentionBaseline => false,
        }
    }

    /// One decoder step: attention from s_{i−1}, gate application, LSTM
    /// update, output distribution. `coherence_signal` carries (c, c'_i) for
    /// the scalar gate; it is ignored by the other variants.
    pub fn decoder_step<R: Rng>(
        &mut self,
        y_emb: Var,
        state: &LstmState,
        enc: &[Var],
        coherence_signal: Option<(Var, Var)>,
        rng: &mut R,
    ) -> Result<StepOut> {
        let (a, weights) = self.attention(state.top(), enc)?;
        let (attn_in, step_state, gate) = if !self.gating_active() {
            (a, state.clone(), None)
        } else {
            match self.config().variant {
                Variant::CvaeXgate => {
                    let (c, c_prefix) = coherence_signal.ok_or_else(|| {
                        Error::Input("xgate step without a coherence signal".into())
                    })?;
                    let k = self.gate(c, c_prefix)?;
                    let one_minus = self.tape.affine(k, -1.0, 1.0)?;
                    let attn_in = self.tape.smul(k, a)?;
                    let hs = state
                        .h
                        .iter()
                        .map(|&h| self.tape.smul(one_minus, h))
                        .collect::<numcore::Result<_>>()?;
                    (attn_in, LstmState { h: hs, c: state.c.clone() }, Some(k))
                }
                Variant::CvaeCgate => {
                    let cat = self.tape.concat(&[y_emb, state.top(), a])?;
                    let pre = self.linear("cgate.w", "cgate.b", cat)?;
                    let g = self.tape.sigmoid(pre)?;
                    let one_minus = self.tape.affine(g, -1.0, 1.0)?;
                    let attn_in = self.tape.mul(g, a)?;
                    let hs = state
                        .h
                        .iter()
                        .map(|&h| self.tape.mul(one_minus, h))
                        .collect::<numcore::Result<_>>()?;
                    let k = self.tape.mean(g)?;
                    (attn_in, LstmState { h: hs, c: state.c.clone() }, Some(k))
                }
                Variant::AttentionBaseline => unreachable!(),
            }
        };
        let x = self.tape.concat(&[y_emb, attn_in])?;
        let vars = self.lstm_vars("dec", self.config().dec_layers, self.config().hidden);
        let dropout = self.config().dropout;
        let training = self.training;
        let next = lstm_step(&mut self.tape, &vars, x, &step_state, dropout, training, rng)?;
        let feat_in = self.tape.concat(&[next.top(), a])?;
        let pre = self.linear("att.w", "att.b", feat_in)?;
        let feat = self.tape.tanh(pre)?;
        let logits = self.linear("out.w", "out.b", feat)?;
        let dist = self.tape.softmax(logits)?;
        let log_probs = self.tape.log_softmax(logits)?;
        Ok(StepOut { state: next, dist, log_probs, attention: a, weights, gate })
    }

    /// Prefix coherence c'_i over the teacher-forced gold prefix; 0 for the
    /// empty or undefined prefix.
    fn gold_prefix_coherence(
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

    /// Teacher-forced pass: returns the per-step outputs and Σ log p(y_i | ·).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_teacher_forced<R: Rng>(
        &mut self,
        x: &[u32],
        y: &[u32],
        z: Var,
        c: Var,
        glv: &EmbeddingMatrix,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<(Vec<StepOut>, Var)> {
        if y.is_empty() {
            return Err(Error::EmptySequence);
        }
        if *y.last().unwrap() != EOS {
            return Err(Error::Input("gold response must end with <eos>".into()));
        }
        let (enc, summary) = self.encode_context(x, rng)?;
        let mut state = self.init_decoder_state(summary, z, c)?;
        let scalar_gate =
            self.config().variant == Variant::CvaeXgate && self.config().lambda > 0.0;
        let mut steps = Vec::with_capacity(y.len());
        let mut loglik: Option<Var> = None;
        for (i, &target) in y.iter().enumerate() {
            let prev = if i == 0 { BOS } else { y[i - 1] };
            let y_emb = self.embed_id(prev)?;
            let signal = if scalar_gate {
                let cp = Self::gold_prefix_coherence(x, &y[..i], glv, vocab);
                let cp = self.tape.scalar_const(cp)?;
                Some((c, cp))
            } else {
                None
            };
            let step = self.decoder_step(y_emb, &state, &enc, signal, rng)?;
            let lp = self.tape.slice(step.log_probs, target as usize, 1)?;
            loglik = Some(match loglik {
                Some(acc) => self.tape.add(acc, lp)?,
                None => lp,
            });
            state = step.state.clone();
            steps.push(step);
        }
        Ok((steps, loglik.unwrap()))
    }

    /// Soft free-run G̃: each step feeds back the expected embedding of its
    /// own output distribution; stops at max_len or when EOS mass > 0.5.
    /// Prefix coherence for the gate is computed on the tape from the soft
    /// prefix, so it stays differentiable.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_soft_freerun<R: Rng>(
        &mut self,
        x: &[u32],
        z: Var,
        c: Var,
        max_len: usize,
        glv: &EmbeddingMatrix,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<SoftRun> {
        if max_len < 1 {
            return Err(Error::Input("max_len must be >= 1".into()));
        }
        let (enc, summary) = self.encode_context(x, rng)?;
        let mut state = self.init_decoder_state(summary, z, c)?;
        let scalar_gate =
            self.config().variant == Variant::CvaeXgate && self.config().lambda > 0.0;

        // Hard context side of the coherence, fixed for the whole run.
        let ctx = sentence_embedding(x, glv, vocab).ok().and_then(|e| {
            let n = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            (e.weight_mass > 0.0 && n > 0.0).then_some((e.vector, n))
        });
        let zeroed = glv.with_zeroed_specials();
        let glv_const = self.tape.constant(Tensor::matrix(
            zeroed.rows(),
            zeroed.dim(),
            zeroed.data().to_vec(),
        )?)?;
        let ctx_const = match &ctx {
            Some((v, _)) => Some(self.tape.constant(Tensor::vector(v.clone()))?),
            None => None,
        };
        let mut resp_sum = self.tape.constant(Tensor::zeros(vec![glv.dim()]))?;

        // cosine(context, running soft response sum), guarded near zero
        let prefix_cos = |tape: &mut Tape, r: Var| -> Result<Var> {
            let (uc, un) = match (&ctx_const, &ctx) {
                (Some(uc), Some((_, n))) => (*uc, *n),
                _ => return Ok(tape.scalar_const(0.0)?),
            };
            let num = tape.dot(uc, r)?;
            let rr = tape.dot(r, r)?;
            let rr = tape.affine(rr, 1.0, 1e-12)?;
            let rn = tape.sqrt(rr)?;
            let denom = tape.scale(rn, un)?;
            Ok(tape.div(num, denom)?)
        };

        let mut steps: Vec<StepOut> = Vec::new();
        let mut prev_emb = self.embed_id(BOS)?;
        for i in 0..max_len {
            let signal = if scalar_gate {
                let cp = if i == 0 {
                    self.tape.scalar_const(0.0)?
                } else {
                    prefix_cos(&mut self.tape, resp_sum)?
                };
                Some((c, cp))
            } else {
                None
            };
            let step = self.decoder_step(prev_emb, &state, &enc, signal, rng)?;
            let dist = step.dist;
            state = step.state.clone();
            let v = self.tape.matvec_t(dist, glv_const)?;
            resp_sum = self.tape.add(resp_sum, v)?;
            prev_emb = self.embed_soft(dist)?;
            let eos_mass = self.tape.value(dist).data()[EOS as usize];
            steps.push(step);
            if eos_mass > 0.5 {
                break;
            }
        }
        let soft_coherence = match &ctx {
            Some(_) => Some(prefix_cos(&mut self.tape, resp_sum)?),
            None => None,
        };
        Ok(SoftRun { steps, soft_coherence })
    }
}
