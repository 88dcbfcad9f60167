//! Single command-line entry point for the whole pipeline: embedding
//! training, corpus scoring/filtering/splitting, generator training,
//! decoding, and evaluation.
//!
//! Artifacts are written atomically (temp file + rename) and carry a `#%`
//! header line echoing the command and its effective settings. Progress and
//! statistics go to standard error as `key=value` lines; errors exit nonzero
//! with a single `error <Class>: <message>` line.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use cohgen::corpus::{
    fit_coherence_distribution, load_pairs, split_corpus, synth_corpus, write_pairs, PairReader,
};
use cohgen::cooccur::count_cooccurrences;
use cohgen::evaluation::{evaluate, sample_indices};
use cohgen::glove::{
    load_embeddings, save_embeddings, train_glove, EmbeddingMatrix, GloveConfig,
};
use cohgen::inference::{
    derive_seed, generate_batch, CMode, DecodeMode, GenerationRequest,
};
use cohgen::model::{GeneratorConfig, GeneratorModel, Variant};
use cohgen::training::{composite_grad_check, train_with_progress, TrainingConfig};
use cohgen::vocab::{default_stopwords, load_stopwords, Vocabulary};
use cohgen::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cohgen",
    version,
    about = "Coherence-conditioned dialogue response generation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train GloVe embeddings on a dialogue corpus
    TrainEmbeddings(TrainEmbeddingsArgs),
    /// Attach a coherence score to every pair of a corpus
    Score(ScoreArgs),
    /// Keep only pairs at or above a coherence threshold
    Filter(FilterArgs),
    /// Seeded disjoint train/dev/test split
    Split(SplitArgs),
    /// Generate a synthetic topical corpus
    Synth(SynthArgs),
    /// Train the response generator
    Train(TrainArgs),
    /// Decode responses for every context of a corpus
    Generate(GenerateArgs),
    /// Score generated responses against a reference corpus
    Evaluate(EvaluateArgs),
    /// Verify composite-objective gradients by finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainEmbeddingsArgs {
    /// Corpus TSV (context turns separated by "##", tab, response)
    #[arg(long)]
    corpus: PathBuf,
    /// Output embeddings file (one "token v1 .. vd" line per token)
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Co-occurrence window (turns are never crossed)
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    x_max: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    max_vocab: Option<usize>,
    /// Stop-word list, one word per line (defaults to the built-in list)
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Parallel worker threads (default: available cores)
    #[arg(long)]
    workers: Option<usize>,
    /// Pairs held in memory at once
    #[arg(long, default_value_t = 4096)]
    chunk_size: usize,
    /// Fail on the first malformed line instead of skipping it
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct FilterArgs {
    /// Scored corpus TSV (third column = coherence)
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep pairs with coherence >= this value; when absent, a normal fit
    /// over the corpus sets it to mean + 2 standard deviations
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output files are <prefix>.train.tsv / .dev.tsv / .test.tsv
    #[arg(long)]
    out_prefix: String,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    dev: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    topics: usize,
    #[arg(long, default_value_t = 250)]
    pairs_per_topic: usize,
    /// Probability that a response comes from a different topic
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Output model checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// xgate, cgate, or attention
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    cond_hidden: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Context-gate amplitude
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_z: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kl_anneal_steps: Option<usize>,
    #[arg(long)]
    kl_weight_max: Option<f64>,
    #[arg(long)]
    max_freerun_len: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Directory for per-epoch checkpoints
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Corpus TSV providing contexts (and gold responses for --oracle)
    #[arg(long)]
    corpus: PathBuf,
    /// One generated response per input pair, token-separated
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Preset coherence code in [-1, 1]
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Use each pair's true context-response coherence as the code
    #[arg(long)]
    oracle: bool,
    /// "greedy" or "beam:WIDTH"
    #[arg(long, default_value = "greedy")]
    decode: String,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    /// Use the prior mean instead of a sampled latent
    #[arg(long)]
    mean_z: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference corpus TSV (contexts + gold responses)
    #[arg(long)]
    corpus: PathBuf,
    /// Generated responses, one line per corpus pair
    #[arg(long)]
    hypotheses: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Evaluate a seeded subset of this size instead of the full set
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 9)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error {}: {e}", e.class());
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainEmbeddings(a) => cmd_train_embeddings(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Filter(a) => cmd_filter(a),
        Cmd::Split(a) => cmd_split(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    }
}

/// Relative paths resolve against `COHGEN_DATA_DIR` when it is set.
fn resolve(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("COHGEN_DATA_DIR") {
        Some(dir) => PathBuf::from(dir).join(p),
        None => p.to_path_buf(),
    }
}

/// Flat `key=value` file, one entry per line, `#` comments. Flags override
/// entries.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(resolve(path))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    i + 1
                )))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(s) => s
                .parse()
                .map_err(|e| Error::Config(format!("bad value for {key}: {e}"))),
            None => Ok(default),
        }
    }
}

fn atomic_write(
    path: &Path,
    f: impl FnOnce(&mut (dyn Write + Send)) -> Result<()>,
) -> Result<()> {
    let path = resolve(path);
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_header(w: &mut dyn Write, cmd: &str, kvs: &[(&str, String)]) -> Result<()> {
    write!(w, "#% cohgen {cmd}")?;
    for (k, v) in kvs {
        write!(w, " {k}={v}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn load_emb(
    path: &Path,
    stopwords: Option<&Path>,
) -> Result<(EmbeddingMatrix, Vocabulary)> {
    let (m, mut vocab) = load_embeddings(&resolve(path))?;
    let sw = match stopwords {
        Some(p) => load_stopwords(&resolve(p))?,
        None => default_stopwords(),
    };
    vocab.apply_stopwords(&sw);
    Ok((m, vocab))
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers < 1 {
        return Err(Error::Input("workers must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let pairs = synth_corpus(a.topics, a.pairs_per_topic, a.noise, a.seed)?;
    atomic_write(&a.out, |w| {
        write_header(
            w,
            "synth",
            &[
                ("topics", a.topics.to_string()),
                ("pairs-per-topic", a.pairs_per_topic.to_string()),
                ("noise", a.noise.to_string()),
                ("seed", a.seed.to_string()),
            ],
        )?;
        write_pairs(w, &pairs)
    })?;
    eprintln!("stage=synth pairs={} out={}", pairs.len(), a.out.display());
    Ok(())
}

fn cmd_train_embeddings(a: TrainEmbeddingsArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let glove = GloveConfig {
        dim: cfg.pick(a.dim, "dim", 100)?,
        epochs: cfg.pick(a.epochs, "epochs", 30)?,
        x_max: cfg.pick(a.x_max, "x-max", 100.0)?,
        alpha: cfg.pick(a.alpha, "alpha", 0.75)?,
        lr: cfg.pick(a.lr, "lr", 0.05)?,
        seed: cfg.pick(a.seed, "seed", 0)?,
    };
    let window = cfg.pick(a.window, "window", 10)?;
    let min_count = cfg.pick(a.min_count, "min-count", 1)?;
    let max_vocab = cfg.pick(a.max_vocab, "max-vocab", 25_000)?;
    let sw = match &a.stopwords {
        Some(p) => load_stopwords(&resolve(p))?,
        None => default_stopwords(),
    };

    let mut sentences: Vec<Vec<String>> = Vec::new();
    for pair in PairReader::open(&resolve(&a.corpus), false)? {
        let pair = pair?;
        for turn in &pair.context_turns {
            sentences.push(turn.clone());
        }
        sentences.push(pair.response.clone());
    }
    let vocab = Vocabulary::build(
        sentences.iter().flatten(),
        min_count,
        max_vocab,
        &sw,
    )?;
    let table = count_cooccurrences(&sentences, &vocab, window)?;
    eprintln!(
        "stage=train-embeddings vocab={} cooccurrences={} dim={} epochs={}",
        vocab.size(),
        table.len(),
        glove.dim,
        glove.epochs
    );
    let emb = train_glove(&table, vocab.size(), &glove)?;

    let out = resolve(&a.out);
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let tmp = tempfile::NamedTempFile::new_in(&parent)?;
    save_embeddings(&emb, &vocab, tmp.path())?;
    tmp.persist(&out).map_err(|e| Error::Io(e.error))?;
    eprintln!("stage=train-embeddings out={}", out.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let (emb, vocab) = load_emb(&a.embeddings, a.stopwords.as_deref())?;
    let workers = a.workers.unwrap_or_else(default_workers);
    let pool = build_pool(workers)?;
    let reader = PairReader::open(&resolve(&a.corpus), a.strict)?;
    let mut stats = None;
    atomic_write(&a.out, |w| {
        write_header(
            w,
            "score",
            &[
                ("corpus", a.corpus.display().to_string()),
                ("embeddings", a.embeddings.display().to_string()),
                ("workers", workers.to_string()),
            ],
        )?;
        stats = Some(pool.install(|| {
            cohgen::corpus::score_stream(reader, &emb, &vocab, a.chunk_size, |p| {
                writeln!(w, "{}", p.to_tsv())?;
                Ok(())
            })
        })?);
        Ok(())
    })?;
    let s = stats.unwrap();
    eprintln!(
        "stage=score scored={} dropped_undefined={} max_buffered={} out={}",
        s.scored,
        s.dropped_undefined,
        s.max_buffered,
        a.out.display()
    );
    Ok(())
}

fn cmd_filter(a: FilterArgs) -> Result<()> {
    let corpus = resolve(&a.corpus);
    let threshold = match a.threshold {
        Some(t) => t,
        None => {
            let mut scores = Vec::new();
            for pair in PairReader::open(&corpus, false)? {
                scores.push(pair?.coherence.ok_or(Error::MissingScore)?);
            }
            let dist = fit_coherence_distribution(&scores)?;
            eprintln!(
                "stage=filter mu={:.6} sigma={:.6} cutoff={:.6}",
                dist.mu, dist.sigma, dist.cutoff
            );
            dist.cutoff
        }
    };
    let (mut kept, mut dropped) = (0usize, 0usize);
    atomic_write(&a.out, |w| {
        write_header(
            w,
            "filter",
            &[
                ("corpus", a.corpus.display().to_string()),
                ("threshold", threshold.to_string()),
            ],
        )?;
        for pair in PairReader::open(&corpus, false)? {
            let pair = pair?;
            if pair.coherence.ok_or(Error::MissingScore)? >= threshold {
                writeln!(w, "{}", pair.to_tsv())?;
                kept += 1;
            } else {
                dropped += 1;
            }
        }
        Ok(())
    })?;
    eprintln!(
        "stage=filter threshold={threshold:.6} kept={kept} dropped={dropped} out={}",
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let pairs = load_pairs(&resolve(&a.corpus))?;
    let (train, dev, test) = split_corpus(&pairs, (a.train, a.dev, a.test), a.seed)?;
    for (name, subset) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let out = PathBuf::from(format!("{}.{name}.tsv", a.out_prefix));
        atomic_write(&out, |w| {
            write_header(
                w,
                "split",
                &[
                    ("corpus", a.corpus.display().to_string()),
                    ("subset", name.to_string()),
                    ("seed", a.seed.to_string()),
                ],
            )?;
            write_pairs(w, subset)
        })?;
        eprintln!("stage=split subset={name} pairs={} out={}", subset.len(), out.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = FileConfig::load(a.config.as_deref())?;
    let (glv, vocab) = load_emb(&a.embeddings, a.stopwords.as_deref())?;
    let d = GeneratorConfig::default();
    let model_cfg = GeneratorConfig {
        vocab_size: vocab.size(),
        emb_dim: cfg.pick(a.emb_dim, "emb-dim", d.emb_dim)?,
        enc_layers: cfg.pick(a.enc_layers, "enc-layers", d.enc_layers)?,
        dec_layers: cfg.pick(a.dec_layers, "dec-layers", d.dec_layers)?,
        hidden: cfg.pick(a.hidden, "hidden", d.hidden)?,
        latent_dim: cfg.pick(a.latent_dim, "latent-dim", d.latent_dim)?,
        cond_hidden: cfg.pick(a.cond_hidden, "cond-hidden", d.cond_hidden)?,
        dropout: cfg.pick(a.dropout, "dropout", d.dropout)?,
        lambda: cfg.pick(a.lambda, "lambda", d.lambda)?,
        variant: cfg.pick(a.variant, "variant", d.variant)?,
    };
    let t = TrainingConfig::default();
    let train_cfg = TrainingConfig {
        lambda_c: cfg.pick(a.lambda_c, "lambda-c", t.lambda_c)?,
        lambda_z: cfg.pick(a.lambda_z, "lambda-z", t.lambda_z)?,
        batch_size: cfg.pick(a.batch_size, "batch-size", t.batch_size)?,
        epochs: cfg.pick(a.epochs, "epochs", t.epochs)?,
        lr: cfg.pick(a.lr, "lr", t.lr)?,
        kl_anneal_steps: cfg.pick(a.kl_anneal_steps, "kl-anneal-steps", t.kl_anneal_steps)?,
        kl_weight_max: cfg.pick(a.kl_weight_max, "kl-weight-max", t.kl_weight_max)?,
        seed: cfg.pick(a.seed, "seed", t.seed)?,
        max_freerun_len: cfg.pick(a.max_freerun_len, "max-freerun-len", t.max_freerun_len)?,
        clip_norm: cfg.pick(a.clip_norm, "clip-norm", t.clip_norm)?,
        checkpoint_dir: a
            .checkpoint_dir
            .clone()
            .or_else(|| cfg.0.get("checkpoint-dir").map(PathBuf::from))
            .map(|p| resolve(&p)),
    };
    let pairs = load_pairs(&resolve(&a.corpus))?;
    eprintln!(
        "stage=train pairs={} vocab={} variant={} epochs={} batch-size={} seed={}",
        pairs.len(),
        vocab.size(),
        model_cfg.variant.name(),
        train_cfg.epochs,
        train_cfg.batch_size,
        train_cfg.seed
    );
    let mut model = GeneratorModel::init(model_cfg, train_cfg.seed)?;
    train_with_progress(&mut model, &pairs, &train_cfg, &glv, &vocab, |epoch, r| {
        eprintln!(
            "stage=train epoch={epoch} step={} total={:.6} rec={:.6} kl={:.6} kl-weight={:.4} lc={:.6} lz={:.6}",
            r.step, r.total, r.reconstruction, r.kl, r.kl_weight, r.l_c, r.l_z
        );
    })?;

    let out = resolve(&a.out);
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let tmp = tempfile::NamedTempFile::new_in(&parent)?;
    model.save(tmp.path())?;
    tmp.persist(&out).map_err(|e| Error::Io(e.error))?;
    eprintln!("stage=train out={}", out.display());
    Ok(())
}

fn parse_decode(s: &str) -> Result<DecodeMode> {
    if s == "greedy" {
        return Ok(DecodeMode::Greedy);
    }
    if let Some(width) = s.strip_prefix("beam:") {
        let width: usize = width
            .parse()
            .map_err(|e| Error::Input(format!("bad beam width {width:?}: {e}")))?;
        return Ok(DecodeMode::Beam(width));
    }
    Err(Error::Input(format!(
        "unknown decode mode {s:?} (expected greedy or beam:WIDTH)"
    )))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let (glv, vocab) = load_emb(&a.embeddings, a.stopwords.as_deref())?;
    let model = GeneratorModel::load(&resolve(&a.model))?;
    if model.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab size {} != embeddings vocab size {}",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    let decode = parse_decode(&a.decode)?;
    let pairs = load_pairs(&resolve(&a.corpus))?;
    let requests: Vec<GenerationRequest> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| GenerationRequest {
            context: p.context_tokens(),
            c_mode: if a.oracle {
                CMode::Oracle(p.response.clone())
            } else {
                CMode::Preset(a.c)
            },
            decode,
            max_len: a.max_len,
            seed: derive_seed(a.seed, i as u64),
            mean_z: a.mean_z,
        })
        .collect();
    let workers = a.workers.unwrap_or_else(default_workers);
    let results = generate_batch(&model, &requests, &glv, &vocab, workers)?;

    let (mut failed, mut eos, mut coh_sum, mut coh_n) = (0usize, 0usize, 0.0, 0usize);
    atomic_write(&a.out, |w| {
        write_header(
            w,
            "generate",
            &[
                ("model", a.model.display().to_string()),
                ("corpus", a.corpus.display().to_string()),
                (
                    "c",
                    if a.oracle { "oracle".into() } else { a.c.to_string() },
                ),
                ("decode", a.decode.clone()),
                ("max-len", a.max_len.to_string()),
                ("mean-z", a.mean_z.to_string()),
                ("seed", a.seed.to_string()),
            ],
        )?;
        for r in &results {
            match r {
                Ok(g) => {
                    writeln!(w, "{}", g.tokens.join(" "))?;
                    if g.ended_with_eos {
                        eos += 1;
                    }
                    if let Some(c) = g.coherence {
                        coh_sum += c;
                        coh_n += 1;
                    }
                }
                Err(_) => {
                    writeln!(w)?;
                    failed += 1;
                }
            }
        }
        Ok(())
    })?;
    if failed == results.len() {
        return Err(Error::Input("every generation request failed".into()));
    }
    let mean_coh = if coh_n > 0 { coh_sum / coh_n as f64 } else { f64::NAN };
    eprintln!(
        "stage=generate generated={} failed={failed} eos-rate={:.3} mean-coherence={mean_coh:.4} out={}",
        results.len() - failed,
        eos as f64 / (results.len() - failed) as f64,
        a.out.display()
    );
    Ok(())
}

fn read_hypotheses(path: &Path) -> Result<Vec<Vec<String>>> {
    let rdr = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in rdr.lines() {
        let line = line?;
        if line.starts_with("#%") {
            continue;
        }
        out.push(line.split_whitespace().map(str::to_string).collect());
    }
    Ok(out)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (glv, vocab) = load_emb(&a.embeddings, a.stopwords.as_deref())?;
    let pairs = load_pairs(&resolve(&a.corpus))?;
    let hyps = read_hypotheses(&resolve(&a.hypotheses))?;
    if hyps.is_empty() {
        return Err(Error::Input("empty hypotheses file".into()));
    }
    if hyps.len() != pairs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} corpus pairs",
            hyps.len(),
            pairs.len()
        )));
    }
    let indices: Vec<usize> = match a.sample {
        Some(n) => sample_indices(hyps.len(), n, a.seed),
        None => (0..hyps.len()).collect(),
    };
    let contexts: Vec<Vec<String>> = indices.iter().map(|&i| pairs[i].context_tokens()).collect();
    let references: Vec<Vec<String>> = indices.iter().map(|&i| pairs[i].response.clone()).collect();
    let hypotheses: Vec<Vec<String>> = indices.iter().map(|&i| hyps[i].clone()).collect();
    let report = evaluate(&contexts, &hypotheses, &references, &glv, &vocab)?;
    print!("{}", report.to_table());
    print!("{}", report.to_kv());
    if let Some(out) = &a.out {
        atomic_write(out, |w| {
            write_header(
                w,
                "evaluate",
                &[
                    ("corpus", a.corpus.display().to_string()),
                    ("hypotheses", a.hypotheses.display().to_string()),
                    ("n", report.n_items.to_string()),
                ],
            )?;
            write!(w, "{}", report.to_kv())?;
            Ok(())
        })?;
    }
    eprintln!(
        "stage=evaluate n={} coh-skipped={}",
        report.n_items, report.coh_skipped
    );
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let words: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(words.iter(), 1, 20, &Default::default())?;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(a.seed);
    let mut glv = EmbeddingMatrix::zeros(vocab.size(), 5);
    for id in 4..vocab.size() as u32 {
        for v in glv.row_mut(id) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let pair = cohgen::corpus::parse_pair_line("w0 w1 ## w2 ## w3\tw4 w5")
        .map_err(Error::Input)?;
    let mut model = GeneratorModel::init(GeneratorConfig::micro(), a.seed)?;
    let cfg = TrainingConfig {
        kl_anneal_steps: 0,
        max_freerun_len: 6,
        seed: a.seed,
        ..Default::default()
    };
    let started = std::time::Instant::now();
    let err = composite_grad_check(&mut model, &pair, &cfg, &glv, &vocab, a.eps)?;
    let status = if err < a.tolerance { "ok" } else { "failed" };
    println!(
        "max-rel-err={err:.3e} tolerance={:.1e} params={} elapsed-s={:.1} status={status}",
        a.tolerance,
        model.params.num_elements(),
        started.elapsed().as_secs_f64()
    );
    if err >= a.tolerance {
        return Err(Error::Config(format!(
            "gradient check failed: max relative error {err:.3e} >= {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}
