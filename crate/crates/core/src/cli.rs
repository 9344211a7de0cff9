//! Command-line entry point: reproducible pretrain/train/generate/evaluate/
//! gradcheck runs over JSON-lines dialogue corpora. Every run claims its
//! output directory with a lock file, writes its artifacts there, and
//! finishes with a manifest pinning the resolved configuration and seed, so
//! any artifact can be regenerated bit for bit. Input files are never
//! written to.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    collect_meta_labels, detokenize, encode_pairs, load_corpus, load_embeddings, token_streams,
    DialoguePair, Vocabulary,
};
use crate::evaluation::{self, DenseVectors, Generation, WordVectors};
use crate::model::{AnyModel, Example, LatentSource, ModelConfig, Variant};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{grad_check, ParamStore};
use crate::training::{self, TrainConfig};
use crate::{checkpoint, Error, Result};

// ── Arguments ────────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "varformer",
    version,
    about = "Variational transformer dialogue models: pretrain, fine-tune, decode, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the baseline transformer with teacher-forced MLE.
    Pretrain(PretrainArgs),
    /// Warm-start a variational model (gvt/svt) from a pretrained baseline.
    Train(TrainArgs),
    /// Greedy-decode responses for every context in a corpus.
    Generate(GenerateArgs),
    /// Decode plus automatic metrics; writes report and generations files.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient audit of all three variants.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus, JSON lines: {"context": [...], "response": "...", "meta": ...}.
    #[arg(long)]
    pub data: PathBuf,
    /// Existing vocabulary; omitted = built from the data, saved to OUT/vocab.txt.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Pretrained word vectors ("token v1 .. vD") to initialize the token table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory for checkpoint, run log, and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer step budget (overrides the config file).
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary written by pretrain.
    #[arg(long)]
    pub vocab: PathBuf,
    /// gvt or svt (the baseline is trained by `pretrain`).
    #[arg(long)]
    pub variant: Variant,
    /// Pretrained baseline checkpoint to warm-start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Cross-checked against the checkpoint's variant.
    #[arg(long)]
    pub variant: Variant,
    /// Trained checkpoint to decode with.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent source for the variational variants.
    #[arg(long, value_enum, default_value_t = LatentChoice::Sample)]
    pub latent: LatentChoice,
    /// Seeded decodes per context.
    #[arg(long, default_value_t = 1)]
    pub num_samples: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Cross-checked against the checkpoint's variant.
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub init: PathBuf,
    /// Word vectors for the similarity metric; omitted = the model's own
    /// token table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LatentChoice {
    /// Sample the prior with a per-decode derived seed.
    Sample,
    /// Use the prior mean (deterministic).
    Mean,
}

impl LatentChoice {
    fn name(self) -> &'static str {
        match self {
            LatentChoice::Sample => "sample",
            LatentChoice::Mean => "mean",
        }
    }
}

// ── Output directory ─────────────────────────────────────────────────

/// Claimed output directory. The `.lock` marker blocks concurrent writers
/// and is removed when the run finishes (even on error).
pub struct OutDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn claim(path: &Path) -> Result<OutDir> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(OutDir { path: path.to_path_buf(), lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::OutDir {
                path: path.to_path_buf(),
                message: "locked by another run (remove .lock if that run is gone)".into(),
            }),
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

// ── Manifest ─────────────────────────────────────────────────────────

/// Written last, so its presence marks a complete run. Holds everything
/// needed to regenerate the artifacts bit for bit (no timestamps).
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: String,
    seed: u64,
    model: Option<&'a ModelConfig>,
    train: Option<&'a TrainConfig>,
    min_freq: Option<usize>,
    latent: Option<&'static str>,
    num_samples: Option<usize>,
    inputs: BTreeMap<&'static str, String>,
}

fn version_string() -> String {
    format!("varformer-v{}", env!("CARGO_PKG_VERSION"))
}

fn write_manifest(out: &OutDir, manifest: &Manifest) -> Result<()> {
    let path = out.file("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn input_paths(entries: &[(&'static str, Option<&Path>)]) -> BTreeMap<&'static str, String> {
    entries
        .iter()
        .filter_map(|(k, v)| v.map(|p| (*k, p.display().to_string())))
        .collect()
}

// ── Shared plumbing ──────────────────────────────────────────────────

fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    max_steps: Option<usize>,
) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = path {
        rc.apply_file(p)?;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(m) = max_steps {
        rc.train.max_steps = m;
    }
    Ok(rc)
}

fn load_nonempty_corpus(path: &Path) -> Result<Vec<DialoguePair>> {
    let pairs = load_corpus(path)?;
    if pairs.is_empty() {
        return Err(Error::corpus(path, "no usable examples"));
    }
    Ok(pairs)
}

fn encode_for_model(
    pairs: &[DialoguePair],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Vec<Example> {
    let (examples, report) = encode_pairs(pairs, vocab, &cfg.meta_labels, cfg.max_len);
    if report.truncated_contexts + report.truncated_responses > 0 {
        log::info!(
            "truncated {} contexts and {} responses to max_len {}",
            report.truncated_contexts,
            report.truncated_responses,
            cfg.max_len
        );
    }
    examples
}

/// Deterministic holdout: ~10% of examples (at least 1) become validation.
/// A 1-example corpus validates on its own training set.
fn train_val_split(mut examples: Vec<Example>, seed: u64) -> (Vec<Example>, Vec<Example>) {
    use rand::seq::SliceRandom;
    if examples.len() < 2 {
        return (examples.clone(), examples);
    }
    examples.shuffle(&mut crate::rng::rng_for(seed, Stream::Validation, 0));
    let held = (examples.len() / 10).max(1);
    let val = examples.split_off(examples.len() - held);
    (examples, val)
}

fn load_sized_vocab(path: &Path, expected: usize) -> Result<Vocabulary> {
    let vocab = Vocabulary::load(path)?;
    if vocab.len() != expected {
        return Err(Error::Vocab(format!(
            "{} has {} tokens but the checkpoint was built with {expected}",
            path.display(),
            vocab.len()
        )));
    }
    Ok(vocab)
}

fn check_variant(cfg: &ModelConfig, requested: Variant, init: &Path) -> Result<()> {
    if cfg.variant != requested {
        return Err(Error::Config(format!(
            "--variant {requested} does not match checkpoint {} (holds {})",
            init.display(),
            cfg.variant
        )));
    }
    Ok(())
}

/// First data row of a word-vector file fixes the dimension.
fn sniff_embedding_dim(path: &Path) -> Result<usize> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields = line.split_whitespace().count();
        if fields >= 2 {
            return Ok(fields - 1);
        }
    }
    Err(Error::Embeddings {
        path: path.to_path_buf(),
        message: "no vector rows found".into(),
    })
}

// ── Subcommands ──────────────────────────────────────────────────────

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let out = OutDir::claim(&a.out)?;
    let mut rc = resolve_config(a.config.as_deref(), a.seed, a.max_steps)?;

    let pairs = load_nonempty_corpus(&a.data)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let v = Vocabulary::build(token_streams(&pairs), rc.min_freq);
            v.save(&out.file("vocab.txt"))?;
            v
        }
    };

    rc.model.variant = Variant::Baseline;
    rc.model.vocab_size = vocab.len();
    rc.model.meta_labels = collect_meta_labels(&pairs);
    rc.validate()?;

    let examples = encode_for_model(&pairs, &vocab, &rc.model);
    let (train_set, val_set) = train_val_split(examples, rc.train.seed);

    let mut store: ParamStore<f64> = ParamStore::new();
    let model = AnyModel::build(&mut store, &rc.model, rc.train.seed);
    if let Some(embp) = &a.embeddings {
        let loaded = load_embeddings(embp, &vocab, rc.model.d_model, rc.train.seed)?;
        let id = store.lookup("embeddings.token").expect("token table registered");
        store.get_mut(id).data.copy_from_slice(&loaded.matrix);
        log::info!(
            "embeddings: {} of {} tokens found in {}",
            loaded.hits.iter().filter(|h| **h).count(),
            vocab.len(),
            embp.display()
        );
    }

    let outcome =
        training::train(&mut store, &model, &train_set, &val_set, &rc.train, &out.file("model.ckpt"), 0)?;
    outcome.log.save(&out.file("runlog.csv"))?;
    write_manifest(
        &out,
        &Manifest {
            command: "pretrain",
            version: version_string(),
            seed: rc.train.seed,
            model: Some(&rc.model),
            train: Some(&rc.train),
            min_freq: Some(rc.min_freq),
            latent: None,
            num_samples: None,
            inputs: input_paths(&[
                ("config", a.config.as_deref()),
                ("data", Some(&a.data)),
                ("vocab", a.vocab.as_deref()),
                ("embeddings", a.embeddings.as_deref()),
            ]),
        },
    )?;
    println!(
        "pretrain: {} steps ({} train / {} val examples), best step {} (metric {:.4}); artifacts in {}",
        outcome.steps_run,
        train_set.len(),
        val_set.len(),
        outcome.best_step,
        outcome.best_metric,
        out.path.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    if a.variant == Variant::Baseline {
        return Err(Error::Config(
            "'train' fine-tunes a variational model; use 'pretrain' for the baseline".into(),
        ));
    }
    let init = a.init.as_ref().ok_or_else(|| {
        Error::Config(
            "train requires --init with a pretrained baseline checkpoint; run 'pretrain' first"
                .into(),
        )
    })?;

    let out = OutDir::claim(&a.out)?;
    let rc = resolve_config(a.config.as_deref(), a.seed, a.max_steps)?;
    let base = checkpoint::load::<f64>(init)?;

    // Architecture is pinned by the pretrained weights; the config file may
    // adjust only the latent head. Conflicting architecture keys are fatal.
    let mut mcfg = base.config.clone();
    mcfg.variant = a.variant;
    for (key, file_value, ckpt_value) in [
        ("n_layers", rc.model.n_layers, base.config.n_layers),
        ("d_model", rc.model.d_model, base.config.d_model),
        ("n_heads", rc.model.n_heads, base.config.n_heads),
        ("d_head", rc.model.d_head, base.config.d_head),
        ("mlp_hidden", rc.model.mlp_hidden, base.config.mlp_hidden),
        ("max_len", rc.model.max_len, base.config.max_len),
    ] {
        if rc.was_set(key) && file_value != ckpt_value {
            return Err(Error::Config(format!(
                "config sets {key} = {file_value} but the checkpoint was pretrained with {ckpt_value}"
            )));
        }
    }
    if rc.was_set("latent_dim") {
        mcfg.latent_dim = rc.model.latent_dim;
    }
    if rc.was_set("log_var_clamp") {
        mcfg.log_var_clamp = rc.model.log_var_clamp;
    }
    if rc.was_set("use_aux_loss") {
        mcfg.use_aux_loss = rc.model.use_aux_loss;
    }
    mcfg.validate()?;

    let vocab = load_sized_vocab(&a.vocab, mcfg.vocab_size)?;
    let pairs = load_nonempty_corpus(&a.data)?;
    let examples = encode_for_model(&pairs, &vocab, &mcfg);
    let (train_set, val_set) = train_val_split(examples, rc.train.seed);

    let mut store: ParamStore<f64> = ParamStore::new();
    let model = AnyModel::build(&mut store, &mcfg, rc.train.seed);
    let ws = training::warm_start(&mut store, &base.store)?;
    log::info!("{}", ws.summary());

    let outcome =
        training::train(&mut store, &model, &train_set, &val_set, &rc.train, &out.file("model.ckpt"), 0)?;
    outcome.log.save(&out.file("runlog.csv"))?;
    write_manifest(
        &out,
        &Manifest {
            command: "train",
            version: version_string(),
            seed: rc.train.seed,
            model: Some(&mcfg),
            train: Some(&rc.train),
            min_freq: None,
            latent: None,
            num_samples: None,
            inputs: input_paths(&[
                ("config", a.config.as_deref()),
                ("data", Some(&a.data)),
                ("vocab", Some(&a.vocab)),
                ("init", Some(init)),
            ]),
        },
    )?;
    println!(
        "train {}: {} steps ({} warm-started tensors, {} fresh), best step {} (metric {:.4}); artifacts in {}",
        mcfg.variant,
        outcome.steps_run,
        ws.copied.len(),
        ws.fresh.len(),
        outcome.best_step,
        outcome.best_metric,
        out.path.display()
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.num_samples == 0 {
        return Err(Error::Config("--num-samples must be at least 1".into()));
    }
    let out = OutDir::claim(&a.out)?;
    let ck = checkpoint::load::<f64>(&a.init)?;
    check_variant(&ck.config, a.variant, &a.init)?;
    let model = AnyModel::from_store(&ck.store, &ck.config);
    let vocab = load_sized_vocab(&a.vocab, ck.config.vocab_size)?;
    let pairs = load_nonempty_corpus(&a.data)?;
    let examples = encode_for_model(&pairs, &vocab, &ck.config);

    let max_new = ck.config.max_len - 1;
    let mut generations = Vec::with_capacity(examples.len() * a.num_samples);
    for (i, ex) in examples.iter().enumerate() {
        for j in 0..a.num_samples {
            let source = match a.latent {
                LatentChoice::Mean => LatentSource::PriorMean,
                LatentChoice::Sample => LatentSource::PriorSample {
                    seed: derive_seed(a.seed, Stream::Decode, (i * a.num_samples + j) as u64),
                },
            };
            let ids = model.decode_greedy(&ck.store, &ex.context, ex.meta, source, max_new);
            generations.push(Generation {
                context: detokenize(&vocab.decode(&ex.context)),
                reference: detokenize(&vocab.decode(&ex.response)),
                generated: detokenize(&vocab.decode(&ids)),
                meta: ex.meta.map(|m| ck.config.meta_labels[m].clone()),
            });
        }
    }
    evaluation::save_generations(&out.file("generations.jsonl"), &generations)?;
    write_manifest(
        &out,
        &Manifest {
            command: "generate",
            version: version_string(),
            seed: a.seed,
            model: Some(&ck.config),
            train: None,
            min_freq: None,
            latent: Some(a.latent.name()),
            num_samples: Some(a.num_samples),
            inputs: input_paths(&[
                ("data", Some(&a.data)),
                ("vocab", Some(&a.vocab)),
                ("init", Some(&a.init)),
            ]),
        },
    )?;
    println!(
        "generate: {} responses ({} contexts x {} samples) in {}",
        generations.len(),
        examples.len(),
        a.num_samples,
        out.path.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let out = OutDir::claim(&a.out)?;
    let ck = checkpoint::load::<f64>(&a.init)?;
    check_variant(&ck.config, a.variant, &a.init)?;
    let model = AnyModel::from_store(&ck.store, &ck.config);
    let vocab = load_sized_vocab(&a.vocab, ck.config.vocab_size)?;
    let pairs = load_nonempty_corpus(&a.data)?;
    let examples = encode_for_model(&pairs, &vocab, &ck.config);

    let vectors: Box<dyn WordVectors> = match &a.embeddings {
        Some(p) => {
            let dim = sniff_embedding_dim(p)?;
            Box::new(load_embeddings(p, &vocab, dim, a.seed)?)
        }
        None => Box::new(DenseVectors::from_token_table(&ck.store)),
    };

    let result = evaluation::evaluate(
        &model,
        &ck.store,
        &examples,
        &vocab,
        vectors.as_ref(),
        a.seed,
        ck.config.max_len - 1,
    )?;
    result.report.save(&out.file("report.txt"))?;
    evaluation::save_generations(&out.file("generations.jsonl"), &result.generations)?;
    write_manifest(
        &out,
        &Manifest {
            command: "evaluate",
            version: version_string(),
            seed: a.seed,
            model: Some(&ck.config),
            train: None,
            min_freq: None,
            latent: None,
            num_samples: None,
            inputs: input_paths(&[
                ("data", Some(&a.data)),
                ("vocab", Some(&a.vocab)),
                ("init", Some(&a.init)),
                ("embeddings", a.embeddings.as_deref()),
            ]),
        },
    )?;
    print!("{}", result.report.to_text());
    Ok(())
}

/// Small-but-real shapes so a full parameter sweep stays fast.
fn audit_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: 20,
        n_layers: 2,
        d_model: 12,
        n_heads: 2,
        d_head: 4,
        latent_dim: 6,
        mlp_hidden: 16,
        max_len: 16,
        meta_labels: vec!["a".into()],
        layer_norm_eps: 1e-6,
        log_var_clamp: 20.0,
        use_aux_loss: true,
    }
}

/// Tolerances mirror the library's full-model checks: h = 1e-5 with rel
/// err < 1e-4; the 1e-3 denominator floor means near-zero gradients must
/// agree absolutely to ~1e-7 instead of amplifying roundoff.
fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let out = OutDir::claim(&a.out)?;
    let ex = Example { context: vec![7, 8, 9], response: vec![10, 11, 12], meta: Some(0) };

    let mut lines = Vec::new();
    let mut all_pass = true;
    for variant in [Variant::Baseline, Variant::Gvt, Variant::Svt] {
        let cfg = audit_config(variant);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = AnyModel::build(&mut store, &cfg, a.seed);
        let mut noise_rng = crate::rng::rng_for(a.seed, Stream::LatentNoise, 0);
        let noise = training::noise_for_example(&model, &ex, &mut noise_rng);
        let report = grad_check(&mut store, 1e-5, 1e-3, |tape, store| {
            model.loss(tape, store, &ex, 0.5, noise.as_deref()).total
        });
        let ok = report.passed(1e-4);
        all_pass &= ok;
        lines.push(format!(
            "{variant:<9} {:>3} tensors  max rel err {:.3e}  {}",
            report.entries.len(),
            report.max_rel_err(),
            if ok { "PASS" } else { "FAIL" }
        ));
        if !ok {
            lines.push(report.to_string());
        }
    }
    let table = lines.join("\n") + "\n";
    print!("{table}");
    let path = out.file("gradcheck.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    write_manifest(
        &out,
        &Manifest {
            command: "gradcheck",
            version: version_string(),
            seed: a.seed,
            model: None,
            train: None,
            min_freq: None,
            latent: None,
            num_samples: None,
            inputs: BTreeMap::new(),
        },
    )?;
    if !all_pass {
        return Err(Error::Train("gradient check failed (see table above)".into()));
    }
    Ok(())
}
