//! Model assembly: shared encoder with CLS pooling, the baseline
//! transformer, and the two variational variants (global and sequential).

pub mod baseline;
pub mod blocks;
pub mod gvt;
pub mod svt;

pub use baseline::Baseline;
pub use gvt::Gvt;
pub use svt::Svt;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_mask, positional_encoding, MaskKind};
use crate::data::special;
use crate::tensor::{init, ParamId, ParamStore, Real, Tape, Tensor};
use blocks::{BlockDims, EncoderStack};

/// Model variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Gvt,
    Svt,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "gvt" => Ok(Variant::Gvt),
            "svt" => Ok(Variant::Svt),
            other => Err(crate::Error::Config(format!(
                "unknown variant '{other}' (expected baseline, gvt, or svt)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Variant::Baseline => "baseline",
            Variant::Gvt => "gvt",
            Variant::Svt => "svt",
        })
    }
}

/// Execution phase. The SVT posterior path and both recognition networks
/// are reachable only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Decode,
}

/// Where decode-time latents come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    /// z = prior mean (deterministic; no noise consumed).
    PriorMean,
    /// z sampled from the prior with noise derived from this seed.
    PriorSample { seed: u64 },
}

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub latent_dim: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    /// Meta-feature label set (empty = no meta features).
    pub meta_labels: Vec<String>,
    pub layer_norm_eps: f64,
    pub log_var_clamp: f64,
    /// Register and train the bag-of-words auxiliary head (GVT) or its
    /// sequential counterpart (SVT). Off = ablation.
    pub use_aux_loss: bool,
}

impl ModelConfig {
    /// Full-scale defaults; vocab size filled in from the data.
    pub fn defaults(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            vocab_size,
            n_layers: 4,
            d_model: 300,
            n_heads: 4,
            d_head: 64,
            latent_dim: 300,
            mlp_hidden: 512,
            max_len: 64,
            meta_labels: Vec::new(),
            layer_norm_eps: 1e-6,
            log_var_clamp: 20.0,
            use_aux_loss: true,
        }
    }

    pub fn n_meta(&self) -> usize {
        self.meta_labels.len()
    }

    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("latent_dim", self.latent_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(crate::Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(crate::Error::Config(format!(
                "d_model must be even for sinusoidal positions, got {}",
                self.d_model
            )));
        }
        if self.vocab_size <= special::RESERVED {
            return Err(crate::Error::Config(format!(
                "vocab_size {} leaves no room after the {} reserved ids",
                self.vocab_size,
                special::RESERVED
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(crate::Error::Config("layer_norm_eps must be positive".into()));
        }
        if self.log_var_clamp <= 0.0 {
            return Err(crate::Error::Config("log_var_clamp must be positive".into()));
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            ffn_hidden: self.mlp_hidden,
            ln_eps: self.layer_norm_eps,
        }
    }
}

/// One training/evaluation example in content-token form (no SOS/EOS/CLS;
/// those are added by the model).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub context: Vec<usize>,
    pub response: Vec<usize>,
    pub meta: Option<usize>,
}

/// Loss terms for one example. `total` stays on the tape; the components
/// are detached values for logging.
pub struct LossTerms<T: Real> {
    pub total: Tensor<T>,
    pub rec: f64,
    pub kl: f64,
    pub aux: f64,
    pub target_tokens: usize,
}

/// Encoded context: pooled condition vector and the memory sequence.
pub struct EncoderOutput<T: Real> {
    /// [1 x d_model]; CLS row plus the meta embedding when present.
    pub pooled: Tensor<T>,
    /// [(1 + context length) x d_model].
    pub sequence: Tensor<T>,
}

/// Token + positional + meta embedding tables shared by all variants.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub token_table: ParamId,
    pub meta_table: Option<ParamId>,
    pub pe: Vec<f64>,
    pub d_model: usize,
    pub max_len: usize,
}

impl Embedder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Self {
        let token_table = store.register_f64(
            "embeddings.token",
            vec![cfg.vocab_size, cfg.d_model],
            init::normal(rng, cfg.vocab_size * cfg.d_model, 0.02),
        );
        let meta_table = (cfg.n_meta() > 0).then(|| {
            store.register_f64(
                "embeddings.meta",
                vec![cfg.n_meta(), cfg.d_model],
                init::normal(rng, cfg.n_meta() * cfg.d_model, 0.02),
            )
        });
        Embedder {
            token_table,
            meta_table,
            pe: positional_encoding(cfg.max_len, cfg.d_model),
            d_model: cfg.d_model,
            max_len: cfg.max_len,
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> Self {
        let token_table = store
            .lookup("embeddings.token")
            .unwrap_or_else(|| panic!("embedder: missing embeddings.token"));
        let meta_table = (cfg.n_meta() > 0).then(|| {
            store
                .lookup("embeddings.meta")
                .unwrap_or_else(|| panic!("embedder: missing embeddings.meta"))
        });
        Embedder {
            token_table,
            meta_table,
            pe: positional_encoding(cfg.max_len, cfg.d_model),
            d_model: cfg.d_model,
            max_len: cfg.max_len,
        }
    }

    /// Token embeddings without positions: [len(ids) x d_model].
    pub fn tokens<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Tensor<T> {
        tape.embedding(&tape.param(store, self.token_table), ids)
    }

    /// Constant positional rows [len x d_model] starting at position 0.
    pub fn positions<T: Real>(&self, tape: &Tape<T>, len: usize) -> Tensor<T> {
        assert!(
            len <= self.max_len,
            "embedder: sequence length {len} exceeds max_len {}",
            self.max_len
        );
        tape.constant_f64(self.pe[..len * self.d_model].to_vec(), vec![len, self.d_model])
    }

    /// Meta embedding row [1 x d_model], or None when absent/unconfigured.
    pub fn meta<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        meta: Option<usize>,
    ) -> Option<Tensor<T>> {
        match (self.meta_table, meta) {
            (Some(table), Some(id)) => Some(tape.embedding(&tape.param(store, table), &[id])),
            _ => None,
        }
    }
}

/// Encodes `[CLS] + context` through the given stack. The pooled condition
/// is the CLS output row, with the meta embedding added when present.
pub fn encode<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    emb: &Embedder,
    stack: &EncoderStack,
    context: &[usize],
    meta: Option<usize>,
) -> EncoderOutput<T> {
    let mut ids = Vec::with_capacity(context.len() + 1);
    ids.push(special::CLS);
    ids.extend_from_slice(context);
    assert!(
        ids.len() <= emb.max_len,
        "encode: context length {} exceeds max_len {} (truncate upstream)",
        ids.len(),
        emb.max_len
    );
    let x = emb.tokens(tape, store, &ids).add(&emb.positions(tape, ids.len()));
    let valid = crate::attention::all_valid(ids.len());
    let sequence = stack.forward(tape, store, &x, &valid);
    let mut pooled = sequence.slice_rows(0, 1);
    if let Some(m) = emb.meta(tape, store, meta) {
        pooled = pooled.add(&m);
    }
    EncoderOutput { pooled, sequence }
}

/// Decoder input ids: SOS followed by the response prefix (teacher forcing).
pub fn decoder_input_ids(response: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(response.len() + 1);
    ids.push(special::SOS);
    ids.extend_from_slice(response);
    ids
}

/// Target ids aligned with `decoder_input_ids`: response then EOS.
pub fn target_ids(response: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(response.len() + 1);
    ids.extend_from_slice(response);
    ids.push(special::EOS);
    ids
}

/// Greedy argmax over one logits row; ties break toward the lowest id.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shared greedy loop: `step` maps the tokens generated so far to the
/// next-token logits row. Stops at EOS or after `max_new` tokens.
pub fn greedy_loop<T: Real>(max_new: usize, mut step: impl FnMut(&[usize]) -> Vec<T>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for _ in 0..max_new {
        let logits = step(&out);
        let next = argmax(&logits);
        if next == special::EOS {
            break;
        }
        out.push(next);
    }
    out
}

/// Standard decoder pass shared by the baseline and GVT: embedded inputs
/// through every layer with a causal self mask and full memory mask.
pub fn run_decoder_stack<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    layers: &[blocks::DecoderLayer],
    dec_emb: &Tensor<T>,
    memory: &Tensor<T>,
) -> Tensor<T> {
    let t_len = dec_emb.shape()[0];
    let mem_len = memory.shape()[0];
    let self_mask = attention_mask(MaskKind::Causal, t_len, t_len, &crate::attention::all_valid(t_len));
    let memory_mask = attention_mask(MaskKind::Full, t_len, mem_len, &crate::attention::all_valid(mem_len));
    let mut h = dec_emb.clone();
    for layer in layers {
        h = layer.forward(tape, store, &h, memory, &self_mask, &memory_mask);
    }
    h
}

/// Any of the three variants behind one dispatch surface.
pub enum AnyModel {
    Baseline(Baseline),
    Gvt(Gvt),
    Svt(Svt),
}

impl AnyModel {
    /// Registers fresh parameters for `cfg.variant` into the store.
    pub fn build<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> AnyModel {
        let mut rng = crate::rng::rng_for(seed, crate::rng::Stream::ParamInit, 0);
        match cfg.variant {
            Variant::Baseline => AnyModel::Baseline(Baseline::new(store, &mut rng, cfg)),
            Variant::Gvt => AnyModel::Gvt(Gvt::new(store, &mut rng, cfg)),
            Variant::Svt => AnyModel::Svt(Svt::new(store, &mut rng, cfg)),
        }
    }

    /// Re-binds to parameters already in the store (checkpoint load).
    pub fn from_store<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> AnyModel {
        match cfg.variant {
            Variant::Baseline => AnyModel::Baseline(Baseline::from_store(store, cfg)),
            Variant::Gvt => AnyModel::Gvt(Gvt::from_store(store, cfg)),
            Variant::Svt => AnyModel::Svt(Svt::from_store(store, cfg)),
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            AnyModel::Baseline(_) => Variant::Baseline,
            AnyModel::Gvt(_) => Variant::Gvt,
            AnyModel::Svt(_) => Variant::Svt,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Baseline(m) => &m.cfg,
            AnyModel::Gvt(m) => &m.cfg,
            AnyModel::Svt(m) => &m.cfg,
        }
    }

    /// Training loss. `latent_noise`, when given, supplies the standard
    /// normal draws (GVT: latent_dim; SVT: T x latent_dim row-major);
    /// None uses the posterior mean (deterministic evaluation).
    pub fn loss<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
        kl_weight: f64,
        latent_noise: Option<&[f64]>,
    ) -> LossTerms<T> {
        match self {
            AnyModel::Baseline(m) => m.mle_loss(tape, store, ex),
            AnyModel::Gvt(m) => m.loss(tape, store, ex, kl_weight, latent_noise),
            AnyModel::Svt(m) => m.loss(tape, store, ex, kl_weight, latent_noise),
        }
    }

    /// KL between posterior and prior for one example (0 for the baseline).
    pub fn example_kl<T: Real>(&self, store: &ParamStore<T>, ex: &Example) -> f64 {
        match self {
            AnyModel::Baseline(_) => 0.0,
            AnyModel::Gvt(m) => {
                let tape = Tape::new();
                m.posterior_prior_kl(&tape, store, ex).scalar_f64()
            }
            AnyModel::Svt(m) => {
                let tape = Tape::new();
                m.posterior_prior_kl(&tape, store, ex).scalar_f64()
            }
        }
    }

    /// Greedy decode from context alone.
    pub fn decode_greedy<T: Real>(
        &self,
        store: &ParamStore<T>,
        context: &[usize],
        meta: Option<usize>,
        source: LatentSource,
        max_new: usize,
    ) -> Vec<usize> {
        match self {
            AnyModel::Baseline(m) => m.decode_greedy(store, context, meta, max_new),
            AnyModel::Gvt(m) => m.decode_greedy(store, context, meta, source, max_new),
            AnyModel::Svt(m) => m.decode_greedy(store, context, meta, source, max_new),
        }
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: 50,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 5,
        latent_dim: 8,
        mlp_hidden: 24,
        max_len: 24,
        meta_labels: vec!["a".into(), "b".into()],
        layer_norm_eps: 1e-6,
        log_var_clamp: 20.0,
        use_aux_loss: true,
    }
}
