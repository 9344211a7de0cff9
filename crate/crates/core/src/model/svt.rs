//! Sequential variational variant: a per-position latent inside the first
//! decoder layer. The prior path attends causally over the shifted response;
//! the posterior path reuses the very same attention weights with the mask
//! removed and is reachable only during training.

use rand_chacha::ChaCha8Rng;

use crate::attention::{all_valid, attention_mask, MaskKind};
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use crate::variational::{
    kl_diag_gaussians, reparameterize, sequential_bag_nll, GaussianParams, LatentNetwork,
};

use super::blocks::{BlockDims, DecoderLayer, EncoderStack, FeedForward, LayerNormParams, Linear};
use super::{
    decoder_input_ids, encode, greedy_loop, run_decoder_stack, target_ids, Embedder, Example,
    LatentSource, LossTerms, ModelConfig, Phase,
};

/// Self-attention + cross-attention half of a decoder layer, shared between
/// the prior (causal) and posterior (unmasked) paths.
pub struct SharedAttnBlock {
    pub self_attn: crate::attention::MultiHeadAttention,
    pub ln1: LayerNormParams,
    pub cross_attn: crate::attention::MultiHeadAttention,
    pub ln2: LayerNormParams,
}

impl SharedAttnBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: BlockDims,
    ) -> Self {
        SharedAttnBlock {
            self_attn: crate::attention::MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}.self_attn"),
                dims.d_model,
                dims.n_heads,
                dims.d_head,
            ),
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), dims.d_model, dims.ln_eps),
            cross_attn: crate::attention::MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}.cross_attn"),
                dims.d_model,
                dims.n_heads,
                dims.d_head,
            ),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), dims.d_model, dims.ln_eps),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, prefix: &str, dims: BlockDims) -> Self {
        SharedAttnBlock {
            self_attn: crate::attention::MultiHeadAttention::from_store(
                store,
                &format!("{prefix}.self_attn"),
                dims.n_heads,
                dims.d_head,
            ),
            ln1: LayerNormParams::from_store(store, &format!("{prefix}.ln1"), dims.ln_eps),
            cross_attn: crate::attention::MultiHeadAttention::from_store(
                store,
                &format!("{prefix}.cross_attn"),
                dims.n_heads,
                dims.d_head,
            ),
            ln2: LayerNormParams::from_store(store, &format!("{prefix}.ln2"), dims.ln_eps),
        }
    }

    /// Residual + LN around self-attention (mask chosen by the caller),
    /// then residual + LN around cross-attention over the memory.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        memory: &Tensor<T>,
        self_kind: MaskKind,
    ) -> Tensor<T> {
        let t = x.shape()[0];
        let m = memory.shape()[0];
        let self_mask = attention_mask(self_kind, t, t, &all_valid(t));
        let memory_mask = attention_mask(MaskKind::Full, t, m, &all_valid(m));
        let attended = self.self_attn.forward(tape, store, x, x, &self_mask);
        let x = self.ln1.forward(tape, store, &x.add(&attended));
        let crossed = self.cross_attn.forward(tape, store, &x, memory, &memory_mask);
        self.ln2.forward(tape, store, &x.add(&crossed))
    }
}

pub struct Svt {
    pub cfg: ModelConfig,
    pub emb: Embedder,
    pub encoder: EncoderStack,
    /// Attention half of the variational (first) decoder layer.
    pub shared: SharedAttnBlock,
    /// Replaces that layer's feed-forward: consumes [o_p ; z].
    pub fusion_ffn: FeedForward,
    pub ln3: LayerNormParams,
    /// Per-position prior p(z_t | c, x_<t) over prior-path rows.
    pub prior_net: LatentNetwork,
    /// Per-position posterior q(z_t | c, x) over posterior-path rows.
    pub recognition_net: LatentNetwork,
    /// Sequential bag-of-words head over [z_t ; o_p[t]]; absent in ablation.
    pub sbow_head: Option<FeedForward>,
    /// Standard decoder layers after the variational one.
    pub rest: Vec<DecoderLayer>,
    pub out_proj: Linear,
}

impl Svt {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let dims = cfg.block_dims();
        Svt {
            cfg: cfg.clone(),
            emb: Embedder::new(store, rng, cfg),
            encoder: EncoderStack::new(store, rng, "encoder", cfg.n_layers, dims),
            shared: SharedAttnBlock::new(store, rng, "decoder.layer0", dims),
            fusion_ffn: FeedForward::new(
                store,
                rng,
                "decoder.layer0.fusion_ffn",
                cfg.d_model + cfg.latent_dim,
                cfg.mlp_hidden,
                cfg.d_model,
            ),
            ln3: LayerNormParams::new(store, "decoder.layer0.ln3", cfg.d_model, cfg.layer_norm_eps),
            prior_net: LatentNetwork::new(
                store,
                rng,
                "prior_net",
                cfg.d_model,
                cfg.mlp_hidden,
                cfg.latent_dim,
                cfg.log_var_clamp,
            ),
            recognition_net: LatentNetwork::new(
                store,
                rng,
                "recognition_net",
                cfg.d_model,
                cfg.mlp_hidden,
                cfg.latent_dim,
                cfg.log_var_clamp,
            ),
            sbow_head: cfg.use_aux_loss.then(|| {
                FeedForward::new(
                    store,
                    rng,
                    "sbow_head",
                    cfg.latent_dim + cfg.d_model,
                    cfg.mlp_hidden,
                    cfg.vocab_size,
                )
            }),
            rest: (1..cfg.n_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("decoder.layer{i}"), dims))
                .collect(),
            out_proj: Linear::new(store, rng, "output_proj", cfg.d_model, cfg.vocab_size),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> Self {
        let dims = cfg.block_dims();
        Svt {
            cfg: cfg.clone(),
            emb: Embedder::from_store(store, cfg),
            encoder: EncoderStack::from_store(store, "encoder", cfg.n_layers, dims),
            shared: SharedAttnBlock::from_store(store, "decoder.layer0", dims),
            fusion_ffn: FeedForward::from_store(store, "decoder.layer0.fusion_ffn"),
            ln3: LayerNormParams::from_store(store, "decoder.layer0.ln3", cfg.layer_norm_eps),
            prior_net: LatentNetwork::from_store(store, "prior_net", cfg.latent_dim, cfg.log_var_clamp),
            recognition_net: LatentNetwork::from_store(
                store,
                "recognition_net",
                cfg.latent_dim,
                cfg.log_var_clamp,
            ),
            sbow_head: cfg.use_aux_loss.then(|| FeedForward::from_store(store, "sbow_head")),
            rest: (1..cfg.n_layers)
                .map(|i| DecoderLayer::from_store(store, &format!("decoder.layer{i}"), dims))
                .collect(),
            out_proj: Linear::from_store(store, "output_proj"),
        }
    }

    fn embed_shifted<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        in_ids: &[usize],
    ) -> Tensor<T> {
        self.emb
            .tokens(tape, store, in_ids)
            .add(&self.emb.positions(tape, in_ids.len()))
    }

    /// Causal pass over the shifted response; per-position prior params.
    pub fn prior_path<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        dec_in: &Tensor<T>,
        memory: &Tensor<T>,
    ) -> (Tensor<T>, GaussianParams<T>) {
        let o = self.shared.forward(tape, store, dec_in, memory, MaskKind::Causal);
        let prior = self.prior_net.forward(tape, store, &o);
        (o, prior)
    }

    /// Unmasked pass with the same attention weights; train-only.
    pub fn posterior_path<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        dec_in: &Tensor<T>,
        memory: &Tensor<T>,
        phase: Phase,
    ) -> (Tensor<T>, GaussianParams<T>) {
        assert!(
            phase == Phase::Train,
            "svt: posterior path is blocked outside training"
        );
        let o = self.shared.forward(tape, store, dec_in, memory, MaskKind::Full);
        let posterior = self.recognition_net.forward(tape, store, &o);
        (o, posterior)
    }

    /// Fusion feed-forward on [o_p ; z] with residual + LN, then the
    /// standard decoder layers and the output projection.
    fn fuse_and_project<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        o_p: &Tensor<T>,
        z: &Tensor<T>,
        memory: &Tensor<T>,
    ) -> Tensor<T> {
        let fused = self
            .fusion_ffn
            .forward(tape, store, &tape.concat_cols(&[o_p.clone(), z.clone()]));
        let h = self.ln3.forward(tape, store, &o_p.add(&fused));
        let h = run_decoder_stack(tape, store, &self.rest, &h, memory);
        self.out_proj.forward(tape, store, &h)
    }

    /// ELBO-style loss with per-position latents. `latent_noise` must hold
    /// T * latent_dim standard-normal draws (T = response length + 1),
    /// row-major by position; None uses the per-position posterior means.
    pub fn loss<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
        kl_weight: f64,
        latent_noise: Option<&[f64]>,
    ) -> LossTerms<T> {
        let enc = encode(tape, store, &self.emb, &self.encoder, &ex.context, ex.meta);
        let in_ids = decoder_input_ids(&ex.response);
        let t_len = in_ids.len();
        let dec_in = self.embed_shifted(tape, store, &in_ids);

        let (o_p, prior) = self.prior_path(tape, store, &dec_in, &enc.sequence);
        let (_o_r, posterior) =
            self.posterior_path(tape, store, &dec_in, &enc.sequence, Phase::Train);
        let z = match latent_noise {
            Some(noise) => {
                assert_eq!(
                    noise.len(),
                    t_len * self.cfg.latent_dim,
                    "svt loss: expected {} x {} noise draws",
                    t_len,
                    self.cfg.latent_dim
                );
                let eps = tape.constant_f64(noise.to_vec(), vec![t_len, self.cfg.latent_dim]);
                reparameterize(&posterior, &eps)
            }
            None => posterior.mu.clone(),
        };

        let logits = self.fuse_and_project(tape, store, &o_p, &z, &enc.sequence);
        let targets = target_ids(&ex.response);
        let rec = tape.cross_entropy(&logits, &targets, &vec![1.0; targets.len()]);
        let kl = kl_diag_gaussians(&posterior, &prior);

        let mut total = rec.add(&kl.mul_scalar(T::from_f64(kl_weight)));
        let mut aux_val = 0.0;
        if let Some(head) = &self.sbow_head {
            let sb_logits =
                head.forward(tape, store, &tape.concat_cols(&[z.clone(), o_p.clone()]));
            let aux = sequential_bag_nll(tape, &sb_logits, &targets);
            aux_val = aux.scalar_f64();
            total = total.add(&aux);
        }
        LossTerms {
            rec: rec.scalar_f64(),
            kl: kl.scalar_f64(),
            aux: aux_val,
            target_tokens: targets.len(),
            total,
        }
    }

    /// Sum over positions of KL(posterior_t || prior_t).
    pub fn posterior_prior_kl<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
    ) -> Tensor<T> {
        let enc = encode(tape, store, &self.emb, &self.encoder, &ex.context, ex.meta);
        let dec_in = self.embed_shifted(tape, store, &decoder_input_ids(&ex.response));
        let (_, prior) = self.prior_path(tape, store, &dec_in, &enc.sequence);
        let (_, posterior) = self.posterior_path(tape, store, &dec_in, &enc.sequence, Phase::Train);
        kl_diag_gaussians(&posterior, &prior)
    }

    pub fn decode_greedy<T: Real>(
        &self,
        store: &ParamStore<T>,
        context: &[usize],
        meta: Option<usize>,
        source: LatentSource,
        max_new: usize,
    ) -> Vec<usize> {
        // Noise is pre-drawn per position so z_t stays fixed once emitted
        // (the prior at position t is causal, hence stable across steps).
        let noise: Option<Vec<f64>> = match source {
            LatentSource::PriorMean => None,
            LatentSource::PriorSample { seed } => {
                let mut rng = crate::rng::rng_for(seed, crate::rng::Stream::Decode, 0);
                Some(crate::rng::standard_normal(
                    &mut rng,
                    max_new.max(1) * self.cfg.latent_dim,
                ))
            }
        };
        greedy_loop(max_new, |prefix| {
            let tape: Tape<T> = Tape::new();
            let enc = encode(&tape, store, &self.emb, &self.encoder, context, meta);
            let in_ids = decoder_input_ids(prefix);
            let t = in_ids.len();
            let dec_in = self.embed_shifted(&tape, store, &in_ids);
            let (o_p, prior) = self.prior_path(&tape, store, &dec_in, &enc.sequence);
            let z = match &noise {
                None => prior.mu.clone(),
                Some(eps) => {
                    let eps_t = tape.constant_f64(
                        eps[..t * self.cfg.latent_dim].to_vec(),
                        vec![t, self.cfg.latent_dim],
                    );
                    reparameterize(&prior, &eps_t)
                }
            };
            let logits = self.fuse_and_project(&tape, store, &o_p, &z, &enc.sequence);
            logits.slice_rows(t - 1, 1).values()
        })
    }
}
