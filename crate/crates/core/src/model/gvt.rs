//! Global variational variant: one latent vector per response, recognized
//! from (context, response) at train time and drawn from a context-only
//! prior at decode time, injected into the decoder at the SOS position.

use rand_chacha::ChaCha8Rng;

use crate::data::special;
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use crate::variational::{
    bag_nll, kl_diag_gaussians, reparameterize, GaussianParams, LatentNetwork,
};

use super::blocks::{DecoderLayer, EncoderStack, FeedForward, Linear};
use super::{
    decoder_input_ids, encode, greedy_loop, run_decoder_stack, target_ids, Embedder, Example,
    LatentSource, LossTerms, ModelConfig,
};

pub struct Gvt {
    pub cfg: ModelConfig,
    pub emb: Embedder,
    pub encoder: EncoderStack,
    /// Separate stack that pools the reference response for recognition.
    pub response_encoder: EncoderStack,
    /// Prior p(z | c): condition vector in.
    pub prior_net: LatentNetwork,
    /// Posterior q(z | c, r): [condition ; response] in.
    pub recognition_net: LatentNetwork,
    /// Maps z into model width before injection; absent when the widths match.
    pub latent_bridge: Option<Linear>,
    /// Bag-of-words head over [z ; condition]; absent in the ablation.
    pub bow_head: Option<FeedForward>,
    pub decoder: Vec<DecoderLayer>,
    pub out_proj: Linear,
}

impl Gvt {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let dims = cfg.block_dims();
        Gvt {
            cfg: cfg.clone(),
            emb: Embedder::new(store, rng, cfg),
            encoder: EncoderStack::new(store, rng, "encoder", cfg.n_layers, dims),
            response_encoder: EncoderStack::new(store, rng, "response_encoder", cfg.n_layers, dims),
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
                2 * cfg.d_model,
                cfg.mlp_hidden,
                cfg.latent_dim,
                cfg.log_var_clamp,
            ),
            latent_bridge: (cfg.latent_dim != cfg.d_model)
                .then(|| Linear::new(store, rng, "latent_bridge", cfg.latent_dim, cfg.d_model)),
            bow_head: cfg.use_aux_loss.then(|| {
                FeedForward::new(
                    store,
                    rng,
                    "bow_head",
                    cfg.latent_dim + cfg.d_model,
                    cfg.mlp_hidden,
                    cfg.vocab_size,
                )
            }),
            decoder: (0..cfg.n_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("decoder.layer{i}"), dims))
                .collect(),
            out_proj: Linear::new(store, rng, "output_proj", cfg.d_model, cfg.vocab_size),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> Self {
        let dims = cfg.block_dims();
        Gvt {
            cfg: cfg.clone(),
            emb: Embedder::from_store(store, cfg),
            encoder: EncoderStack::from_store(store, "encoder", cfg.n_layers, dims),
            response_encoder: EncoderStack::from_store(store, "response_encoder", cfg.n_layers, dims),
            prior_net: LatentNetwork::from_store(store, "prior_net", cfg.latent_dim, cfg.log_var_clamp),
            recognition_net: LatentNetwork::from_store(
                store,
                "recognition_net",
                cfg.latent_dim,
                cfg.log_var_clamp,
            ),
            latent_bridge: (cfg.latent_dim != cfg.d_model)
                .then(|| Linear::from_store(store, "latent_bridge")),
            bow_head: cfg.use_aux_loss.then(|| FeedForward::from_store(store, "bow_head")),
            decoder: (0..cfg.n_layers)
                .map(|i| DecoderLayer::from_store(store, &format!("decoder.layer{i}"), dims))
                .collect(),
            out_proj: Linear::from_store(store, "output_proj"),
        }
    }

    /// Pools the reference response through the response encoder (CLS row).
    fn response_pooled<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        response: &[usize],
    ) -> Tensor<T> {
        let mut ids = Vec::with_capacity(response.len() + 1);
        ids.push(special::CLS);
        ids.extend_from_slice(response);
        let x = self.emb.tokens(tape, store, &ids).add(&self.emb.positions(tape, ids.len()));
        let valid = crate::attention::all_valid(ids.len());
        self.response_encoder.forward(tape, store, &x, &valid).slice_rows(0, 1)
    }

    /// Posterior and prior over the latent for one example.
    fn latent_distributions<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
    ) -> (GaussianParams<T>, GaussianParams<T>, Tensor<T>, Tensor<T>) {
        let enc = encode(tape, store, &self.emb, &self.encoder, &ex.context, ex.meta);
        let r = self.response_pooled(tape, store, &ex.response);
        let q_in = tape.concat_cols(&[enc.pooled.clone(), r]);
        let q = self.recognition_net.forward(tape, store, &q_in);
        let p = self.prior_net.forward(tape, store, &enc.pooled);
        (q, p, enc.pooled, enc.sequence)
    }

    /// Decoder input embeddings with the latent (and meta, when present)
    /// added at the SOS row only.
    fn injected_decoder_input<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        in_ids: &[usize],
        z: &Tensor<T>,
        meta: Option<usize>,
    ) -> Tensor<T> {
        let dec = self
            .emb
            .tokens(tape, store, in_ids)
            .add(&self.emb.positions(tape, in_ids.len()));
        let bridged = match &self.latent_bridge {
            Some(bridge) => bridge.forward(tape, store, z),
            None => z.clone(),
        };
        let mut sos = dec.slice_rows(0, 1).add(&bridged);
        if let Some(m) = self.emb.meta(tape, store, meta) {
            sos = sos.add(&m);
        }
        if in_ids.len() == 1 {
            sos
        } else {
            tape.concat_rows(&[sos, dec.slice_rows(1, in_ids.len() - 1)])
        }
    }

    /// Cross entropy of the reference response with a fixed latent.
    fn reconstruction<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
        memory: &Tensor<T>,
        z: &Tensor<T>,
    ) -> (Tensor<T>, usize) {
        let in_ids = decoder_input_ids(&ex.response);
        let dec_in = self.injected_decoder_input(tape, store, &in_ids, z, ex.meta);
        let h = run_decoder_stack(tape, store, &self.decoder, &dec_in, memory);
        let logits = self.out_proj.forward(tape, store, &h);
        let targets = target_ids(&ex.response);
        let rec = tape.cross_entropy(&logits, &targets, &vec![1.0; targets.len()]);
        (rec, targets.len())
    }

    /// ELBO-style loss: reconstruction + kl_weight * KL(q || p) + BOW aux.
    /// `latent_noise` (latent_dim standard-normal draws) selects a posterior
    /// sample; None uses the posterior mean.
    pub fn loss<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
        kl_weight: f64,
        latent_noise: Option<&[f64]>,
    ) -> LossTerms<T> {
        let (q, p, pooled, memory) = self.latent_distributions(tape, store, ex);
        let z = match latent_noise {
            Some(noise) => {
                assert_eq!(
                    noise.len(),
                    self.cfg.latent_dim,
                    "gvt loss: expected {} noise draws",
                    self.cfg.latent_dim
                );
                let eps = tape.constant_f64(noise.to_vec(), vec![1, self.cfg.latent_dim]);
                reparameterize(&q, &eps)
            }
            None => q.mu.clone(),
        };
        let (rec, target_tokens) = self.reconstruction(tape, store, ex, &memory, &z);
        let kl = kl_diag_gaussians(&q, &p);

        let mut total = rec.add(&kl.mul_scalar(T::from_f64(kl_weight)));
        let mut aux_val = 0.0;
        if let Some(head) = &self.bow_head {
            if ex.response.is_empty() {
                log::warn!("gvt loss: empty response, bag-of-words term skipped");
            } else {
                let bow_logits =
                    head.forward(tape, store, &tape.concat_cols(&[z.clone(), pooled]));
                let aux = bag_nll(tape, &bow_logits, &ex.response);
                aux_val = aux.scalar_f64();
                total = total.add(&aux);
            }
        }
        LossTerms {
            rec: rec.scalar_f64(),
            kl: kl.scalar_f64(),
            aux: aux_val,
            target_tokens,
            total,
        }
    }

    /// KL(q || p) alone (evaluation metric; latent weight held at 1).
    pub fn posterior_prior_kl<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        ex: &Example,
    ) -> Tensor<T> {
        let (q, p, _, _) = self.latent_distributions(tape, store, ex);
        kl_diag_gaussians(&q, &p)
    }

    /// Latent used at decode time, as plain values: prior mean, or a prior
    /// sample with noise derived from the given seed.
    fn decode_latent<T: Real>(
        &self,
        store: &ParamStore<T>,
        context: &[usize],
        meta: Option<usize>,
        source: LatentSource,
    ) -> Vec<f64> {
        let tape: Tape<T> = Tape::new();
        let enc = encode(&tape, store, &self.emb, &self.encoder, context, meta);
        let p = self.prior_net.forward(&tape, store, &enc.pooled);
        let mu: Vec<f64> = p.mu.values().into_iter().map(|v| v.into_f64()).collect();
        match source {
            LatentSource::PriorMean => mu,
            LatentSource::PriorSample { seed } => {
                let lv: Vec<f64> = p.log_var.values().into_iter().map(|v| v.into_f64()).collect();
                let mut rng = crate::rng::rng_for(seed, crate::rng::Stream::Decode, 0);
                let eps = crate::rng::standard_normal(&mut rng, self.cfg.latent_dim);
                mu.iter()
                    .zip(lv.iter())
                    .zip(eps)
                    .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                    .collect()
            }
        }
    }

    pub fn decode_greedy<T: Real>(
        &self,
        store: &ParamStore<T>,
        context: &[usize],
        meta: Option<usize>,
        source: LatentSource,
        max_new: usize,
    ) -> Vec<usize> {
        let z_vals = self.decode_latent(store, context, meta, source);
        greedy_loop(max_new, |prefix| {
            let tape: Tape<T> = Tape::new();
            let enc = encode(&tape, store, &self.emb, &self.encoder, context, meta);
            let z = tape.constant_f64(z_vals.clone(), vec![1, self.cfg.latent_dim]);
            let in_ids = decoder_input_ids(prefix);
            let dec_in = self.injected_decoder_input(&tape, store, &in_ids, &z, meta);
            let h = run_decoder_stack(&tape, store, &self.decoder, &dec_in, &enc.sequence);
            let logits = self.out_proj.forward(&tape, store, &h);
            let t = logits.shape()[0];
            logits.slice_rows(t - 1, 1).values()
        })
    }
}
