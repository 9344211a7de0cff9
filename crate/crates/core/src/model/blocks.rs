//! Shared building blocks: linear layers, feed-forward nets, layer norm,
//! and the post-norm transformer encoder/decoder layers.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::attention::{MaskKind, MultiHeadAttention};
use crate::tensor::{init, ParamId, ParamStore, Real, Tape, Tensor};

/// Affine map y = xW + b with Xavier-initialized W and zero b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: store.register_f64(
                &format!("{prefix}.w"),
                vec![d_in, d_out],
                init::xavier_uniform(rng, d_in, d_out),
            ),
            b: store.register_f64(&format!("{prefix}.b"), vec![d_out], init::zeros(d_out)),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, prefix: &str) -> Self {
        let find = |name: &str| {
            store
                .lookup(&format!("{prefix}.{name}"))
                .unwrap_or_else(|| panic!("linear: missing parameter {prefix}.{name}"))
        };
        Linear { w: find("w"), b: find("b") }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&tape.param(store, self.w)).add_row(&tape.param(store, self.b))
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        FeedForward {
            l1: Linear::new(store, rng, &format!("{prefix}.l1"), d_in, hidden),
            l2: Linear::new(store, rng, &format!("{prefix}.l2"), hidden, d_out),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, prefix: &str) -> Self {
        FeedForward {
            l1: Linear::from_store(store, &format!("{prefix}.l1")),
            l2: Linear::from_store(store, &format!("{prefix}.l2")),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        self.l2.forward(tape, store, &self.l1.forward(tape, store, x).relu())
    }
}

/// Learnable layer-norm affine (gain starts at 1, bias at 0).
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, eps: f64) -> Self {
        LayerNormParams {
            gain: store.register_f64(&format!("{prefix}.gain"), vec![d], vec![1.0; d]),
            bias: store.register_f64(&format!("{prefix}.bias"), vec![d], init::zeros(d)),
            eps,
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, prefix: &str, eps: f64) -> Self {
        let find = |name: &str| {
            store
                .lookup(&format!("{prefix}.{name}"))
                .unwrap_or_else(|| panic!("layer_norm: missing parameter {prefix}.{name}"))
        };
        LayerNormParams { gain: find("gain"), bias: find("bias"), eps }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&tape.param(store, self.gain), &tape.param(store, self.bias), self.eps)
    }
}

/// Post-norm encoder layer: LN(x + SelfAttn(x)) then LN(x + FFN(x)).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNormParams,
    pub ffn: FeedForward,
    pub ln2: LayerNormParams,
}

/// Width/shape settings shared by every block constructor.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: BlockDims,
    ) -> Self {
        EncoderLayer {
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}.self_attn"),
                dims.d_model,
                dims.n_heads,
                dims.d_head,
            ),
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), dims.d_model, dims.ln_eps),
            ffn: FeedForward::new(
                store,
                rng,
                &format!("{prefix}.ffn"),
                dims.d_model,
                dims.ffn_hidden,
                dims.d_model,
            ),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), dims.d_model, dims.ln_eps),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, prefix: &str, dims: BlockDims) -> Self {
        EncoderLayer {
            self_attn: MultiHeadAttention::from_store(
                store,
                &format!("{prefix}.self_attn"),
                dims.n_heads,
                dims.d_head,
            ),
            ln1: LayerNormParams::from_store(store, &format!("{prefix}.ln1"), dims.ln_eps),
            ffn: FeedForward::from_store(store, &format!("{prefix}.ffn")),
            ln2: LayerNormParams::from_store(store, &format!("{prefix}.ln2"), dims.ln_eps),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mask: &Rc<Vec<bool>>,
    ) -> Tensor<T> {
        let attended = self.self_attn.forward(tape, store, x, x, mask);
        let x = self.ln1.forward(tape, store, &x.add(&attended));
        let fed = self.ffn.forward(tape, store, &x);
        self.ln2.forward(tape, store, &x.add(&fed))
    }
}

/// Stack of encoder layers over one full-attention padding mask.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_layers: usize,
        dims: BlockDims,
    ) -> Self {
        EncoderStack {
            layers: (0..n_layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("{prefix}.layer{i}"), dims))
                .collect(),
        }
    }

    pub fn from_store<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        n_layers: usize,
        dims: BlockDims,
    ) -> Self {
        EncoderStack {
            layers: (0..n_layers)
                .map(|i| EncoderLayer::from_store(store, &format!("{prefix}.layer{i}"), dims))
                .collect(),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        valid: &[bool],
    ) -> Tensor<T> {
        let len = x.shape()[0];
        let mask = crate::attention::attention_mask(MaskKind::Full, len, len, valid);
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(tape, store, &h, &mask);
        }
        h
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// encoder memory, then feed-forward; residual + LN after each.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNormParams,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
    pub ln3: LayerNormParams,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: BlockDims,
    ) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}.self_attn"),
                dims.d_model,
                dims.n_heads,
                dims.d_head,
            ),
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), dims.d_model, dims.ln_eps),
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}.cross_attn"),
                dims.d_model,
                dims.n_heads,
                dims.d_head,
            ),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), dims.d_model, dims.ln_eps),
            ffn: FeedForward::new(
                store,
                rng,
                &format!("{prefix}.ffn"),
                dims.d_model,
                dims.ffn_hidden,
                dims.d_model,
            ),
            ln3: LayerNormParams::new(store, &format!("{prefix}.ln3"), dims.d_model, dims.ln_eps),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, prefix: &str, dims: BlockDims) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::from_store(
                store,
                &format!("{prefix}.self_attn"),
                dims.n_heads,
                dims.d_head,
            ),
            ln1: LayerNormParams::from_store(store, &format!("{prefix}.ln1"), dims.ln_eps),
            cross_attn: MultiHeadAttention::from_store(
                store,
                &format!("{prefix}.cross_attn"),
                dims.n_heads,
                dims.d_head,
            ),
            ln2: LayerNormParams::from_store(store, &format!("{prefix}.ln2"), dims.ln_eps),
            ffn: FeedForward::from_store(store, &format!("{prefix}.ffn")),
            ln3: LayerNormParams::from_store(store, &format!("{prefix}.ln3"), dims.ln_eps),
        }
    }

    /// `self_mask` is over decoder positions, `memory_mask` over encoder keys.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        memory: &Tensor<T>,
        self_mask: &Rc<Vec<bool>>,
        memory_mask: &Rc<Vec<bool>>,
    ) -> Tensor<T> {
        let attended = self.self_attn.forward(tape, store, x, x, self_mask);
        let x = self.ln1.forward(tape, store, &x.add(&attended));
        let crossed = self.cross_attn.forward(tape, store, &x, memory, memory_mask);
        let x = self.ln2.forward(tape, store, &x.add(&crossed));
        let fed = self.ffn.forward(tape, store, &x);
        self.ln3.forward(tape, store, &x.add(&fed))
    }
}
