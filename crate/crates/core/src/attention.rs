//! Multi-head scaled dot-product attention with explicit boolean masks.
//!
//! Masks enter the graph through `masked_row_softmax`, which assigns masked
//! entries an exact zero weight. That makes the no-peek guarantees testable
//! bitwise: a masked key position cannot influence the output at all, not
//! merely by a negligible amount.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::tensor::{init, ParamId, ParamStore, Real, Tape, Tensor};

/// Self/cross-attention mask family. Key-side padding composes with both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Query at position i may attend to keys j <= i. Requires square shape.
    Causal,
    /// Every query may attend to every valid key.
    Full,
}

/// Builds a row-major [q_len x k_len] permission mask.
///
/// `key_valid[j]` is false for padded key positions; those columns are
/// blocked for every query regardless of `kind`.
pub fn attention_mask(kind: MaskKind, q_len: usize, k_len: usize, key_valid: &[bool]) -> Rc<Vec<bool>> {
    assert_eq!(key_valid.len(), k_len, "attention_mask: key_valid length {} vs k_len {k_len}", key_valid.len());
    if kind == MaskKind::Causal {
        assert_eq!(q_len, k_len, "attention_mask: causal mask must be square, got {q_len}x{k_len}");
    }
    let mut mask = vec![false; q_len * k_len];
    for i in 0..q_len {
        for j in 0..k_len {
            let allowed = match kind {
                MaskKind::Causal => j <= i,
                MaskKind::Full => true,
            };
            mask[i * k_len + j] = allowed && key_valid[j];
        }
    }
    Rc::new(mask)
}

/// All key positions valid (no padding).
pub fn all_valid(len: usize) -> Vec<bool> {
    vec![true; len]
}

/// Scaled dot-product attention for one head; returns (output, weights).
///
/// q: [Lq x d], k: [Lk x d], v: [Lk x dv], mask: [Lq x Lk].
pub fn scaled_dot_attention_with_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Rc<Vec<bool>>,
) -> (Tensor<T>, Tensor<T>) {
    let d = q.shape()[1];
    assert_eq!(k.shape()[1], d, "attention: q/k width mismatch");
    assert_eq!(k.shape()[0], v.shape()[0], "attention: k/v length mismatch");
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul(&k.transpose()).mul_scalar(scale);
    let weights = scores.masked_row_softmax(mask);
    let out = weights.matmul(v);
    (out, weights)
}

pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Rc<Vec<bool>>,
) -> Tensor<T> {
    scaled_dot_attention_with_weights(q, k, v, mask).0
}

/// Multi-head attention block: shared input projections, per-head slicing,
/// concatenation, and an output projection back to `d_model`.
///
/// The projection width is `n_heads * d_head`, which need not equal
/// `d_model`; the output projection bridges back.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    /// Registers fresh Xavier-initialized projections under `prefix`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        d_head: usize,
    ) -> Self {
        let inner = n_heads * d_head;
        let proj = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize| {
            store.register_f64(
                &format!("{prefix}.{name}"),
                vec![rows, cols],
                init::xavier_uniform(rng, rows, cols),
            )
        };
        MultiHeadAttention {
            wq: proj(store, rng, "wq", d_model, inner),
            wk: proj(store, rng, "wk", d_model, inner),
            wv: proj(store, rng, "wv", d_model, inner),
            wo: proj(store, rng, "wo", inner, d_model),
            n_heads,
            d_head,
        }
    }

    /// Re-binds to projections already present in the store (checkpoint load).
    pub fn from_store<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        n_heads: usize,
        d_head: usize,
    ) -> Self {
        let find = |name: &str| {
            store
                .lookup(&format!("{prefix}.{name}"))
                .unwrap_or_else(|| panic!("attention: missing parameter {prefix}.{name}"))
        };
        MultiHeadAttention {
            wq: find("wq"),
            wk: find("wk"),
            wv: find("wv"),
            wo: find("wo"),
            n_heads,
            d_head,
        }
    }

    /// Attends `query_input` over `kv_input`; both are [len x d_model].
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        query_input: &Tensor<T>,
        kv_input: &Tensor<T>,
        mask: &Rc<Vec<bool>>,
    ) -> Tensor<T> {
        self.forward_with_weights(tape, store, query_input, kv_input, mask).0
    }

    /// `forward` that also returns per-head attention weights.
    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        query_input: &Tensor<T>,
        kv_input: &Tensor<T>,
        mask: &Rc<Vec<bool>>,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        let q = query_input.matmul(&tape.param(store, self.wq));
        let k = kv_input.matmul(&tape.param(store, self.wk));
        let v = kv_input.matmul(&tape.param(store, self.wv));
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * self.d_head, self.d_head);
            let kh = k.slice_cols(h * self.d_head, self.d_head);
            let vh = v.slice_cols(h * self.d_head, self.d_head);
            let (out, w) = scaled_dot_attention_with_weights(&qh, &kh, &vh, mask);
            heads.push(out);
            weights.push(w);
        }
        let concat = tape.concat_cols(&heads);
        (concat.matmul(&tape.param(store, self.wo)), weights)
    }
}

/// Sinusoidal position table, row-major [max_len x d_model].
///
/// Even columns carry sin(pos / 10000^(2i/d)), odd columns the matching cos,
/// so row 0 is [0, 1, 0, 1, ...].
pub fn positional_encoding(max_len: usize, d_model: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for c in 0..d_model {
            let pair = (c / 2) as f64;
            let rate = 10000.0f64.powf(2.0 * pair / d_model as f64);
            let angle = pos as f64 / rate;
            table[pos * d_model + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check;

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(3, 4);
        // Row 0: sin(0), cos(0) pairs.
        assert_eq!(&pe[0..4], &[0.0, 1.0, 0.0, 1.0]);
        // Row 1: [sin(1), cos(1), sin(1/100), cos(1/100)].
        let expected = [1.0f64.sin(), 1.0f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, e) in pe[4..8].iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_queries_average_permitted_values() {
        let tape: Tape<f64> = Tape::new();
        let q = tape.constant(vec![0.0; 2], vec![1, 2]);
        let k = tape.constant(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![3, 2]);
        let v = tape.constant(vec![3.0, 0.0, 6.0, 9.0, 0.0, 3.0], vec![3, 2]);
        let mask = attention_mask(MaskKind::Full, 1, 3, &all_valid(3));
        let (out, w) = scaled_dot_attention_with_weights(&q, &k, &v, &mask);
        for &wi in &w.values() {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
        let o = out.values();
        assert!((o[0] - 3.0).abs() < 1e-12);
        assert!((o[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_zeroes_future_weights_exactly() {
        let mut r = rng::rng_for(3, rng::Stream::ParamInit, 0);
        let tape: Tape<f64> = Tape::new();
        let q = tape.constant(rng::uniform_symmetric(&mut r, 8, 1.0), vec![4, 2]);
        let k = tape.constant(rng::uniform_symmetric(&mut r, 8, 1.0), vec![4, 2]);
        let v = tape.constant(rng::uniform_symmetric(&mut r, 8, 1.0), vec![4, 2]);
        let mask = attention_mask(MaskKind::Causal, 4, 4, &all_valid(4));
        let (_, w) = scaled_dot_attention_with_weights(&q, &k, &v, &mask);
        let wv = w.values();
        for i in 0..4 {
            let mut row_sum = 0.0;
            for j in 0..4 {
                if j > i {
                    assert_eq!(wv[i * 4 + j], 0.0, "future weight at ({i},{j}) not exactly zero");
                } else {
                    row_sum += wv[i * 4 + j];
                }
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_outputs_ignore_future_inputs_bitwise() {
        let mut r = rng::rng_for(5, rng::Stream::ParamInit, 1);
        let x_vals = rng::uniform_symmetric(&mut r, 12, 1.0);
        let mut y_vals = x_vals.clone();
        // Perturb only the last position's features.
        y_vals[8..].iter_mut().for_each(|v| *v += 7.5);

        let run = |vals: &[f64]| {
            let tape: Tape<f64> = Tape::new();
            let x = tape.constant_f64(vals.to_vec(), vec![3, 4]);
            let mask = attention_mask(MaskKind::Causal, 3, 3, &all_valid(3));
            scaled_dot_attention(&x, &x, &x, &mask).values()
        };
        let a = run(&x_vals);
        let b = run(&y_vals);
        // First two output rows (8 scalars) must match bitwise.
        for i in 0..8 {
            assert_eq!(a[i].to_bits(), b[i].to_bits(), "position {i} leaked future info");
        }
    }

    #[test]
    fn padded_keys_cannot_influence_output() {
        let mut r = rng::rng_for(9, rng::Stream::ParamInit, 2);
        let q_vals = rng::uniform_symmetric(&mut r, 4, 1.0);
        let k_vals = rng::uniform_symmetric(&mut r, 8, 1.0);
        let v_vals = rng::uniform_symmetric(&mut r, 8, 1.0);

        let run = |k_pad: f64, v_pad: f64| {
            let tape: Tape<f64> = Tape::new();
            let q = tape.constant_f64(q_vals.clone(), vec![1, 4]);
            let mut kk = k_vals.clone();
            let mut vv = v_vals.clone();
            kk.extend([k_pad; 4]);
            vv.extend([v_pad; 4]);
            let k = tape.constant_f64(kk, vec![3, 4]);
            let v = tape.constant_f64(vv, vec![3, 4]);
            let mask = attention_mask(MaskKind::Full, 1, 3, &[true, true, false]);
            scaled_dot_attention(&q, &k, &v, &mask).values()
        };
        let a = run(0.0, 0.0);
        let b = run(123.0, -55.0);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "padded key leaked into output");
        }
    }

    #[test]
    fn multi_head_shapes_bridge_projection_width() {
        // d_model 6, 2 heads x width 4 => inner 8 != 6.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng::rng_for(1, rng::Stream::ParamInit, 0);
        let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", 6, 2, 4);
        let tape = Tape::new();
        let x = tape.constant(rng::uniform_symmetric(&mut r, 18, 1.0), vec![3, 6]);
        let mask = attention_mask(MaskKind::Causal, 3, 3, &all_valid(3));
        let out = mha.forward(&tape, &store, &x, &x, &mask);
        assert_eq!(out.shape(), vec![3, 6]);
        assert_eq!(store.get(mha.wq).shape, vec![6, 8]);
        assert_eq!(store.get(mha.wo).shape, vec![8, 6]);
    }

    #[test]
    fn multi_head_gradients_match_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng::rng_for(2, rng::Stream::ParamInit, 0);
        let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", 4, 2, 3);
        let x_vals = rng::uniform_symmetric(&mut r, 12, 1.0);

        let report = grad_check(&mut store, 1e-5, 1e-8, |tape, store| {
            let x = tape.constant_f64(x_vals.clone(), vec![3, 4]);
            let mask = attention_mask(MaskKind::Causal, 3, 3, &all_valid(3));
            let out = mha.forward(tape, store, &x, &x, &mask);
            // Non-uniform weighting distinguishes rows.
            let weights = tape.constant(vec![0.3, -1.0, 0.7, 0.2, 1.5, -0.4, 0.9, 0.1, -0.6, 1.1, 0.5, -0.2], vec![3, 4]);
            out.mul(&weights).sum_all()
        });
        assert!(report.passed(1e-4), "{report}");
    }

    #[test]
    #[should_panic(expected = "causal mask must be square")]
    fn causal_mask_rejects_rectangular() {
        let _ = attention_mask(MaskKind::Causal, 2, 3, &all_valid(3));
    }
}
