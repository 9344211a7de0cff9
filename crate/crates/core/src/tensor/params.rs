//! Named parameter storage shared by all model variants.
//!
//! Parameters live outside the tape: each forward pass leases them in as
//! leaf nodes and `backward_into` accumulates leaf gradients back here.
//! Access tracing exists so tests can prove which parameters a code path
//! touches (e.g. that greedy decoding never reads the recognition network).

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use super::Real;

/// Handle into a [`ParamStore`]. Two call sites holding the same id share
/// the same underlying weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
    tracing: AtomicBool,
    accessed: Vec<AtomicBool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            tracing: AtomicBool::new(false),
            accessed: Vec::new(),
        }
    }

    /// Registers a parameter; names must be unique within a store.
    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "param {name}: data length {} != shape product {numel}", data.len());
        assert!(
            !self.by_name.contains_key(name),
            "param {name}: duplicate name"
        );
        let idx = self.params.len();
        self.by_name.insert(name.to_string(), idx);
        self.params.push(Param {
            name: name.to_string(),
            shape,
            grad: vec![T::zero(); numel],
            data,
            trainable: true,
        });
        self.accessed.push(AtomicBool::new(false));
        ParamId(idx)
    }

    /// Registers from f64 values (init and checkpoints are f64 everywhere).
    pub fn register_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let converted = data.into_iter().map(T::from_f64).collect();
        self.register(name, shape, converted)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Global L2 norm of all trainable gradients, in f64.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.params {
            if !p.trainable {
                continue;
            }
            for g in &p.grad {
                let v = g.into_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = *g * f;
            }
        }
    }

    /// Deep copy of parameter values in registration order.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot size mismatch");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            assert_eq!(p.data.len(), s.len(), "snapshot shape mismatch on {}", p.name);
            p.data.copy_from_slice(s);
        }
    }

    // ── Access tracing ───────────────────────────────────────────────

    /// Starts recording which parameters get leased onto tapes.
    pub fn trace_accesses(&self) {
        for a in &self.accessed {
            a.store(false, Ordering::Relaxed);
        }
        self.tracing.store(true, Ordering::Relaxed);
    }

    /// Stops tracing and returns the sorted names of accessed parameters.
    pub fn take_accessed(&self) -> Vec<String> {
        self.tracing.store(false, Ordering::Relaxed);
        let mut names: Vec<String> = self
            .params
            .iter()
            .enumerate()
            .filter(|(i, _)| self.accessed[*i].load(Ordering::Relaxed))
            .map(|(_, p)| p.name.clone())
            .collect();
        names.sort();
        names
    }

    pub(crate) fn note_access(&self, id: ParamId) {
        if self.tracing.load(Ordering::Relaxed) {
            self.accessed[id.0].store(true, Ordering::Relaxed);
        }
    }
}

// ── Initializers ─────────────────────────────────────────────────────

pub mod init {
    use rand_chacha::ChaCha8Rng;

    use crate::rng;

    /// Xavier/Glorot uniform for a [fan_in, fan_out] weight matrix.
    pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        rng::uniform_symmetric(rng, fan_in * fan_out, limit)
    }

    pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
        rng::standard_normal(rng, n).into_iter().map(|v| v * std).collect()
    }

    pub fn zeros(n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("enc.w", vec![2, 3], vec![0.0; 6]);
        assert_eq!(store.lookup("enc.w"), Some(id));
        assert_eq!(store.get(id).numel(), 6);
        assert!(store.lookup("missing").is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate name")]
    fn duplicate_names_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", vec![1], vec![0.0]);
        store.register("w", vec![1], vec![0.0]);
    }

    #[test]
    fn snapshot_restores_values() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("w", vec![2], vec![1.0, 2.0]);
        let snap = store.snapshot();
        store.get_mut(id).data[0] = 99.0;
        store.restore(&snap);
        assert_eq!(store.get(id).data, vec![1.0, 2.0]);
    }

    #[test]
    fn access_trace_reports_touched_params() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.register("a", vec![1], vec![0.0]);
        let _b = store.register("b", vec![1], vec![0.0]);
        store.trace_accesses();
        store.note_access(a);
        assert_eq!(store.take_accessed(), vec!["a".to_string()]);
    }
}
