//! Optimization: bias-corrected Adam with global-norm clipping, MLE
//! pretraining, name-matched warm starting, and the variational training
//! loop with KL annealing, periodic validation, and early stopping.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::batchify;
use crate::model::{AnyModel, Example, Variant};
use crate::rng::{self, Stream};
use crate::tensor::{ParamStore, Real, Tape};
use crate::variational::AnnealSchedule;
use crate::{Error, Result};

// ── Config ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// KL weight reaches 1 at this step (0 = no annealing, weight 1 always).
    pub anneal_full_steps: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub val_interval: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_steps: 4000,
            anneal_full_steps: 10_000,
            patience: 5,
            val_interval: 200,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("val_interval", self.val_interval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Bias-corrected Adam over a parameter store. Moments are kept in f64
/// regardless of the training dtype.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold.
    pub clip: f64,
    /// Steps aborted because a gradient was non-finite.
    pub skipped: usize,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Parameters updated; pre-clip global gradient norm.
    Applied { grad_norm: f64 },
    /// Non-finite gradient: parameters untouched, step counted as skipped.
    SkippedNonFinite,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>, tc: &TrainConfig) -> Adam {
        Adam {
            m: store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
            lr: tc.lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
            clip: tc.grad_clip,
            skipped: 0,
        }
    }

    /// Applies one update from the gradients accumulated in the store,
    /// then zeroes them.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> StepOutcome {
        let norm = store.grad_norm();
        if !norm.is_finite() {
            self.skipped += 1;
            store.zero_grads();
            log::warn!("adam: non-finite gradient norm, step skipped ({} so far)", self.skipped);
            return StepOutcome::SkippedNonFinite;
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.data.len() {
                let g = p.grad[i].into_f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.data[i] = T::from_f64(p.data[i].into_f64() - update);
            }
        }
        store.zero_grads();
        StepOutcome::Applied { grad_norm: norm }
    }
}

// ── Warm start ───────────────────────────────────────────────────────

/// Which target parameters were copied from the source vs left at their
/// fresh initialization. copied + fresh partitions the target exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarmStartReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

impl WarmStartReport {
    pub fn summary(&self) -> String {
        format!(
            "warm start: {} copied, {} fresh (fresh: {})",
            self.copied.len(),
            self.fresh.len(),
            self.fresh.join(", ")
        )
    }
}

/// Copies every name-matched parameter from `source` into `target`.
/// A matched name with a different shape is fatal.
pub fn warm_start<T: Real>(
    target: &mut ParamStore<T>,
    source: &ParamStore<T>,
) -> Result<WarmStartReport> {
    let mut report = WarmStartReport { copied: Vec::new(), fresh: Vec::new() };
    let names: Vec<String> = target.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let dst = target.lookup(&name).unwrap();
        match source.lookup(&name) {
            Some(src) => {
                let sp = source.get(src);
                if sp.shape != target.get(dst).shape {
                    return Err(Error::Train(format!(
                        "warm start: shape mismatch on {name}: source {:?} vs target {:?}",
                        sp.shape,
                        target.get(dst).shape
                    )));
                }
                target.get_mut(dst).data = sp.data.clone();
                report.copied.push(name);
            }
            None => report.fresh.push(name),
        }
    }
    Ok(report)
}

// ── Run log ──────────────────────────────────────────────────────────

/// Append-only training record, serialized as a single CSV with a `kind`
/// column ("step" or "val"; inapplicable cells empty).
#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Step {
        step: usize,
        loss: f64,
        rec: f64,
        kl: f64,
        kl_weight: f64,
        aux: f64,
        grad_norm: f64,
    },
    Val {
        step: usize,
        ppl: f64,
        kld: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,step,loss,rec,kl,kl_weight,aux,grad_norm,ppl,kld\n");
        for r in &self.records {
            match r {
                LogRecord::Step { step, loss, rec, kl, kl_weight, aux, grad_norm } => {
                    out.push_str(&format!(
                        "step,{step},{loss},{rec},{kl},{kl_weight},{aux},{grad_norm},,\n"
                    ));
                }
                LogRecord::Val { step, ppl, kld } => {
                    out.push_str(&format!("val,{step},,,,,,,{ppl},{kld}\n"));
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

// ── Training loop ────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub log: RunLog,
    /// Step whose validation metric was best (checkpoint on disk).
    pub best_step: usize,
    pub best_metric: f64,
    pub steps_run: usize,
    pub skipped_steps: usize,
    pub stopped_early: bool,
}

struct Validation {
    ppl: f64,
    kld: f64,
    /// Early-stop objective: PPL for the baseline, per-token (rec + kl)
    /// at full KL weight for the variational models.
    metric: f64,
}

fn validate<T: Real>(model: &AnyModel, store: &ParamStore<T>, val: &[Example]) -> Validation {
    let mut nll = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens = 0usize;
    for ex in val {
        let tape = Tape::new();
        let terms = model.loss(&tape, store, ex, 1.0, None);
        nll += terms.rec;
        kl_sum += terms.kl;
        tokens += terms.target_tokens;
    }
    let ppl = (nll / tokens as f64).exp();
    let kld = kl_sum / val.len() as f64;
    let metric = match model.variant() {
        Variant::Baseline => ppl,
        Variant::Gvt | Variant::Svt => (nll + kl_sum) / tokens as f64,
    };
    Validation { ppl, kld, metric }
}

/// Standard-normal draws sized for one example's latent (GVT: one row;
/// SVT: one per decoder position).
pub fn noise_for_example(
    model: &AnyModel,
    ex: &Example,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<Vec<f64>> {
    let latent = model.config().latent_dim;
    match model.variant() {
        Variant::Baseline => None,
        Variant::Gvt => Some(rng::standard_normal(rng, latent)),
        Variant::Svt => Some(rng::standard_normal(rng, (ex.response.len() + 1) * latent)),
    }
}

/// Trains `model` in place, checkpointing to `ckpt_path` at every new best
/// validation metric. NaN loss is fatal; the best checkpoint so far stays
/// on disk. Seed-deterministic end to end.
pub fn train<T: Real>(
    store: &mut ParamStore<T>,
    model: &AnyModel,
    train_data: &[Example],
    val_data: &[Example],
    tc: &TrainConfig,
    ckpt_path: &Path,
    start_step: usize,
) -> Result<TrainOutcome> {
    tc.validate()?;
    assert!(!train_data.is_empty(), "train: empty training set");
    assert!(!val_data.is_empty(), "train: empty validation set");

    let anneal = AnnealSchedule {
        full_at: match model.variant() {
            Variant::Baseline => 0, // weight irrelevant: kl = 0
            _ => tc.anneal_full_steps,
        },
    };
    let mut adam = Adam::new(store, tc);
    let mut log = RunLog::default();
    let mut best_metric = f64::INFINITY;
    let mut best_step = start_step;
    let mut checks_without_improvement = 0usize;
    let mut stopped_early = false;

    let mut step = start_step;
    let mut epoch = 0u64;
    'outer: while step < start_step + tc.max_steps {
        // Deterministic shuffle per epoch, then length-bucketed batches.
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng::rng_for(tc.seed, Stream::DataOrder, epoch));
        let shuffled: Vec<Example> = order.iter().map(|&i| train_data[i].clone()).collect();
        let batches = batchify(&shuffled, tc.batch_size);

        for batch in &batches {
            if step >= start_step + tc.max_steps {
                break 'outer;
            }
            let kl_weight = anneal.weight(step);
            let mut noise_rng = rng::rng_for(tc.seed, Stream::LatentNoise, step as u64);

            let mut loss_sum = 0.0;
            let mut rec_sum = 0.0;
            let mut kl_sum = 0.0;
            let mut aux_sum = 0.0;
            for ex in &batch.examples {
                let tape = Tape::new();
                let noise = noise_for_example(model, ex, &mut noise_rng);
                let terms = model.loss(&tape, store, ex, kl_weight, noise.as_deref());
                let total = terms.total.scalar_f64();
                if !total.is_finite() {
                    return Err(Error::Train(format!(
                        "loss became non-finite at step {step}; best checkpoint (step {best_step}) retained at {}",
                        ckpt_path.display()
                    )));
                }
                loss_sum += total;
                rec_sum += terms.rec;
                kl_sum += terms.kl;
                aux_sum += terms.aux;
                terms.total.backward_into(store);
            }
            // Mean over the batch: scale accumulated gradients once.
            let n = batch.examples.len() as f64;
            store.scale_grads(1.0 / n);

            let grad_norm = match adam.step(store) {
                StepOutcome::Applied { grad_norm } => grad_norm,
                StepOutcome::SkippedNonFinite => f64::NAN,
            };
            log.records.push(LogRecord::Step {
                step,
                loss: loss_sum / n,
                rec: rec_sum / n,
                kl: kl_sum / n,
                kl_weight,
                aux: aux_sum / n,
                grad_norm,
            });
            step += 1;

            if step % tc.val_interval == 0 || step == start_step + tc.max_steps {
                let v = validate(model, store, val_data);
                log.records.push(LogRecord::Val { step, ppl: v.ppl, kld: v.kld });
                if v.metric < best_metric {
                    best_metric = v.metric;
                    best_step = step;
                    checks_without_improvement = 0;
                    checkpoint::save(ckpt_path, store, model.config(), step as u64)?;
                } else {
                    checks_without_improvement += 1;
                    if checks_without_improvement >= tc.patience {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
        epoch += 1;
    }

    // Never finish without a checkpoint, even if validation never ran or
    // never improved within the budget.
    if best_metric.is_infinite() {
        let v = validate(model, store, val_data);
        log.records.push(LogRecord::Val { step, ppl: v.ppl, kld: v.kld });
        best_metric = v.metric;
        best_step = step;
        checkpoint::save(ckpt_path, store, model.config(), step as u64)?;
    }

    Ok(TrainOutcome {
        log,
        best_step,
        best_metric,
        steps_run: step - start_step,
        skipped_steps: adam.skipped,
        stopped_early,
    })
}

/// Paths produced by a training run.
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub run_log: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_config, ModelConfig};

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", vec![1], vec![0.0]);
        let tc = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let mut adam = Adam::new(&store, &tc);
        // d/dw (w - 3)^2 at w = 0 is -6.
        store.get_mut(w).grad[0] = -6.0;
        // Clip rescales to norm 1; the first Adam step is lr * sign(g)
        // regardless of magnitude (bias correction cancels).
        match adam.step(&mut store) {
            StepOutcome::Applied { grad_norm } => assert!((grad_norm - 6.0).abs() < 1e-12),
            other => panic!("unexpected outcome {other:?}"),
        }
        let w_val = store.get(w).data[0];
        assert!(
            (w_val - 0.1).abs() < 1e-6,
            "first step should move by ~lr toward the minimum, got {w_val}"
        );
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", vec![1], vec![0.0]);
        let tc = TrainConfig { lr: 0.1, grad_clip: 1e9, ..TrainConfig::default() };
        let mut adam = Adam::new(&store, &tc);
        for _ in 0..200 {
            let tape = Tape::new();
            let wt = tape.param(&store, w);
            let loss = wt.add_scalar(-3.0).mul(&wt.add_scalar(-3.0)).sum_all();
            loss.backward_into(&mut store);
            adam.step(&mut store);
        }
        let w_val = store.get(w).data[0];
        assert!((w_val - 3.0).abs() < 0.1, "w = {w_val} after 200 steps");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_fixed() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", vec![2], vec![1.5, -2.5]);
        let tc = TrainConfig::default();
        let mut adam = Adam::new(&store, &tc);
        adam.step(&mut store);
        assert_eq!(store.get(w).data, vec![1.5, -2.5]);
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", vec![1], vec![1.0]);
        let tc = TrainConfig::default();
        let mut adam = Adam::new(&store, &tc);
        store.get_mut(w).grad[0] = f64::NAN;
        assert_eq!(adam.step(&mut store), StepOutcome::SkippedNonFinite);
        assert_eq!(store.get(w).data, vec![1.0]);
        assert_eq!(adam.skipped, 1);
        // Gradients were cleared; the next step is a clean zero-grad step.
        assert!(matches!(adam.step(&mut store), StepOutcome::Applied { .. }));
    }

    #[test]
    fn grad_clip_rescales_to_threshold() {
        // With adam_eps = 1 the first-step update is lr * |g| / (|g| + 1)
        // per coordinate, so the clipped magnitude is directly observable:
        // (30, 40) has norm 50 and must enter Adam as (0.6, 0.8).
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", vec![2], vec![0.0, 0.0]);
        let tc =
            TrainConfig { lr: 1.0, grad_clip: 1.0, adam_eps: 1.0, ..TrainConfig::default() };
        let mut adam = Adam::new(&store, &tc);
        store.get_mut(w).grad = vec![30.0, 40.0];
        match adam.step(&mut store) {
            StepOutcome::Applied { grad_norm } => assert!((grad_norm - 50.0).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
        let d = store.get(w).data.clone();
        assert!((d[0] - (-0.6 / 1.6)).abs() < 1e-12, "d0 = {}", d[0]);
        assert!((d[1] - (-0.8 / 1.8)).abs() < 1e-12, "d1 = {}", d[1]);
    }

    fn toy_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                context: vec![10 + (i % 3), 13],
                response: vec![20 + (i % 4), 24, 25],
                meta: None,
            })
            .collect()
    }

    fn quick_tc(max_steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            max_steps,
            anneal_full_steps: 50,
            val_interval: 10,
            patience: 50,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = {
            let mut c = tiny_config(crate::model::Variant::Gvt);
            c.meta_labels.clear();
            c
        };
        let run = || {
            let mut store: ParamStore<f64> = ParamStore::new();
            let model = AnyModel::build(&mut store, &cfg, 21);
            let data = toy_examples(8);
            let dir = tempfile::tempdir().unwrap();
            let out = train(
                &mut store,
                &model,
                &data,
                &data,
                &quick_tc(20),
                &dir.path().join("m.ckpt"),
                0,
            )
            .unwrap();
            (out.log.to_csv(), store.snapshot())
        };
        let (log_a, snap_a) = run();
        let (log_b, snap_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(snap_a, snap_b);
    }

    #[test]
    fn kl_weight_anneals_monotonically_in_log() {
        let cfg = {
            let mut c = tiny_config(crate::model::Variant::Svt);
            c.meta_labels.clear();
            c
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = AnyModel::build(&mut store, &cfg, 22);
        let data = toy_examples(8);
        let dir = tempfile::tempdir().unwrap();
        let mut tc = quick_tc(60);
        tc.anneal_full_steps = 40;
        let out = train(&mut store, &model, &data, &data, &tc, &dir.path().join("m.ckpt"), 0).unwrap();
        let weights: Vec<f64> = out
            .log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { kl_weight, .. } => Some(*kl_weight),
                _ => None,
            })
            .collect();
        assert!(weights.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*weights.last().unwrap(), 1.0);
        assert_eq!(weights[0], 0.0);
    }

    #[test]
    fn early_stop_keeps_best_checkpoint_not_last() {
        // Train a baseline on a tiny corpus long enough to improve, then the
        // metric plateaus and patience trips: the checkpoint on disk must
        // carry the best validation step, not the final one.
        let cfg = {
            let mut c = tiny_config(crate::model::Variant::Baseline);
            c.meta_labels.clear();
            c
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = AnyModel::build(&mut store, &cfg, 23);
        let data = toy_examples(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut tc = quick_tc(400);
        tc.patience = 2;
        tc.val_interval = 5;
        let out = train(&mut store, &model, &data, &data, &tc, &path, 0).unwrap();
        let loaded: checkpoint::LoadedCheckpoint<f64> = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step as usize, out.best_step);
        if out.stopped_early {
            assert!(out.best_step < out.steps_run);
        }
    }

    #[test]
    fn warm_start_partitions_and_copies() {
        let base_cfg = tiny_config(crate::model::Variant::Baseline);
        let mut base_store: ParamStore<f64> = ParamStore::new();
        let _ = AnyModel::build(&mut base_store, &base_cfg, 31);

        let gvt_cfg = tiny_config(crate::model::Variant::Gvt);
        let mut gvt_store: ParamStore<f64> = ParamStore::new();
        let _ = AnyModel::build(&mut gvt_store, &gvt_cfg, 32);

        let report = warm_start(&mut gvt_store, &base_store).unwrap();
        assert_eq!(
            report.copied.len() + report.fresh.len(),
            gvt_store.iter().count()
        );
        assert!(report.copied.iter().any(|n| n == "encoder.layer0.self_attn.wq"));
        assert!(report.fresh.iter().any(|n| n.starts_with("prior_net.")));
        assert!(report.fresh.iter().any(|n| n.starts_with("response_encoder.")));

        // Copied weights bitwise equal.
        let name = "encoder.layer1.ffn.l1.w";
        let a = base_store.get(base_store.lookup(name).unwrap()).data.clone();
        let b = gvt_store.get(gvt_store.lookup(name).unwrap()).data.clone();
        assert_eq!(a, b);
    }

    #[test]
    fn warm_start_shape_mismatch_is_fatal() {
        let mut src: ParamStore<f64> = ParamStore::new();
        src.register("layer.w", vec![2, 2], vec![1.0; 4]);
        let mut dst: ParamStore<f64> = ParamStore::new();
        dst.register("layer.w", vec![2, 3], vec![0.0; 6]);
        assert!(warm_start(&mut dst, &src).is_err());
    }

    #[test]
    fn nan_loss_is_fatal_but_keeps_checkpoint() {
        let cfg = {
            let mut c = tiny_config(crate::model::Variant::Baseline);
            c.meta_labels.clear();
            c
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = AnyModel::build(&mut store, &cfg, 24);
        let data = toy_examples(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");

        // Run a short healthy phase so a checkpoint exists.
        let mut tc = quick_tc(10);
        tc.val_interval = 5;
        train(&mut store, &model, &data, &data, &tc, &path, 0).unwrap();
        assert!(path.exists());

        // Drive the loss to +inf through finite inputs (giant negative
        // logits on the target tokens overflow the cross-entropy sum), the
        // way real divergence arrives; the run must fail fast and not
        // delete the existing checkpoint. (A NaN *parameter* is a
        // programmer error and trips op contract panics instead.)
        let id = store.lookup("output_proj.b").unwrap();
        for b in &mut store.get_mut(id).data[1..] {
            *b = -1.7e308;
        }
        let err = match train(&mut store, &model, &data, &data, &tc, &path, 0) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("training survived a NaN parameter"),
        };
        assert!(err.contains("non-finite"), "{err}");
        assert!(path.exists());
        assert!(checkpoint::load::<f64>(&path).is_ok());
    }

    #[test]
    fn run_log_csv_shape() {
        let mut log = RunLog::default();
        log.records.push(LogRecord::Step {
            step: 0,
            loss: 1.5,
            rec: 1.0,
            kl: 0.5,
            kl_weight: 0.1,
            aux: 0.25,
            grad_norm: 2.0,
        });
        log.records.push(LogRecord::Val { step: 1, ppl: 30.0, kld: 0.4 });
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,step,loss,rec,kl,kl_weight,aux,grad_norm,ppl,kld");
        assert_eq!(lines[1], "step,0,1.5,1,0.5,0.1,0.25,2,,");
        assert_eq!(lines[2], "val,1,,,,,,,30,0.4");
    }

    #[test]
    fn resumed_run_continues_step_counter() {
        let cfg: ModelConfig = {
            let mut c = tiny_config(crate::model::Variant::Baseline);
            c.meta_labels.clear();
            c
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = AnyModel::build(&mut store, &cfg, 25);
        let data = toy_examples(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut tc = quick_tc(10);
        tc.val_interval = 10;
        train(&mut store, &model, &data, &data, &tc, &path, 0).unwrap();
        let loaded: checkpoint::LoadedCheckpoint<f64> = checkpoint::load(&path).unwrap();
        let resumed_from = loaded.step as usize;
        assert_eq!(resumed_from, 10);

        let out = train(&mut store, &model, &data, &data, &tc, &path, resumed_from).unwrap();
        match out.log.records.first().unwrap() {
            LogRecord::Step { step, .. } => assert_eq!(*step, 10),
            other => panic!("unexpected first record {other:?}"),
        }
    }
}
