//! Central finite-difference validation of tape gradients.

use std::fmt;

use super::{ParamStore, Real, Tape, Tensor};

/// Worst-case comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub h: f64,
    pub denom_floor: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grad check (h = {:.1e}, {} tensors)", self.h, self.entries.len())?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:40} max rel err {:.3e} (analytic {:+.6e}, numeric {:+.6e} at [{}])",
                e.name, e.max_rel_err, e.analytic, e.numeric, e.worst_index
            )?;
        }
        Ok(())
    }
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be a pure function of the store's parameter values (any
/// randomness frozen by the caller). Relative error uses the denominator
/// `max(|analytic| + |numeric|, denom_floor)`.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    h: f64,
    denom_floor: f64,
    loss_fn: F,
) -> GradCheckReport
where
    T: Real,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Tensor<T>,
{
    store.zero_grads();
    let tape = Tape::new();
    let loss = loss_fn(&tape, store);
    loss.backward_into(store);

    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|&id| {
            let p = store.get(id);
            (p.name.clone(), p.grad.iter().map(|g| (*g).into_f64()).collect())
        })
        .collect();

    let mut entries = Vec::new();
    for (slot, &id) in ids.iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).data.len();
        let mut worst = GradCheckEntry {
            name: analytic[slot].0.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let original = store.get(id).data[i];
            store.get_mut(id).data[i] = original + T::from_f64(h);
            let plus = {
                let tape = Tape::new();
                loss_fn(&tape, store).scalar_f64()
            };
            store.get_mut(id).data[i] = original - T::from_f64(h);
            let minus = {
                let tape = Tape::new();
                loss_fn(&tape, store).scalar_f64()
            };
            store.get_mut(id).data[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[slot].1[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(denom_floor);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }

    GradCheckReport { entries, h, denom_floor }
}
