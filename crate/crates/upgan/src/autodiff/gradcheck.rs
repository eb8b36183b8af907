//! Central-difference gradient verification.

use std::collections::BTreeMap;

use super::{ParameterStore, Tape, Var};

/// Compares tape gradients against central finite differences for every
/// coordinate of the named parameters and returns the worst relative error.
///
/// `loss_fn` must build the loss on the provided tape and be deterministic
/// in the store contents (fix any sampled noise outside the closure).
pub fn grad_check<F>(store: &mut ParameterStore, names: &[&str], step: f64, mut loss_fn: F) -> f64
where
    F: FnMut(&ParameterStore, &mut Tape) -> Var,
{
    for name in names {
        store.get_mut(name).grad.fill(0.0);
    }
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape);
    tape.backward(loss, store);
    let analytic: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| (n.to_string(), store.grad(n).data().to_vec()))
        .collect();

    let mut worst = 0.0f64;
    for name in names {
        for i in 0..store.value(name).len() {
            let orig = store.value(name).data()[i];

            store.get_mut(name).value.data_mut()[i] = orig + step;
            let mut tp = Tape::new();
            let lp = loss_fn(store, &mut tp);
            let up = tp.scalar_value(lp);

            store.get_mut(name).value.data_mut()[i] = orig - step;
            let mut tm = Tape::new();
            let lm = loss_fn(store, &mut tm);
            let down = tm.scalar_value(lm);

            store.get_mut(name).value.data_mut()[i] = orig;

            let fd = (up - down) / (2.0 * step);
            let a = analytic[*name][i];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}
