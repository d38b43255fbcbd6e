//! Finite-difference gradient verification.

use super::{NodeId, ParamStore, Tape};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

/// Compare analytic gradients against central finite differences for every
/// parameter element and return the maximum relative error.
///
/// `loss_fn` must rebuild the forward pass from the current parameter
/// values and return the scalar loss node. The relative error uses an
/// absolute noise floor: differences below 1e-8 count as zero, since that
/// is the rounding noise of the difference quotient itself at f64.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F) -> f64
where
    F: FnMut(&mut Tape, &ParamStore) -> NodeId,
{
    grad_check_verbose(store, loss_fn).0
}

/// Like [`grad_check`] but also reports which parameter had the worst
/// element and the analytic/numeric pair there.
pub fn grad_check_verbose<F>(store: &mut ParamStore, mut loss_fn: F) -> (f64, String)
where
    F: FnMut(&mut Tape, &ParamStore) -> NodeId,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    tape.backward(loss, store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.grad.clone()).collect();

    let mut max_err = 0.0;
    let mut worst = String::from("none");
    for pi in 0..store.len() {
        for ei in 0..store.get(pi).tensor.numel() {
            let orig = store.get(pi).tensor.values[ei];

            store.get_mut(pi).tensor.values[ei] = orig + FD_EPSILON;
            let mut t1 = Tape::new();
            let l1 = loss_fn(&mut t1, store);
            let v1 = t1.scalar(l1);

            store.get_mut(pi).tensor.values[ei] = orig - FD_EPSILON;
            let mut t2 = Tape::new();
            let l2 = loss_fn(&mut t2, store);
            let v2 = t2.scalar(l2);

            store.get_mut(pi).tensor.values[ei] = orig;

            let numeric = (v1 - v2) / (2.0 * FD_EPSILON);
            let a = analytic[pi][ei];
            let diff = (a - numeric).abs();
            let err = if diff < 1e-8 { 0.0 } else { diff / a.abs().max(numeric.abs()).max(1e-8) };
            if err > max_err {
                max_err = err;
                worst = format!(
                    "{}[{}]: analytic {:.6e} vs numeric {:.6e}",
                    store.get(pi).name,
                    ei,
                    a,
                    numeric
                );
            }
        }
    }
    (max_err, worst)
}
