//! Finite-difference gradient verification.

use super::{Tape, Tensor, TensorId};

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences `(f(x + h·eᵢ) - f(x - h·eᵢ)) / 2h` for every element and
/// returns the largest relative error, `|a - n| / max(|a|, |n|, 1)`.
///
/// `f` must be deterministic and produce a scalar. Meaningful only away
/// from kinks (ReLU, max, |·|) of `f`.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f32) -> f32
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, id);
    assert_eq!(tape.value(out).numel(), 1, "check_gradients: f must be scalar");
    tape.backward(out).expect("scalar loss");
    let analytic = tape
        .grad(id)
        .expect("input requires grad; f must depend on it")
        .to_vec();

    let eval = |i: usize, delta: f32| -> f64 {
        let mut probe = x.clone();
        probe.data_mut()[i] += delta;
        let mut tape = Tape::new();
        let id = tape.leaf(probe);
        let out = f(&mut tape, id);
        tape.scalar_value(out) as f64
    };

    let mut max_rel = 0.0f32;
    for i in 0..x.numel() {
        let numeric = (eval(i, h) - eval(i, -h)) / (2.0 * h as f64);
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel as f32);
    }
    max_rel
}
