//! Central finite-difference gradient verification.
//!
//! Used by unit tests throughout the crate and by the acceptance suite:
//! a graph builder is evaluated analytically once, then every input element
//! is perturbed by ±h and the resulting slope compared to the tape gradient.

use super::data::Tensor;
use super::tape::{Tape, Var};

/// Outcome of one compared element.
#[derive(Debug)]
pub struct GradMismatch {
    pub input_index: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare tape gradients of a scalar-valued graph against central finite
/// differences for every element of every input. Returns mismatches above
/// `rel_tol` (with `abs_floor` guarding near-zero gradients).
pub fn compare_gradients<F>(
    inputs: &[Tensor<f64>],
    build: F,
    rel_tol: f64,
    abs_floor: f64,
) -> Vec<GradMismatch>
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &vars);
    assert_eq!(tape.value(out).numel(), 1, "gradient check target must be scalar");
    let grads = tape.backward(out);

    let eval = |points: &[Tensor<f64>]| -> f64 {
        let t = Tape::<f64>::new();
        let vs: Vec<Var> = points.iter().map(|p| t.constant(p.clone())).collect();
        let o = build(&t, &vs);
        t.value(o).data()[0]
    };

    let h = 1e-5;
    let mut mismatches = Vec::new();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[ii], input.shape());
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(abs_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > rel_tol {
                mismatches.push(GradMismatch {
                    input_index: ii,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    mismatches
}

/// Assert-style wrapper with the tolerance used across the crate
/// (relative error 1e-4 at 64-bit precision).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let bad = compare_gradients(inputs, build, 1e-4, 1e-6);
    assert!(
        bad.is_empty(),
        "gradient mismatches: {:?}",
        &bad[..bad.len().min(5)]
    );
}
