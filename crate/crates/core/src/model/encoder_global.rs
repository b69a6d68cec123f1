//! Global branch: a stacked causal dilated convolution network over the full
//! window with per-layer residuals, a linear projection to width d, and
//! adaptive max pooling down to the common token count.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Pad, Scalar, Var};

use super::{init_uniform, init_zeros, Bound, ParamStore};

const PREFIX: &str = "global";
const DILATIONS: [usize; 3] = [1, 2, 4];

/// Register the global-branch parameters: 3 causal conv layers (kernel 3,
/// dilations 1/2/4), a 1x1 skip projection for the channel change of the
/// first layer, and the output projection to d.
pub fn register_global_branch<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    m: usize,
    hidden: usize,
    d: usize,
) {
    store.register(format!("{PREFIX}.tcn0.w"), init_uniform(rng, &[hidden, m, 3], m * 3), true);
    store.register(format!("{PREFIX}.tcn0.b"), init_zeros(&[hidden]), true);
    store.register(format!("{PREFIX}.tcn0.skip.w"), init_uniform(rng, &[hidden, m, 1], m), true);
    store.register(format!("{PREFIX}.tcn1.w"), init_uniform(rng, &[hidden, hidden, 3], hidden * 3), true);
    store.register(format!("{PREFIX}.tcn1.b"), init_zeros(&[hidden]), true);
    store.register(format!("{PREFIX}.tcn2.w"), init_uniform(rng, &[hidden, hidden, 3], hidden * 3), true);
    store.register(format!("{PREFIX}.tcn2.b"), init_zeros(&[hidden]), true);
    store.register(format!("{PREFIX}.proj.w"), init_uniform(rng, &[hidden, d], hidden), true);
    store.register(format!("{PREFIX}.proj.b"), init_zeros(&[d]), true);
}

/// Forward over a window (B, W, M) producing (B, l_max, d).
pub fn global_branch_forward<T: Scalar>(
    bound: &Bound<'_, T>,
    window: Var,
    l_max: usize,
) -> Result<Var> {
    let tape = bound.tape;
    let shape = tape.shape(window);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("window must be (B, W, M), got {shape:?}")));
    }
    let w = shape[1];
    if l_max > w {
        return Err(Error::Shape(format!("l_max {l_max} exceeds window length {w}")));
    }
    let registered_m = tape.shape(bound.var(&format!("{PREFIX}.tcn0.w")))[1];
    if registered_m != shape[2] {
        return Err(Error::Shape(format!(
            "global branch registered for {registered_m} channels, window has {}",
            shape[2]
        )));
    }

    let x = tape.permute(window, &[0, 2, 1]); // (B, M, W)

    // Layer 0 changes channel count; its residual path is a 1x1 projection.
    let c0 = tape.conv1d(
        x,
        bound.var(&format!("{PREFIX}.tcn0.w")),
        Some(bound.var(&format!("{PREFIX}.tcn0.b"))),
        DILATIONS[0],
        Pad::Causal,
    );
    let a0 = tape.gelu(c0);
    let skip = tape.conv1d(x, bound.var(&format!("{PREFIX}.tcn0.skip.w")), None, 1, Pad::Causal);
    let mut h = tape.add(a0, skip);

    for (layer, &dil) in DILATIONS.iter().enumerate().skip(1) {
        let c = tape.conv1d(
            h,
            bound.var(&format!("{PREFIX}.tcn{layer}.w")),
            Some(bound.var(&format!("{PREFIX}.tcn{layer}.b"))),
            dil,
            Pad::Causal,
        );
        let a = tape.gelu(c);
        h = tape.add(a, h);
    }

    let time_major = tape.permute(h, &[0, 2, 1]); // (B, W, hidden)
    let projected = tape.linear(
        time_major,
        bound.var(&format!("{PREFIX}.proj.w")),
        Some(bound.var(&format!("{PREFIX}.proj.b"))),
    ); // (B, W, d)
    Ok(tape.adaptive_max_pool_axis1(projected, l_max))
}
