//! Reconstruction decoders: the shared per-token MLP with overlap-average
//! merging, and the flattened-head ablation variant.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

use super::{init_uniform, init_zeros, Bound, ParamStore};

const PREFIX: &str = "dec";

/// Reconstruction plus the per-timestep patch coverage counts.
pub struct Reconstruction {
    /// (B, W, M).
    pub values: Var,
    /// Number of decoded patches covering each timestep; every entry >= 1.
    pub coverage: Vec<usize>,
}

fn decoder_hidden(d_model: usize) -> usize {
    (d_model / 2).max(1)
}

/// Register the shared patch-wise decoder MLP: d_model -> d_model/2 -> p_dec*M.
pub fn register_patchwise<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    d_model: usize,
    p_dec: usize,
    m: usize,
) {
    let h = decoder_hidden(d_model);
    store.register(format!("{PREFIX}.fc1.w"), init_uniform(rng, &[d_model, h], d_model), true);
    store.register(format!("{PREFIX}.fc1.b"), init_zeros(&[h]), true);
    store.register(format!("{PREFIX}.fc2.w"), init_uniform(rng, &[h, p_dec * m], h), true);
    store.register(format!("{PREFIX}.fc2.b"), init_zeros(&[p_dec * m]), true);
}

/// Register the flattened-head decoder: l_max*d_model -> W*M in one map.
pub fn register_flat<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    l_max: usize,
    d_model: usize,
    w: usize,
    m: usize,
) {
    store.register(
        format!("{PREFIX}.flat.w"),
        init_uniform(rng, &[l_max * d_model, w * m], l_max * d_model),
        true,
    );
    store.register(format!("{PREFIX}.flat.b"), init_zeros(&[w * m]), true);
}

/// Trainable parameter count of each decoder under a given geometry; the
/// flattened head grows with l_max*W while the shared MLP does not.
pub fn patchwise_param_count(d_model: usize, p_dec: usize, m: usize) -> usize {
    let h = decoder_hidden(d_model);
    d_model * h + h + h * p_dec * m + p_dec * m
}

pub fn flat_param_count(l_max: usize, d_model: usize, w: usize, m: usize) -> usize {
    l_max * d_model * w * m + w * m
}

/// Coverage counts for token spans [i*s, i*s + p_dec) over a window of
/// length w. Errors when some timestep is covered by no span.
pub fn coverage_counts(l: usize, p_dec: usize, s: usize, w: usize) -> Result<Vec<usize>> {
    let mut coverage = vec![0usize; w];
    for i in 0..l {
        for j in 0..p_dec {
            let t = i * s + j;
            if t < w {
                coverage[t] += 1;
            }
        }
    }
    if let Some(t) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "coverage gap at timestep {t}: {l} spans of length {p_dec} at stride {s} over window {w}"
        )));
    }
    Ok(coverage)
}

/// Average decoded patches (B, l, p_dec, M) into a window (B, W, M): each
/// timestep is the arithmetic mean of all patch values covering it, summed
/// in token order.
pub fn overlap_average<T: Scalar>(
    tape: &Tape<T>,
    patches: Var,
    s: usize,
    w: usize,
) -> Result<Reconstruction> {
    let shape = tape.shape(patches);
    if shape.len() != 4 {
        return Err(Error::Shape(format!("patches must be (B, l, p, M), got {shape:?}")));
    }
    let (b, l, p_dec, m) = (shape[0], shape[1], shape[2], shape[3]);
    let coverage = coverage_counts(l, p_dec, s, w)?;

    let vx = tape.value(patches);
    let mut out = Tensor::<T>::zeros(&[b, w, m]);
    for bi in 0..b {
        for i in 0..l {
            for j in 0..p_dec {
                let t = i * s + j;
                if t >= w {
                    continue;
                }
                for c in 0..m {
                    let o = (bi * w + t) * m + c;
                    out.data_mut()[o] =
                        out.data()[o] + vx.data()[((bi * l + i) * p_dec + j) * m + c];
                }
            }
        }
    }
    for bi in 0..b {
        for t in 0..w {
            let count: T = lit(coverage[t] as f64);
            for c in 0..m {
                let o = (bi * w + t) * m + c;
                out.data_mut()[o] = out.data()[o] / count;
            }
        }
    }

    let needs = tape.needs_grad(patches);
    let coverage_b = coverage.clone();
    let values = tape.push(
        out,
        needs,
        Some(Box::new(move |g, sink| {
            sink.add_with(patches, || {
                let mut dx = Tensor::<T>::zeros(&[b, l, p_dec, m]);
                for bi in 0..b {
                    for i in 0..l {
                        for j in 0..p_dec {
                            let t = i * s + j;
                            if t >= w {
                                continue;
                            }
                            let count: T = lit(coverage_b[t] as f64);
                            for c in 0..m {
                                dx.data_mut()[((bi * l + i) * p_dec + j) * m + c] =
                                    g.data()[(bi * w + t) * m + c] / count;
                            }
                        }
                    }
                }
                dx
            });
        })),
    );
    Ok(Reconstruction { values, coverage })
}

/// Shared-MLP patch-wise decoding: each token (B, l, d_model) maps to a
/// (p_dec, M) patch placed at [i*s, i*s + p_dec), merged by overlap average.
pub fn decode_patchwise<T: Scalar>(
    bound: &Bound<'_, T>,
    tokens: Var,
    p_dec: usize,
    s: usize,
    w: usize,
    m: usize,
) -> Result<Reconstruction> {
    let tape = bound.tape;
    let shape = tape.shape(tokens);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("tokens must be (B, l, d_model), got {shape:?}")));
    }
    let (b, l, d_model) = (shape[0], shape[1], shape[2]);
    let fc1_w = bound.var(&format!("{PREFIX}.fc1.w"));
    if tape.shape(fc1_w)[0] != d_model {
        return Err(Error::Shape(format!(
            "decoder expects width {}, tokens have {d_model}",
            tape.shape(fc1_w)[0]
        )));
    }

    let rows = tape.reshape(tokens, &[b * l, d_model]);
    let h = tape.linear(rows, fc1_w, Some(bound.var(&format!("{PREFIX}.fc1.b"))));
    let h = tape.gelu(h);
    let decoded = tape.linear(
        h,
        bound.var(&format!("{PREFIX}.fc2.w")),
        Some(bound.var(&format!("{PREFIX}.fc2.b"))),
    ); // (B*l, p_dec*M)
    let patches = tape.reshape(decoded, &[b, l, p_dec, m]);
    overlap_average(tape, patches, s, w)
}

/// Flattened-head decoding: all tokens in one linear map to (B, W, M);
/// coverage is all-ones by construction.
pub fn decode_flat<T: Scalar>(
    bound: &Bound<'_, T>,
    tokens: Var,
    w: usize,
    m: usize,
) -> Result<Reconstruction> {
    let tape = bound.tape;
    let shape = tape.shape(tokens);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("tokens must be (B, l, d_model), got {shape:?}")));
    }
    let (b, l, d_model) = (shape[0], shape[1], shape[2]);
    let flat_w = bound.var(&format!("{PREFIX}.flat.w"));
    if tape.shape(flat_w)[0] != l * d_model {
        return Err(Error::Shape(format!(
            "flat decoder expects {} inputs, tokens give {}",
            tape.shape(flat_w)[0],
            l * d_model
        )));
    }
    let rows = tape.reshape(tokens, &[b, l * d_model]);
    let out = tape.linear(rows, flat_w, Some(bound.var(&format!("{PREFIX}.flat.b"))));
    let values = tape.reshape(out, &[b, w, m]);
    Ok(Reconstruction { values, coverage: vec![1; w] })
}
