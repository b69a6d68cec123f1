//! Local feature branches: patch segmentation, the patching branch
//! (causal convolution stack + per-channel projection with a patch-mean
//! residual), the selection branch (token-axis alignment, per-patch scoring,
//! softmax attention over patches), and multi-scale fusion across patch
//! sizes.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Pad, Scalar, Tape, Tensor, Var};

use super::{init_ones, init_uniform, init_zeros, Bound, ParamStore};

/// Attention diagnostics from one selection-branch forward.
#[derive(Clone, Debug)]
pub struct SelectionState<T: Scalar> {
    /// Softmax attention over patches, rows sum to one. (B, l)
    pub attention: Tensor<T>,
    /// Pooled pre-softmax scores. (B, l)
    pub raw_scores: Tensor<T>,
    /// Convex pooling mix in [0, 1].
    pub tau: T,
}

/// Patching-branch forward output.
pub struct PatchBranchOutput {
    /// (B, l, M*d) token embedding.
    pub feature: Var,
    /// (B*l, M, d) activations before layer normalization; the patch-mean
    /// residual is visible here.
    pub pre_ln: Var,
}

/// Fusion inputs for one patch scale.
#[derive(Clone, Copy)]
pub struct ScaleFeatures {
    pub patching: Option<Var>,
    pub selection: Option<Var>,
}

/// Fusion outputs across scales.
pub struct FusedFeatures {
    pub patching: Option<Var>,
    pub selection: Option<Var>,
    /// Per-batch softmax weights over scales. (B, S)
    pub scale_weights: Var,
}

/// Cut a window (B, W, M) into overlapping patches (B, l, p, M) with
/// l = floor((W - p)/s) + 1; patch i covers timesteps [i*s, i*s + p).
pub fn segment_patches<T: Scalar>(tape: &Tape<T>, window: Var, p: usize, s: usize) -> Result<Var> {
    let shape = tape.shape(window);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("window must be (B, W, M), got {shape:?}")));
    }
    let (b, w, m) = (shape[0], shape[1], shape[2]);
    if s < 1 {
        return Err(Error::Config("patch stride must be >= 1".into()));
    }
    if p < 1 || p > w {
        return Err(Error::Size(format!("patch size {p} invalid for window length {w}")));
    }
    let l = (w - p) / s + 1;
    Ok(segment_patches_op(tape, window, b, w, m, p, s, l))
}

#[allow(clippy::too_many_arguments)]
fn segment_patches_op<T: Scalar>(
    tape: &Tape<T>,
    window: Var,
    b: usize,
    w: usize,
    m: usize,
    p: usize,
    s: usize,
    l: usize,
) -> Var {
    let vx = tape.value(window);
    let mut out = Tensor::zeros(&[b, l, p, m]);
    for bi in 0..b {
        for i in 0..l {
            for j in 0..p {
                for c in 0..m {
                    out.data_mut()[((bi * l + i) * p + j) * m + c] =
                        vx.data()[(bi * w + i * s + j) * m + c];
                }
            }
        }
    }
    let needs = tape.needs_grad(window);
    tape.push(
        out,
        needs,
        Some(Box::new(move |g, sink| {
            sink.add_with(window, || {
                let mut dx = Tensor::zeros(&[b, w, m]);
                for bi in 0..b {
                    for i in 0..l {
                        for j in 0..p {
                            for c in 0..m {
                                let o = (bi * w + i * s + j) * m + c;
                                dx.data_mut()[o] =
                                    dx.data()[o] + g.data()[((bi * l + i) * p + j) * m + c];
                            }
                        }
                    }
                }
                dx
            });
        })),
    )
}

fn prefix_local(p: usize) -> String {
    format!("local.p{p}")
}

fn prefix_sel(p: usize) -> String {
    format!("sel.p{p}")
}

fn score_hidden(p: usize) -> usize {
    (p / 2).max(1)
}

/// Register the patching-branch parameters for one patch size.
pub fn register_patch_branch<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    p: usize,
    m: usize,
    d: usize,
) {
    let pre = prefix_local(p);
    store.register(format!("{pre}.conv1.w"), init_uniform(rng, &[m, m, 3], m * 3), true);
    store.register(format!("{pre}.conv1.b"), init_zeros(&[m]), true);
    store.register(format!("{pre}.conv2.w"), init_uniform(rng, &[m, m, 3], m * 3), true);
    store.register(format!("{pre}.conv2.b"), init_zeros(&[m]), true);
    store.register(format!("{pre}.dw.w"), init_uniform(rng, &[m, 3], 3), true);
    store.register(format!("{pre}.dw.b"), init_zeros(&[m]), true);
    store.register(format!("{pre}.proj.w"), init_uniform(rng, &[p, d], p), true);
    store.register(format!("{pre}.proj.b"), init_zeros(&[d]), true);
    store.register(format!("{pre}.ln.g"), init_ones(&[d]), true);
    store.register(format!("{pre}.ln.b"), init_zeros(&[d]), true);
}

/// Register the selection-branch parameters for one patch size. The
/// alignment convolution consumes the patching-branch feature and is only
/// registered when that branch exists (`with_align`).
pub fn register_selection_branch<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    p: usize,
    m: usize,
    d: usize,
    with_align: bool,
) {
    let pre = prefix_sel(p);
    let ph = score_hidden(p);
    if with_align {
        store.register(
            format!("{pre}.align.w"),
            init_uniform(rng, &[p * m, m * d, 3], m * d * 3),
            true,
        );
        store.register(format!("{pre}.align.b"), init_zeros(&[p * m]), true);
    }
    store.register(format!("{pre}.score1.w"), init_uniform(rng, &[p, ph], p), true);
    store.register(format!("{pre}.score1.b"), init_zeros(&[ph]), true);
    store.register(format!("{pre}.score2.w"), init_uniform(rng, &[ph, 1], ph), true);
    store.register(format!("{pre}.score2.b"), init_zeros(&[1]), true);
    // raw 0 <=> tau = 0.5; sigmoid keeps tau in (0, 1) under any update.
    store.register(format!("{pre}.tau.raw"), init_zeros(&[1]), true);
    store.register(format!("{pre}.proj.w"), init_uniform(rng, &[p * m, m * d], p * m), true);
    store.register(format!("{pre}.proj.b"), init_zeros(&[m * d]), true);
}

/// Causal convolution stack of the patching branch: two dilated channel-mixing
/// convolutions (dilations 1 then 2, GELU between) followed by a depth-wise
/// convolution, all along the intra-patch axis. Input and output are
/// (B*l, M, p).
pub fn patch_conv_stack<T: Scalar>(bound: &Bound<'_, T>, p: usize, x: Var) -> Var {
    let pre = prefix_local(p);
    let tape = bound.tape;
    let c1 = tape.conv1d(
        x,
        bound.var(&format!("{pre}.conv1.w")),
        Some(bound.var(&format!("{pre}.conv1.b"))),
        1,
        Pad::Causal,
    );
    let a1 = tape.gelu(c1);
    let c2 = tape.conv1d(
        a1,
        bound.var(&format!("{pre}.conv2.w")),
        Some(bound.var(&format!("{pre}.conv2.b"))),
        2,
        Pad::Causal,
    );
    tape.conv1d_depthwise(
        c2,
        bound.var(&format!("{pre}.dw.w")),
        Some(bound.var(&format!("{pre}.dw.b"))),
        1,
        Pad::Causal,
    )
}

/// Patching-branch forward: convolution stack, per-channel projection of the
/// patch axis to width d, patch-mean residual broadcast across d, layer norm,
/// and the reshape to (B, l, M*d).
pub fn patch_branch_forward<T: Scalar>(
    bound: &Bound<'_, T>,
    p: usize,
    x_patch: Var,
) -> Result<PatchBranchOutput> {
    let tape = bound.tape;
    let shape = tape.shape(x_patch);
    if shape.len() != 4 || shape[2] != p {
        return Err(Error::Shape(format!(
            "patch tensor must be (B, l, {p}, M), got {shape:?}"
        )));
    }
    let (b, l, m) = (shape[0], shape[1], shape[3]);
    let pre = prefix_local(p);
    let conv_channels = tape.shape(bound.var(&format!("{pre}.conv1.w")))[1];
    if conv_channels != m {
        return Err(Error::Shape(format!(
            "patching branch registered for {conv_channels} channels, input has {m}"
        )));
    }
    let d = tape.shape(bound.var(&format!("{pre}.proj.w")))[1];

    // (B, l, p, M) -> (B*l, M, p) for convolution along the patch axis.
    let channels_major = tape.permute(x_patch, &[0, 1, 3, 2]);
    let rows = tape.reshape(channels_major, &[b * l, m, p]);
    let conv = patch_conv_stack(bound, p, rows);

    // Per-channel projection of the patch axis to d.
    let projected = tape.linear(
        conv,
        bound.var(&format!("{pre}.proj.w")),
        Some(bound.var(&format!("{pre}.proj.b"))),
    ); // (B*l, M, d)

    // Patch-mean residual, broadcast across d.
    let mean = tape.reduce_mean(x_patch, &[2]); // (B, l, M)
    let mean_b = tape.broadcast_last(mean, d); // (B, l, M, d)
    let mean_rows = tape.reshape(mean_b, &[b * l, m, d]);
    let pre_ln = tape.add(projected, mean_rows);

    let normed = tape.layer_norm(
        pre_ln,
        bound.var(&format!("{pre}.ln.g")),
        bound.var(&format!("{pre}.ln.b")),
        1e-5,
    );
    let feature = tape.reshape(normed, &[b, l, m * d]);
    Ok(PatchBranchOutput { feature, pre_ln })
}

/// Convex max/mean pooling of per-channel scores: s (B, l, M) -> (B, l),
/// mixing with tau = sigmoid(raw).
pub fn pool_scores<T: Scalar>(tape: &Tape<T>, scores: Var, tau_raw: Var) -> (Var, Var) {
    let tau = tape.sigmoid(tau_raw);
    let max_pool = tape.reduce_max(scores, 2);
    let mean_pool = tape.reduce_mean(scores, &[2]);
    let one_minus = tape.sub_from_const(1.0, tau);
    let weighted_max = tape.scale_by(tau, max_pool);
    let weighted_mean = tape.scale_by(one_minus, mean_pool);
    (tape.add(weighted_max, weighted_mean), tau)
}

/// Selection-branch forward. Consumes the raw patches and, when the patching
/// branch is active, its feature for the same scale; returns the weighted
/// feature (B, l, M*d) and the attention state. Without a patching feature
/// the modulation term is dropped and scoring runs on the raw patches.
pub fn selection_branch_forward<T: Scalar>(
    bound: &Bound<'_, T>,
    p: usize,
    x_patch: Var,
    f_p: Option<Var>,
) -> Result<(Var, SelectionState<T>)> {
    let tape = bound.tape;
    let xs = tape.shape(x_patch);
    if xs.len() != 4 || xs[2] != p {
        return Err(Error::Shape(format!(
            "patch tensor must be (B, l, {p}, M), got {xs:?}"
        )));
    }
    let (b, l, m) = (xs[0], xs[1], xs[3]);

    let pre = prefix_sel(p);
    let proj_rows = tape.shape(bound.var(&format!("{pre}.proj.w")))[0];
    if proj_rows != p * m {
        return Err(Error::Shape(format!(
            "selection branch registered for {} channels, input has {m}",
            proj_rows / p
        )));
    }
    let modulated = match f_p {
        Some(f_p) => {
            let fs = tape.shape(f_p);
            let md = *fs.last().ok_or_else(|| Error::Shape("empty feature".into()))?;
            if fs.len() != 3 || fs[0] != b || fs[1] != l || md % m != 0 {
                return Err(Error::Shape(format!(
                    "patching feature must be ({b}, {l}, M*d), got {fs:?}"
                )));
            }
            // Token-axis convolution aligns (B, l, M*d) to (B, l, p, M) for
            // the additive modulation with the raw patches.
            let tokens_major = tape.permute(f_p, &[0, 2, 1]); // (B, M*d, l)
            let aligned = tape.conv1d(
                tokens_major,
                bound.var(&format!("{pre}.align.w")),
                Some(bound.var(&format!("{pre}.align.b"))),
                1,
                Pad::Same,
            ); // (B, p*M, l)
            let aligned = tape.permute(aligned, &[0, 2, 1]); // (B, l, p*M)
            let aligned = tape.reshape(aligned, &[b, l, p, m]);
            tape.add(x_patch, aligned)
        }
        None => x_patch,
    };

    // Per-patch, per-channel scalar score via the shared two-layer MLP.
    let per_channel = tape.permute(modulated, &[0, 1, 3, 2]); // (B, l, M, p)
    let rows = tape.reshape(per_channel, &[b * l * m, p]);
    let h = tape.linear(
        rows,
        bound.var(&format!("{pre}.score1.w")),
        Some(bound.var(&format!("{pre}.score1.b"))),
    );
    let h = tape.gelu(h);
    let s = tape.linear(
        h,
        bound.var(&format!("{pre}.score2.w")),
        Some(bound.var(&format!("{pre}.score2.b"))),
    ); // (B*l*M, 1)
    let s = tape.reshape(s, &[b, l, m]);

    let (pooled, tau) = pool_scores(tape, s, bound.var(&format!("{pre}.tau.raw")));
    let attention = tape.softmax(pooled, 1); // (B, l)

    // Project the modulated patches to the token width and apply attention.
    let flat = tape.reshape(modulated, &[b, l, p * m]);
    let projected = tape.linear(
        flat,
        bound.var(&format!("{pre}.proj.w")),
        Some(bound.var(&format!("{pre}.proj.b"))),
    ); // (B, l, M*d)
    let feature = tape.mul_bcast_last(attention, projected);

    let state = SelectionState {
        attention: tape.value(attention),
        raw_scores: tape.value(pooled),
        tau: tape.value(tau).data()[0],
    };
    Ok((feature, state))
}

/// Linear 1-D interpolation of (B, l_k, F) along the token axis up to l_max.
/// Identity when the counts already match; only up-sampling is defined.
pub fn upsample_tokens<T: Scalar>(tape: &Tape<T>, feature: Var, l_max: usize) -> Result<Var> {
    let shape = tape.shape(feature);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("feature must be (B, l, F), got {shape:?}")));
    }
    if shape[1] > l_max {
        return Err(Error::Shape(format!(
            "token count {} exceeds target {l_max}; only up-sampling is defined",
            shape[1]
        )));
    }
    Ok(tape.upsample_linear_axis1(feature, l_max))
}

/// Fuse per-scale features: upsample everything to l_max, weight scales by a
/// softmax over the per-scale mean of the selection features (falling back to
/// the patching features when selection is ablated), and sum.
pub fn multiscale_fuse<T: Scalar>(
    tape: &Tape<T>,
    scales: &[ScaleFeatures],
    l_max: usize,
) -> Result<FusedFeatures> {
    if scales.is_empty() {
        return Err(Error::Config("multiscale fusion needs at least one scale".into()));
    }
    let has_patching = scales[0].patching.is_some();
    let has_selection = scales[0].selection.is_some();
    if !has_patching && !has_selection {
        return Err(Error::Config("multiscale fusion needs at least one branch".into()));
    }
    for sf in scales {
        if sf.patching.is_some() != has_patching || sf.selection.is_some() != has_selection {
            return Err(Error::Shape("inconsistent branch presence across scales".into()));
        }
    }

    let mut up_patching: Vec<Var> = Vec::new();
    let mut up_selection: Vec<Var> = Vec::new();
    let mut feat_dim: Option<usize> = None;
    let mut batch: Option<usize> = None;
    for sf in scales {
        for (var, bucket) in [(sf.patching, &mut up_patching), (sf.selection, &mut up_selection)] {
            if let Some(v) = var {
                let shape = tape.shape(v);
                if let Some(f) = feat_dim {
                    if *shape.last().unwrap() != f {
                        return Err(Error::Shape(format!(
                            "inconsistent feature dims across scales: {f} vs {}",
                            shape.last().unwrap()
                        )));
                    }
                } else {
                    feat_dim = Some(*shape.last().unwrap());
                }
                if let Some(bb) = batch {
                    if shape[0] != bb {
                        return Err(Error::Shape("inconsistent batch across scales".into()));
                    }
                } else {
                    batch = Some(shape[0]);
                }
                bucket.push(upsample_tokens(tape, v, l_max)?);
            }
        }
    }

    let b = batch.unwrap();
    let weight_inputs = if has_selection { &up_selection } else { &up_patching };
    let mut per_scale_means = Vec::with_capacity(scales.len());
    for &v in weight_inputs.iter() {
        let mean = tape.reduce_mean(v, &[1, 2]); // (B,)
        per_scale_means.push(tape.reshape(mean, &[b, 1]));
    }
    let stacked = tape.concat_last(&per_scale_means); // (B, S)
    let scale_weights = tape.softmax(stacked, 1);

    let fuse = |bucket: &[Var]| -> Option<Var> {
        if bucket.is_empty() {
            return None;
        }
        let f = feat_dim.unwrap();
        let mut acc: Option<Var> = None;
        for (k, &v) in bucket.iter().enumerate() {
            let w_k = tape.index_axis(scale_weights, 1, k); // (B,)
            let flat = tape.reshape(v, &[b, l_max * f]);
            let weighted = tape.mul_bcast_last(w_k, flat);
            let weighted = tape.reshape(weighted, &[b, l_max, f]);
            acc = Some(match acc {
                None => weighted,
                Some(a) => tape.add(a, weighted),
            });
        }
        acc
    };

    Ok(FusedFeatures {
        patching: fuse(&up_patching),
        selection: fuse(&up_selection),
        scale_weights,
    })
}
