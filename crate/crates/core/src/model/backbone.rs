//! Token-sequence backbones between gate fusion and the decoder.
//!
//! Four variants: a frozen GPT-2-family decoder stack (loaded from an
//! archive, or a deterministic random stand-in that is equally frozen),
//! a trainable bidirectional transformer-encoder substitute, a trainable
//! single multi-head attention block, and identity. All variants preserve
//! token count and width; the pretrained forward consumes continuous token
//! embeddings directly (no text tokenizer, no LM head) and returns
//! last-layer hidden states.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

use super::config::{BackboneConfig, BackboneKind};
use super::weights::read_archive;
use super::{init_ones, init_uniform, init_zeros, Bound, ParamStore};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

/// A constructed backbone: variant descriptor, its parameter store, and the
/// content fingerprint of the frozen tensors (a fixed sentinel when none).
#[derive(Clone, Debug)]
pub struct BackboneHandle<T: Scalar> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    pub fingerprint: u64,
    /// Number of positional-embedding rows available (GPT-2-family variants).
    pub n_positions: usize,
}

impl<T: Scalar> BackboneHandle<T> {
    /// Recompute the content hash over all frozen tensors.
    pub fn parameter_fingerprint(&self) -> u64 {
        self.params.fingerprint_frozen()
    }
}

fn layer_names(i: usize) -> [String; 12] {
    [
        format!("h.{i}.ln_1.g"),
        format!("h.{i}.ln_1.b"),
        format!("h.{i}.attn.qkv.w"),
        format!("h.{i}.attn.qkv.b"),
        format!("h.{i}.attn.proj.w"),
        format!("h.{i}.attn.proj.b"),
        format!("h.{i}.ln_2.g"),
        format!("h.{i}.ln_2.b"),
        format!("h.{i}.mlp.fc.w"),
        format!("h.{i}.mlp.fc.b"),
        format!("h.{i}.mlp.proj.w"),
        format!("h.{i}.mlp.proj.b"),
    ]
}

fn expected_layer_shapes(d: usize) -> [Vec<usize>; 12] {
    [
        vec![d],
        vec![d],
        vec![d, 3 * d],
        vec![3 * d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, 4 * d],
        vec![4 * d],
        vec![4 * d, d],
        vec![d],
    ]
}

/// Register a randomly initialized GPT-2-family stack.
fn register_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    d: usize,
    layers: usize,
    n_positions: usize,
    trainable: bool,
) {
    store.register("wpe", init_uniform(rng, &[n_positions, d], d), trainable);
    for i in 0..layers {
        let names = layer_names(i);
        let shapes = expected_layer_shapes(d);
        for (name, shape) in names.iter().zip(shapes.iter()) {
            let t = if name.ends_with(".g") {
                init_ones(shape)
            } else if name.ends_with(".b") {
                init_zeros(shape)
            } else {
                init_uniform(rng, shape, shape[0])
            };
            store.register(name.clone(), t, trainable);
        }
    }
    store.register("ln_f.g", init_ones(&[d]), trainable);
    store.register("ln_f.b", init_zeros(&[d]), trainable);
}

/// Load a frozen GPT-2-family backbone from a tensor archive. Hidden width
/// and layer count are read from the archive itself; `expected_d_model`
/// guards against configuration drift. Unknown tensors (token embeddings,
/// LM head) are ignored.
pub fn load_pretrained<T: Scalar>(
    weights_path: &Path,
    expected_d_model: usize,
    heads: usize,
) -> Result<BackboneHandle<T>> {
    if !weights_path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("weights archive not found: {}", weights_path.display()),
        )));
    }
    let entries = read_archive(weights_path)?;
    let by_name: HashMap<String, Tensor<f32>> = entries.into_iter().collect();

    let wpe = by_name
        .get("wpe")
        .ok_or_else(|| Error::Checkpoint("missing tensor 'wpe'".into()))?;
    if wpe.shape().len() != 2 {
        return Err(Error::Checkpoint(format!("'wpe' must be rank 2, got {:?}", wpe.shape())));
    }
    let d = wpe.shape()[1];
    let n_positions = wpe.shape()[0];
    if d != expected_d_model {
        return Err(Error::Checkpoint(format!(
            "archive hidden width {d} does not match expected d_model {expected_d_model}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Checkpoint(format!("head count {heads} must divide hidden width {d}")));
    }

    // Layer count = contiguous h.{i}.* blocks present from 0.
    let mut layers = 0usize;
    while by_name.contains_key(&format!("h.{layers}.ln_1.g")) {
        layers += 1;
    }
    if layers == 0 {
        return Err(Error::Checkpoint("archive contains no transformer layers".into()));
    }

    let mut store = ParamStore::<T>::new();
    let to_t = |t: &Tensor<f32>| -> Tensor<T> {
        Tensor::new(t.shape(), t.data().iter().map(|&v| lit(v as f64)).collect())
    };
    store.register("wpe", to_t(wpe), false);
    for i in 0..layers {
        let names = layer_names(i);
        let shapes = expected_layer_shapes(d);
        for (name, shape) in names.iter().zip(shapes.iter()) {
            let t = by_name
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            store.register(name.clone(), to_t(t), false);
        }
    }
    for name in ["ln_f.g", "ln_f.b"] {
        let t = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if t.shape() != [d] {
            return Err(Error::Checkpoint(format!("tensor '{name}' has wrong shape")));
        }
        store.register(name, to_t(t), false);
    }

    let fingerprint = store.fingerprint_frozen();
    Ok(BackboneHandle {
        config: BackboneConfig {
            kind: BackboneKind::PretrainedFrozen,
            d_model: d,
            layers,
            heads,
            weights_path: Some(weights_path.to_path_buf()),
        },
        params: store,
        fingerprint,
        n_positions,
    })
}

/// Construct a backbone from configuration. `token_count` bounds the
/// positional table for variants that need one; `seed` drives stand-in and
/// substitute initialization deterministically.
pub fn build_backbone<T: Scalar>(
    cfg: &BackboneConfig,
    token_count: usize,
    seed: u64,
) -> Result<BackboneHandle<T>> {
    if cfg.kind != BackboneKind::Identity
        && (cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads))
    {
        return Err(Error::Config(format!(
            "head count {} must divide d_model {}",
            cfg.heads, cfg.d_model
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_626f_6e65); // "backbone"
    let handle = match cfg.kind {
        BackboneKind::PretrainedFrozen => match &cfg.weights_path {
            Some(path) => {
                let h = load_pretrained::<T>(path, cfg.d_model, cfg.heads)?;
                if h.n_positions < token_count {
                    return Err(Error::Checkpoint(format!(
                        "archive has {} positions but {token_count} tokens are required",
                        h.n_positions
                    )));
                }
                h
            }
            None => {
                // Frozen random stand-in with the configured geometry.
                let mut store = ParamStore::<T>::new();
                register_stack(&mut store, &mut rng, cfg.d_model, cfg.layers, token_count, false);
                let fingerprint = store.fingerprint_frozen();
                BackboneHandle {
                    config: cfg.clone(),
                    params: store,
                    fingerprint,
                    n_positions: token_count,
                }
            }
        },
        BackboneKind::TransEncoder => {
            let mut store = ParamStore::<T>::new();
            register_stack(&mut store, &mut rng, cfg.d_model, cfg.layers, token_count, true);
            let fingerprint = store.fingerprint_frozen();
            BackboneHandle { config: cfg.clone(), params: store, fingerprint, n_positions: token_count }
        }
        BackboneKind::AttentionOnly => {
            let mut store = ParamStore::<T>::new();
            let d = cfg.d_model;
            store.register("attn.ln.g", init_ones(&[d]), true);
            store.register("attn.ln.b", init_zeros(&[d]), true);
            store.register("attn.qkv.w", init_uniform(&mut rng, &[d, 3 * d], d), true);
            store.register("attn.qkv.b", init_zeros(&[3 * d]), true);
            store.register("attn.proj.w", init_uniform(&mut rng, &[d, d], d), true);
            store.register("attn.proj.b", init_zeros(&[d]), true);
            let fingerprint = store.fingerprint_frozen();
            BackboneHandle { config: cfg.clone(), params: store, fingerprint, n_positions: 0 }
        }
        BackboneKind::Identity => {
            let store = ParamStore::<T>::new();
            let fingerprint = store.fingerprint_frozen();
            BackboneHandle { config: cfg.clone(), params: store, fingerprint, n_positions: 0 }
        }
    };
    Ok(handle)
}

/// Multi-head self-attention over (B, l, d) with combined QKV projection.
#[allow(clippy::too_many_arguments)]
fn mha<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    heads: usize,
    causal: bool,
) -> Var {
    let shape = tape.shape(x);
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;

    let qkv = tape.linear(x, qkv_w, Some(qkv_b)); // (B, l, 3d)
    let split = |start: usize| -> Var {
        let part = tape.slice_last(qkv, start, d); // (B, l, d)
        let headed = tape.reshape(part, &[b, l, heads, dh]);
        let perm = tape.permute(headed, &[0, 2, 1, 3]); // (B, h, l, dh)
        tape.reshape(perm, &[b * heads, l, dh])
    };
    let q = split(0);
    let k = split(d);
    let v = split(2 * d);

    let k_t = tape.permute(k, &[0, 2, 1]); // (B*h, dh, l)
    let scores = tape.bmm(q, k_t); // (B*h, l, l)
    let scores = tape.scale_const(scores, 1.0 / (dh as f64).sqrt());
    let scores = if causal {
        let mask = Tensor::<T>::from_fn(&[l * l], |idx| {
            let (i, j) = (idx[0] / l, idx[0] % l);
            if j > i {
                lit(MASK_NEG)
            } else {
                T::zero()
            }
        });
        let mask_v = tape.constant(mask);
        let flat = tape.reshape(scores, &[b * heads, l * l]);
        let masked = tape.add_bias(flat, mask_v);
        tape.reshape(masked, &[b * heads, l, l])
    } else {
        scores
    };
    let att = tape.softmax(scores, 2);
    let ctx = tape.bmm(att, v); // (B*h, l, dh)
    let merged = tape.reshape(ctx, &[b, heads, l, dh]);
    let merged = tape.permute(merged, &[0, 2, 1, 3]); // (B, l, h, dh)
    let merged = tape.reshape(merged, &[b, l, d]);
    tape.linear(merged, proj_w, Some(proj_b))
}

/// Run the backbone over fused tokens (B, l, d_model). Output shape equals
/// input shape for every variant.
pub fn backbone_forward<T: Scalar>(
    bound: &Bound<'_, T>,
    handle: &BackboneHandle<T>,
    tokens: Var,
) -> Result<Var> {
    let tape = bound.tape;
    let shape = tape.shape(tokens);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("tokens must be (B, l, d_model), got {shape:?}")));
    }
    let (_, l, width) = (shape[0], shape[1], shape[2]);
    let kind = handle.config.kind;
    if kind == BackboneKind::Identity {
        return Ok(tokens);
    }
    let d = handle.config.d_model;
    if width != d {
        return Err(Error::Shape(format!(
            "token width {width} does not match backbone d_model {d}"
        )));
    }

    match kind {
        BackboneKind::Identity => unreachable!(),
        BackboneKind::AttentionOnly => {
            let a = tape.layer_norm(
                tokens,
                bound.var("attn.ln.g"),
                bound.var("attn.ln.b"),
                LN_EPS,
            );
            let attn = mha(
                tape,
                a,
                bound.var("attn.qkv.w"),
                bound.var("attn.qkv.b"),
                bound.var("attn.proj.w"),
                bound.var("attn.proj.b"),
                handle.config.heads,
                false,
            );
            Ok(tape.add(tokens, attn))
        }
        BackboneKind::PretrainedFrozen | BackboneKind::TransEncoder => {
            if l > handle.n_positions {
                return Err(Error::Shape(format!(
                    "{l} tokens exceed the {} positional rows available",
                    handle.n_positions
                )));
            }
            let causal = kind == BackboneKind::PretrainedFrozen;
            // Positional rows 0..l added across the batch.
            let wpe = bound.var("wpe");
            let wpe_cols = tape.permute(wpe, &[1, 0]); // (d, P)
            let wpe_l = tape.permute(tape.slice_last(wpe_cols, 0, l), &[1, 0]); // (l, d)
            let wpe_flat = tape.reshape(wpe_l, &[l * d]);
            let flat = tape.reshape(tokens, &[shape[0], l * d]);
            let mut x = tape.reshape(tape.add_bias(flat, wpe_flat), &[shape[0], l, d]);

            for i in 0..handle.config.layers {
                let pre = format!("h.{i}");
                let a = tape.layer_norm(
                    x,
                    bound.var(&format!("{pre}.ln_1.g")),
                    bound.var(&format!("{pre}.ln_1.b")),
                    LN_EPS,
                );
                let attn = mha(
                    tape,
                    a,
                    bound.var(&format!("{pre}.attn.qkv.w")),
                    bound.var(&format!("{pre}.attn.qkv.b")),
                    bound.var(&format!("{pre}.attn.proj.w")),
                    bound.var(&format!("{pre}.attn.proj.b")),
                    handle.config.heads,
                    causal,
                );
                x = tape.add(x, attn);
                let m = tape.layer_norm(
                    x,
                    bound.var(&format!("{pre}.ln_2.g")),
                    bound.var(&format!("{pre}.ln_2.b")),
                    LN_EPS,
                );
                let h = tape.linear(
                    m,
                    bound.var(&format!("{pre}.mlp.fc.w")),
                    Some(bound.var(&format!("{pre}.mlp.fc.b"))),
                );
                let h = tape.gelu(h);
                let ff = tape.linear(
                    h,
                    bound.var(&format!("{pre}.mlp.proj.w")),
                    Some(bound.var(&format!("{pre}.mlp.proj.b"))),
                );
                x = tape.add(x, ff);
            }
            Ok(tape.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b"), LN_EPS))
        }
    }
}
