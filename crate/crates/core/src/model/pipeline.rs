//! Full pipeline assembly: wiring the branches, gate fusion, backbone and
//! decoder; Adam training with the frozen-backbone contract; sliding-window
//! anomaly scoring; and bit-exact checkpoint persistence.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::FlatConfig;
use crate::data::{LabeledSeries, NormStats, WindowBatch};
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};
use crate::CHECKPOINT_FORMAT_VERSION;

use super::backbone::{backbone_forward, build_backbone, BackboneHandle};
use super::config::{BackboneKind, DecoderKind, ModelConfig};
use super::decoder::{decode_flat, decode_patchwise, register_flat, register_patchwise};
use super::encoder_global::{global_branch_forward, register_global_branch};
use super::encoder_local::{
    multiscale_fuse, patch_branch_forward, register_patch_branch, register_selection_branch,
    segment_patches, selection_branch_forward, ScaleFeatures, SelectionState,
};
use super::gate_fusion::{gate_fuse_forward, project_branches, register_gate_fusion, BranchSlot, GateWeights};
use super::weights::{decode_archive, encode_archive};
use super::{init_uniform, init_zeros, Bound, ParamStore};

/// Per-timestep anomaly scores aligned to a test series.
#[derive(Clone, Debug)]
pub struct AnomalyScoreSeries {
    pub scores: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

/// The wired model: hyperparameters, encoder/fusion/decoder parameters, and
/// the backbone handle.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub channels: usize,
    pub params: ParamStore<T>,
    pub backbone: BackboneHandle<T>,
}

/// A model after training, with the loss history and the backbone
/// fingerprints taken at start and end of the run.
#[derive(Clone, Debug)]
pub struct TrainedModel<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<f64>,
    pub fingerprint_start: u64,
    pub fingerprint_end: u64,
    /// Normalization statistics of the training split, when known.
    pub norm_stats: Option<NormStats>,
}

/// Diagnostics from one forward pass.
pub struct ForwardDetails<T: Scalar> {
    pub reconstruction: Var,
    pub coverage: Vec<usize>,
    pub gate: Option<GateWeights<T>>,
    /// Per-batch softmax weights over patch scales, when fused.
    pub scale_weights: Option<Tensor<T>>,
    pub selection: Vec<SelectionState<T>>,
}

/// Encoder + backbone output, before any decoder.
pub struct EncodingDetails<T: Scalar> {
    /// (B, l_max, d_model) backbone hidden states.
    pub hidden: Var,
    pub gate: Option<GateWeights<T>>,
    pub scale_weights: Option<Tensor<T>>,
    pub selection: Vec<SelectionState<T>>,
}

/// Build a model for `channels`-wide series. Initialization is deterministic
/// in `config.train.seed`.
pub fn build_model<T: Scalar>(config: ModelConfig, channels: usize) -> Result<Model<T>> {
    config.validate()?;
    if channels == 0 {
        return Err(Error::Config("channel count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut params = ParamStore::<T>::new();
    let m = channels;
    let d_model = config.backbone.d_model;

    if config.branches.base_llm_mode {
        let p = config.p_min();
        params.register("base.embed.w", init_uniform(&mut rng, &[p * m, d_model], p * m), true);
        params.register("base.embed.b", init_zeros(&[d_model]), true);
    } else {
        for &p in &config.patch_sizes {
            if config.branches.use_patching {
                register_patch_branch(&mut params, &mut rng, p, m, config.d);
            }
            if config.branches.use_selection {
                register_selection_branch(
                    &mut params,
                    &mut rng,
                    p,
                    m,
                    config.d,
                    config.branches.use_patching,
                );
            }
        }
        if config.branches.use_global {
            register_global_branch(&mut params, &mut rng, m, config.global_hidden, config.d);
        }
        let slots = active_slots(&config, m);
        register_gate_fusion(&mut params, &mut rng, &slots, config.d_prime, d_model);
    }

    match config.decoder_kind {
        DecoderKind::Patchwise => {
            register_patchwise(&mut params, &mut rng, d_model, config.p_dec(), m)
        }
        DecoderKind::Flat => {
            register_flat(&mut params, &mut rng, config.l_max(), d_model, config.window, m)
        }
    }

    let backbone = build_backbone::<T>(&config.backbone, config.l_max(), config.train.seed)?;
    Ok(Model { config, channels, params, backbone })
}

fn active_slots(config: &ModelConfig, m: usize) -> Vec<(BranchSlot, usize)> {
    let mut slots = Vec::new();
    if config.branches.use_patching {
        slots.push((BranchSlot::Patching, m * config.d));
    }
    if config.branches.use_selection {
        slots.push((BranchSlot::Selection, m * config.d));
    }
    if config.branches.use_global {
        slots.push((BranchSlot::Global, config.d));
    }
    slots
}

/// Run the tri-branch encoder (or the base linear embedding), gate fusion
/// and the backbone over pre-bound parameter stores. `window` is (B, W, M).
pub fn forward_encoding<T: Scalar>(
    model: &Model<T>,
    pb: &Bound<'_, T>,
    bb: &Bound<'_, T>,
    window: Var,
) -> Result<EncodingDetails<T>> {
    let tape = pb.tape;
    let shape = tape.shape(window);
    if shape.len() != 3 || shape[1] != model.config.window || shape[2] != model.channels {
        return Err(Error::Shape(format!(
            "window must be (B, {}, {}), got {shape:?}",
            model.config.window, model.channels
        )));
    }
    let b = shape[0];
    let cfg = &model.config;
    let l_max = cfg.l_max();

    let mut gate = None;
    let mut scale_weights = None;
    let mut selection_states = Vec::new();

    let tokens = if cfg.branches.base_llm_mode {
        // Raw patches through a single linear embedding.
        let p = cfg.p_min();
        let patches = segment_patches(tape, window, p, cfg.stride)?;
        let flat = tape.reshape(patches, &[b, l_max, p * model.channels]);
        tape.linear(flat, pb.var("base.embed.w"), Some(pb.var("base.embed.b")))
    } else {
        let mut per_scale = Vec::new();
        for &p in &cfg.patch_sizes {
            let patches = segment_patches(tape, window, p, cfg.stride)?;
            let f_p = if cfg.branches.use_patching {
                Some(patch_branch_forward(pb, p, patches)?.feature)
            } else {
                None
            };
            let f_s = if cfg.branches.use_selection {
                let (feat, state) = selection_branch_forward(pb, p, patches, f_p)?;
                selection_states.push(state);
                Some(feat)
            } else {
                None
            };
            per_scale.push(ScaleFeatures { patching: f_p, selection: f_s });
        }

        let mut features: Vec<(BranchSlot, Var)> = Vec::new();
        if cfg.branches.use_patching || cfg.branches.use_selection {
            let fused = multiscale_fuse(tape, &per_scale, l_max)?;
            scale_weights = Some(tape.value(fused.scale_weights));
            if let Some(v) = fused.patching {
                features.push((BranchSlot::Patching, v));
            }
            if let Some(v) = fused.selection {
                features.push((BranchSlot::Selection, v));
            }
        }
        if cfg.branches.use_global {
            let g = global_branch_forward(pb, window, l_max)?;
            features.push((BranchSlot::Global, g));
        }

        let projected = project_branches(pb, &features)?;
        let fusion = gate_fuse_forward(pb, &projected)?;
        gate = Some(fusion.weights);
        fusion.tokens
    };

    let hidden = backbone_forward(bb, &model.backbone, tokens)?;
    Ok(EncodingDetails { hidden, gate, scale_weights, selection: selection_states })
}

/// Full forward pass: encoding plus the configured decoder.
pub fn forward_details<T: Scalar>(
    model: &Model<T>,
    pb: &Bound<'_, T>,
    bb: &Bound<'_, T>,
    window: Var,
) -> Result<ForwardDetails<T>> {
    let cfg = &model.config;
    let enc = forward_encoding(model, pb, bb, window)?;
    let rec = match cfg.decoder_kind {
        DecoderKind::Patchwise => decode_patchwise(
            pb,
            enc.hidden,
            cfg.p_dec(),
            cfg.stride,
            cfg.window,
            model.channels,
        )?,
        DecoderKind::Flat => decode_flat(pb, enc.hidden, cfg.window, model.channels)?,
    };

    Ok(ForwardDetails {
        reconstruction: rec.values,
        coverage: rec.coverage,
        gate: enc.gate,
        scale_weights: enc.scale_weights,
        selection: enc.selection,
    })
}

/// Mean squared error over all (B, W, M) entries.
pub fn reconstruction_loss<T: Scalar>(tape: &Tape<T>, recon: Var, target: Var) -> Result<Var> {
    if tape.shape(recon) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "reconstruction shape {:?} does not match target {:?}",
            tape.shape(recon),
            tape.shape(target)
        )));
    }
    Ok(tape.mse(recon, target))
}

/// Identifies a trainable tensor in either store.
#[derive(Clone, Debug, PartialEq, Eq)]
enum StoreId {
    Main,
    Backbone,
}

fn trainable_refs<T: Scalar>(model: &Model<T>) -> Vec<(StoreId, String)> {
    let mut refs: Vec<(StoreId, String)> = model
        .params
        .trainable_names()
        .into_iter()
        .map(|n| (StoreId::Main, n))
        .collect();
    refs.extend(
        model
            .backbone
            .params
            .trainable_names()
            .into_iter()
            .map(|n| (StoreId::Backbone, n)),
    );
    refs
}

fn tensor_of<'m, T: Scalar>(model: &'m Model<T>, r: &(StoreId, String)) -> &'m Tensor<T> {
    match r.0 {
        StoreId::Main => model.params.tensor(&r.1),
        StoreId::Backbone => model.backbone.params.tensor(&r.1),
    }
}

fn set_tensor<T: Scalar>(model: &mut Model<T>, r: &(StoreId, String), t: Tensor<T>) {
    match r.0 {
        StoreId::Main => model.params.set_tensor(&r.1, t),
        StoreId::Backbone => model.backbone.params.set_tensor(&r.1, t),
    }
}

/// Gather window rows `idx` from an f64 batch into a T tensor.
fn gather_windows<T: Scalar>(windows: &Tensor<f64>, idx: &[usize]) -> Tensor<T> {
    let (w, m) = (windows.shape()[1], windows.shape()[2]);
    let mut out = Tensor::<T>::zeros(&[idx.len(), w, m]);
    for (bi, &src) in idx.iter().enumerate() {
        for t in 0..w {
            for c in 0..m {
                out.data_mut()[(bi * w + t) * m + c] = lit(windows.at(&[src, t, c]));
            }
        }
    }
    out
}

/// Train with Adam (gradient-norm clipping at 1.0) on reconstruction MSE.
/// Only tensors flagged trainable are touched; the run is deterministic for
/// a fixed seed. Records the per-epoch mean loss.
pub fn train<T: Scalar>(mut model: Model<T>, data: &WindowBatch) -> Result<TrainedModel<T>> {
    if data.count() == 0 {
        return Err(Error::Data("empty training window stream".into()));
    }
    if data.window_len() != model.config.window || data.channels() != model.channels {
        return Err(Error::Shape(format!(
            "training windows are ({}, {}), model expects ({}, {})",
            data.window_len(),
            data.channels(),
            model.config.window,
            model.channels
        )));
    }

    let fingerprint_start = model.backbone.params.fingerprint_frozen();
    let refs = trainable_refs(&model);
    let hyper = model.config.train.clone();
    let mut opt = AdamState::<T>::new(refs.iter().map(|r| tensor_of(&model, r).shape().to_vec()));

    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..data.count()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x7465_7068 ^ ((epoch as u64) << 32));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut example_count = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let loss = train_step(&mut model, &refs, &mut opt, data, chunk, hyper.learning_rate)?;
            if !loss.is_finite() {
                return Err(Error::Numerics(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {}",
                    opt.step
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            example_count += chunk.len();
        }
        history.push(loss_sum / example_count as f64);
    }

    let fingerprint_end = model.backbone.params.fingerprint_frozen();
    Ok(TrainedModel { model, history, fingerprint_start, fingerprint_end, norm_stats: None })
}

struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    fn new(shapes: impl Iterator<Item = Vec<usize>>) -> Self {
        let m: Vec<Tensor<T>> = shapes.map(|s| Tensor::zeros(&s)).collect();
        let v = m.clone();
        Self { m, v, step: 0 }
    }
}

fn train_step<T: Scalar>(
    model: &mut Model<T>,
    refs: &[(StoreId, String)],
    opt: &mut AdamState<T>,
    data: &WindowBatch,
    batch_idx: &[usize],
    learning_rate: f64,
) -> Result<f64> {
    let tape = Tape::<T>::new();
    let pb = Bound::bind(&model.params, &tape);
    let bb = Bound::bind(&model.backbone.params, &tape);
    let window = tape.constant(gather_windows::<T>(&data.windows, batch_idx));

    let details = forward_details(model, &pb, &bb, window)?;
    let loss = reconstruction_loss(&tape, details.reconstruction, window)?;
    let loss_value = tape.value(loss).data()[0].to_f64().unwrap();

    let grads = tape.backward(loss);
    let mut grad_tensors: Vec<Tensor<T>> = Vec::with_capacity(refs.len());
    for r in refs.iter() {
        let var = match r.0 {
            StoreId::Main => pb.var(&r.1),
            StoreId::Backbone => bb.var(&r.1),
        };
        grad_tensors.push(grads.of(var, tensor_of(model, r).shape()));
    }

    // Global gradient-norm clipping at 1.0.
    let mut sq_sum = T::zero();
    for g in &grad_tensors {
        for &v in g.data() {
            sq_sum = sq_sum + v * v;
        }
    }
    let norm = sq_sum.sqrt();
    let clip: T = lit(1.0);
    let scale = if norm > clip { clip / norm } else { T::one() };

    opt.step += 1;
    let b1: T = lit(0.9);
    let b2: T = lit(0.999);
    let eps: T = lit(1e-8);
    let lr: T = lit(learning_rate);
    let bc1 = T::one() - b1.powi(opt.step as i32);
    let bc2 = T::one() - b2.powi(opt.step as i32);

    for (i, r) in refs.iter().enumerate() {
        let mut theta = tensor_of(model, r).clone();
        let g = &grad_tensors[i];
        for e in 0..theta.numel() {
            let gv = g.data()[e] * scale;
            let m = b1 * opt.m[i].data()[e] + (T::one() - b1) * gv;
            let v = b2 * opt.v[i].data()[e] + (T::one() - b2) * gv * gv;
            opt.m[i].data_mut()[e] = m;
            opt.v[i].data_mut()[e] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            theta.data_mut()[e] = theta.data()[e] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        set_tensor(model, r, theta);
    }

    Ok(loss_value)
}

/// Score a test series (already normalized with training statistics) by
/// sliding windows at the configured inference stride. Per-timestep score is
/// the channel-mean squared reconstruction error, averaged across all
/// windows covering the timestep.
pub fn anomaly_score<T: Scalar>(
    trained: &TrainedModel<T>,
    test: &LabeledSeries,
) -> Result<AnomalyScoreSeries> {
    let model = &trained.model;
    let w = model.config.window;
    let l = test.len();
    if l < w {
        return Err(Error::Size(format!("test series length {l} shorter than window {w}")));
    }
    if test.channels() != model.channels {
        return Err(Error::Schema(format!(
            "test series has {} channels, model expects {}",
            test.channels(),
            model.channels
        )));
    }

    let stride = model.config.infer_stride();
    let mut starts: Vec<usize> = (0..=(l - w)).step_by(stride).collect();
    // The tail is always scored: append the last full window when the stride
    // pattern does not land on it.
    if *starts.last().unwrap() != l - w {
        starts.push(l - w);
    }

    let m = model.channels;
    let mut sums = vec![0.0f64; l];
    let mut counts = vec![0usize; l];
    let batch = model.config.train.batch_size.max(1);
    for chunk in starts.chunks(batch) {
        let mut data = Tensor::<T>::zeros(&[chunk.len(), w, m]);
        for (bi, &s) in chunk.iter().enumerate() {
            for t in 0..w {
                for c in 0..m {
                    data.data_mut()[(bi * w + t) * m + c] = lit(test.values.at(&[s + t, c]));
                }
            }
        }
        let tape = Tape::<T>::new();
        let pb = Bound::bind_frozen(&model.params, &tape);
        let bb = Bound::bind_frozen(&model.backbone.params, &tape);
        let window = tape.constant(data.clone());
        let details = forward_details(model, &pb, &bb, window)?;
        let recon = tape.value(details.reconstruction);
        for (bi, &s) in chunk.iter().enumerate() {
            for t in 0..w {
                let mut err = 0.0f64;
                for c in 0..m {
                    let r = recon.at(&[bi, t, c]).to_f64().unwrap();
                    let x = data.at(&[bi, t, c]).to_f64().unwrap();
                    err += (r - x) * (r - x);
                }
                sums[s + t] += err / m as f64;
                counts[s + t] += 1;
            }
        }
    }

    let mut scores: Vec<f64> = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| s / c as f64)
        .collect();
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerics(format!(
            "non-finite anomaly score at timestep {bad}"
        )));
    }
    if model.config.smooth_window > 1 {
        scores = moving_average(&scores, model.config.smooth_window);
    }
    Ok(AnomalyScoreSeries { scores, labels: test.labels.clone() })
}

fn moving_average(scores: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..scores.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(scores.len());
            scores[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

// ---- ablation variants -----------------------------------------------------

/// The ablation family: the full model plus the eight single-change variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    WithoutSelection,
    WithoutPatching,
    WithoutGlobal,
    BaseLlm,
    SeqDecoder,
    RemoveLlm,
    Llm2Trans,
    Llm2Atten,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::WithoutSelection,
        AblationVariant::WithoutPatching,
        AblationVariant::WithoutGlobal,
        AblationVariant::BaseLlm,
        AblationVariant::SeqDecoder,
        AblationVariant::RemoveLlm,
        AblationVariant::Llm2Trans,
        AblationVariant::Llm2Atten,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "TriP-LLM",
            AblationVariant::WithoutSelection => "w/o Selection",
            AblationVariant::WithoutPatching => "w/o Patching",
            AblationVariant::WithoutGlobal => "w/o Global",
            AblationVariant::BaseLlm => "Base LLM",
            AblationVariant::SeqDecoder => "Seq-decoder",
            AblationVariant::RemoveLlm => "Remove LLM",
            AblationVariant::Llm2Trans => "LLM2Trans",
            AblationVariant::Llm2Atten => "LLM2Atten",
        }
    }

    /// Derive this variant's configuration from a base configuration.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::WithoutSelection => cfg.branches.use_selection = false,
            AblationVariant::WithoutPatching => cfg.branches.use_patching = false,
            AblationVariant::WithoutGlobal => cfg.branches.use_global = false,
            AblationVariant::BaseLlm => cfg.branches.base_llm_mode = true,
            AblationVariant::SeqDecoder => cfg.decoder_kind = DecoderKind::Flat,
            AblationVariant::RemoveLlm => cfg.backbone.kind = BackboneKind::Identity,
            AblationVariant::Llm2Trans => cfg.backbone.kind = BackboneKind::TransEncoder,
            AblationVariant::Llm2Atten => cfg.backbone.kind = BackboneKind::AttentionOnly,
        }
        cfg
    }
}

// ---- checkpoints -------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRIPCKPT";
const BACKBONE_TENSOR_PREFIX: &str = "backbone.";

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

/// Serialize a trained f32 model: magic, format version, canonical config
/// text (including history, fingerprints and normalization statistics),
/// the tensor archive, and a trailing 64-bit checksum over all prior bytes.
pub fn checkpoint_save(trained: &TrainedModel<f32>, path: &Path) -> Result<()> {
    let model = &trained.model;
    let mut cfg = model.config.to_flat();
    cfg.set("model.channels", model.channels.to_string());
    cfg.set("ckpt.code_version", crate::CODE_VERSION);
    cfg.set("ckpt.fingerprint_start", format!("{:016x}", trained.fingerprint_start));
    cfg.set("ckpt.fingerprint_end", format!("{:016x}", trained.fingerprint_end));
    if !trained.history.is_empty() {
        cfg.set("ckpt.history", join_f64(&trained.history));
    }
    if let Some(stats) = &trained.norm_stats {
        cfg.set("ckpt.norm_mean", join_f64(&stats.mean));
        cfg.set("ckpt.norm_std", join_f64(&stats.stddev));
    }
    let config_text = cfg.to_text();

    let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
    for e in model.params.entries() {
        entries.push((e.name.clone(), e.value.clone()));
    }
    for e in model.backbone.params.entries() {
        entries.push((format!("{BACKBONE_TENSOR_PREFIX}{}", e.name), e.value.clone()));
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_text.as_bytes());
    bytes.extend_from_slice(&encode_archive(&entries));
    let sum = checksum(&bytes);
    bytes.extend_from_slice(&sum.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint, verifying magic, format version and content checksum.
pub fn checkpoint_load(path: &Path) -> Result<TrainedModel<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 4 + 8 {
        return Err(Error::Checkpoint("checkpoint file too short".into()));
    }
    let (payload, sum_bytes) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(sum_bytes.try_into().unwrap());
    if checksum(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch: checkpoint corrupted".into()));
    }
    if &payload[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(payload[8..12].try_into().unwrap());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version mismatch: file has {version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let config_len = u32::from_le_bytes(payload[12..16].try_into().unwrap()) as usize;
    if 16 + config_len > payload.len() {
        return Err(Error::Checkpoint("config section exceeds file".into()));
    }
    let config_text = std::str::from_utf8(&payload[16..16 + config_len])
        .map_err(|_| Error::Checkpoint("config section is not UTF-8".into()))?;
    let flat = FlatConfig::parse(config_text)?;
    let config = ModelConfig::from_flat(&flat)?;
    let channels = flat
        .get_usize("model.channels")?
        .ok_or_else(|| Error::Checkpoint("missing model.channels".into()))?;

    let entries = decode_archive(&payload[16 + config_len..])?;
    let mut params = ParamStore::<f32>::new();
    let mut backbone_params = ParamStore::<f32>::new();
    let backbone_trainable = config.backbone.kind.trainable();
    for (name, tensor) in entries {
        match name.strip_prefix(BACKBONE_TENSOR_PREFIX) {
            Some(stripped) => backbone_params.register(stripped, tensor, backbone_trainable),
            None => params.register(name, tensor, true),
        }
    }

    let n_positions = backbone_params.get("wpe").map_or(0, |e| e.value.shape()[0]);
    let fingerprint = backbone_params.fingerprint_frozen();
    let backbone = BackboneHandle {
        config: config.backbone.clone(),
        params: backbone_params,
        fingerprint,
        n_positions,
    };

    let history = match flat.get("ckpt.history") {
        None => Vec::new(),
        Some(_) => flat.get_f64_list("ckpt.history")?.unwrap_or_default(),
    };
    let parse_fp = |key: &str| -> Result<u64> {
        let raw = flat
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
        u64::from_str_radix(raw, 16)
            .map_err(|_| Error::Checkpoint(format!("invalid fingerprint in {key}")))
    };
    let fingerprint_start = parse_fp("ckpt.fingerprint_start")?;
    let fingerprint_end = parse_fp("ckpt.fingerprint_end")?;
    let norm_stats = match (flat.get_f64_list("ckpt.norm_mean")?, flat.get_f64_list("ckpt.norm_std")?) {
        (Some(mean), Some(stddev)) => Some(NormStats { mean, stddev }),
        _ => None,
    };

    Ok(TrainedModel {
        model: Model { config, channels, params, backbone },
        history,
        fingerprint_start,
        fingerprint_end,
        norm_stats,
    })
}

impl<T: Scalar> Model<T> {
    /// Convenience forward for one window batch tensor; used by tests and
    /// inference helpers.
    pub fn reconstruct(&self, windows: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::<T>::new();
        let pb = Bound::bind_frozen(&self.params, &tape);
        let bb = Bound::bind_frozen(&self.backbone.params, &tape);
        let w = tape.constant(windows.clone());
        let details = forward_details(self, &pb, &bb, w)?;
        Ok(tape.value(details.reconstruction))
    }
}
