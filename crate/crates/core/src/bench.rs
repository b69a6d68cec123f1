//! Memory-scaling accounting: analytic backbone token counts for
//! channel-independent (CI) processing versus patch-token processing, an
//! activation-byte model, and best-effort measured peak allocation.
//!
//! CI folds the M channels into the batch dimension, so the backbone sees
//! B*M sequences; the patch-token encoder always hands the backbone exactly
//! B sequences of l_max tokens, independent of M.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc_track;
use crate::error::{Error, Result};
use crate::model::backbone::{backbone_forward, BackboneHandle};
use crate::model::config::{BackboneConfig, BackboneKind, ModelConfig};
use crate::model::pipeline::{forward_encoding, Model};
use crate::model::{init_uniform, init_zeros, Bound};
use crate::tensor::{lit, Scalar, Tape, Tensor};

/// How window channels are presented to the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcessingMode {
    /// Channel independence: each channel becomes its own sequence.
    ChannelIndependent,
    /// Patch tokens: the tri-branch encoder emits one token sequence.
    PatchTokens,
}

impl ProcessingMode {
    pub fn label(self) -> &'static str {
        match self {
            ProcessingMode::ChannelIndependent => "CI",
            ProcessingMode::PatchTokens => "TriP",
        }
    }
}

/// Token and byte accounting for one configuration.
#[derive(Clone, Debug)]
pub struct MemReport {
    pub mode: ProcessingMode,
    pub sequences: usize,
    pub tokens_per_sequence: usize,
    pub total_tokens: usize,
    pub estimated_activation_bytes: Option<u64>,
    pub measured_peak_bytes: Option<u64>,
}

/// Analytic token counts. CI sees B*M sequences of l tokens (for the
/// smallest patch size); patch-token processing sees B sequences of l_max.
pub fn token_counts(config: &ModelConfig, batch: usize, channels: usize, mode: ProcessingMode) -> MemReport {
    let tokens = config.l_max();
    let sequences = match mode {
        ProcessingMode::ChannelIndependent => batch * channels,
        ProcessingMode::PatchTokens => batch,
    };
    MemReport {
        mode,
        sequences,
        tokens_per_sequence: tokens,
        total_tokens: sequences * tokens,
        estimated_activation_bytes: None,
        measured_peak_bytes: None,
    }
}

/// Per-layer activation multiplier of the byte model, a documented constant
/// per backbone kind (attention + MLP intermediates per token).
pub fn activation_multiplier(kind: BackboneKind) -> u64 {
    match kind {
        BackboneKind::PretrainedFrozen | BackboneKind::TransEncoder => 12,
        BackboneKind::AttentionOnly => 4,
        BackboneKind::Identity => 0,
    }
}

fn stack_param_count(cfg: &BackboneConfig, n_positions: usize) -> u64 {
    let d = cfg.d_model as u64;
    match cfg.kind {
        BackboneKind::Identity => 0,
        BackboneKind::AttentionOnly => 2 * d + d * 3 * d + 3 * d + d * d + d,
        BackboneKind::PretrainedFrozen | BackboneKind::TransEncoder => {
            let per_layer = 2 * d          // ln_1
                + d * 3 * d + 3 * d        // qkv
                + d * d + d                // attn proj
                + 2 * d                    // ln_2
                + d * 4 * d + 4 * d        // mlp fc
                + 4 * d * d + d; // mlp proj
            n_positions as u64 * d + cfg.layers as u64 * per_layer + 2 * d
        }
    }
}

/// Fill in the activation-byte estimate:
/// (total tokens x d_model x layers x multiplier + weight values) x bytes.
/// A model of framework behavior, reported alongside measurements, never in
/// place of them.
pub fn activation_estimate(
    mut report: MemReport,
    backbone: &BackboneConfig,
    n_positions: usize,
    bytes_per_value: u64,
) -> MemReport {
    let act = report.total_tokens as u64
        * backbone.d_model as u64
        * backbone.layers as u64
        * activation_multiplier(backbone.kind);
    let weights = stack_param_count(backbone, n_positions);
    report.estimated_activation_bytes = Some((act + weights) * bytes_per_value);
    report
}

/// High-water-mark bytes while running `job`. Requires the tracking
/// allocator; without it the result would be meaningless zeros, so a typed
/// error is returned instead and callers report measurement as unavailable.
pub fn measure_peak<R>(job: impl FnOnce() -> R) -> Result<(R, u64)> {
    if !alloc_track::hook_installed() {
        return Err(Error::MeasureUnavailable(
            "no tracking allocator installed in this binary".into(),
        ));
    }
    alloc_track::reset_peak();
    let out = job();
    Ok((out, alloc_track::peak_bytes() as u64))
}

/// The CI comparator: patchify each channel independently, fold channels
/// into the batch dimension, apply one linear embedding to the backbone
/// width, and run the backbone. Used for counting and measurement only.
pub struct CiComparator<T: Scalar> {
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub patch_size: usize,
    pub stride: usize,
}

impl<T: Scalar> CiComparator<T> {
    pub fn new(patch_size: usize, stride: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            embed_w: init_uniform(&mut rng, &[patch_size, d_model], patch_size),
            embed_b: init_zeros(&[d_model]),
            patch_size,
            stride,
        }
    }

    /// Forward a (B, W, M) window batch through embed + backbone with the
    /// channels folded into the batch; returns the hidden-state shape.
    pub fn forward(&self, backbone: &BackboneHandle<T>, windows: &Tensor<T>) -> Result<Vec<usize>> {
        let shape = windows.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("windows must be (B, W, M), got {shape:?}")));
        }
        let (b, w, m) = (shape[0], shape[1], shape[2]);
        let p = self.patch_size;
        if p > w {
            return Err(Error::Size(format!("patch size {p} exceeds window {w}")));
        }
        let l = (w - p) / self.stride + 1;

        // (B, W, M) -> (B*M, l, p): per-channel overlapping patches.
        let mut folded = Tensor::<T>::zeros(&[b * m, l, p]);
        for bi in 0..b {
            for c in 0..m {
                for i in 0..l {
                    for j in 0..p {
                        folded.data_mut()[((bi * m + c) * l + i) * p + j] =
                            windows.data()[(bi * w + i * self.stride + j) * m + c];
                    }
                }
            }
        }

        let tape = Tape::<T>::new();
        let x = tape.constant(folded);
        let w_v = tape.constant(self.embed_w.clone());
        let b_v = tape.constant(self.embed_b.clone());
        let tokens = tape.linear(x, w_v, Some(b_v)); // (B*M, l, d_model)
        let bb = Bound::bind_frozen(&backbone.params, &tape);
        let hidden = backbone_forward(&bb, backbone, tokens)?;
        Ok(tape.shape(hidden))
    }
}

/// Forward the full tri-branch encoder + backbone without the decoder
/// (both comparison sides run decoder-free), for the measured side of the
/// comparison.
pub fn trip_forward_no_decoder<T: Scalar>(model: &Model<T>, windows: &Tensor<T>) -> Result<Vec<usize>> {
    let tape = Tape::<T>::new();
    let pb = Bound::bind_frozen(&model.params, &tape);
    let bb = Bound::bind_frozen(&model.backbone.params, &tape);
    let w = tape.constant(windows.clone());
    let enc = forward_encoding(model, &pb, &bb, w)?;
    Ok(tape.shape(enc.hidden))
}

/// One row of the benchmark grid CSV.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub backbone: String,
    pub batch: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub mode: ProcessingMode,
    pub report: MemReport,
}

pub fn bench_csv_header() -> &'static str {
    "backbone,batch,patch_size,channels,mode,sequences,tokens_per_sequence,total_tokens,estimated_bytes,measured_peak_bytes"
}

pub fn bench_csv_row(row: &BenchRow) -> String {
    let est = row
        .report
        .estimated_activation_bytes
        .map_or(String::new(), |v| v.to_string());
    let measured = row
        .report
        .measured_peak_bytes
        .map_or(String::new(), |v| v.to_string());
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        row.backbone,
        row.batch,
        row.patch_size,
        row.channels,
        row.report.mode.label(),
        row.report.sequences,
        row.report.tokens_per_sequence,
        row.report.total_tokens,
        est,
        measured
    )
}

/// Build a (B, W, M) batch of deterministic pseudo-random windows in [-1, 1].
pub fn bench_windows<T: Scalar>(batch: usize, window: usize, channels: usize, seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * window * channels;
    Tensor::new(
        &[batch, window, channels],
        (0..n).map(|_| lit(rng.gen::<f64>() * 2.0 - 1.0)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(window: usize, patch: usize, stride: usize) -> ModelConfig {
        ModelConfig {
            window,
            stride,
            patch_sizes: vec![patch],
            ..Default::default()
        }
    }

    #[test]
    fn token_counts_match_hand_arithmetic() {
        // B=16, M=55, W=48, p=8, s=1: CI total 16*55*41, patch-token 16*41.
        let c = cfg(48, 8, 1);
        let ci = token_counts(&c, 16, 55, ProcessingMode::ChannelIndependent);
        assert_eq!(ci.sequences, 16 * 55);
        assert_eq!(ci.tokens_per_sequence, 41);
        assert_eq!(ci.total_tokens, 36080);
        let trip = token_counts(&c, 16, 55, ProcessingMode::PatchTokens);
        assert_eq!(trip.sequences, 16);
        assert_eq!(trip.total_tokens, 656);
        assert_eq!(ci.total_tokens / trip.total_tokens, 55);
    }

    #[test]
    fn single_channel_degenerates_to_equality() {
        let c = cfg(48, 8, 1);
        let ci = token_counts(&c, 4, 1, ProcessingMode::ChannelIndependent);
        let trip = token_counts(&c, 4, 1, ProcessingMode::PatchTokens);
        assert_eq!(ci.total_tokens, trip.total_tokens);
    }

    #[test]
    fn ci_scales_linearly_in_channels_and_batch() {
        let c = cfg(32, 8, 2);
        for (b, m) in [(2, 5), (4, 5), (2, 10), (8, 20)] {
            let base = token_counts(&c, b, m, ProcessingMode::ChannelIndependent);
            let double_m = token_counts(&c, b, 2 * m, ProcessingMode::ChannelIndependent);
            let double_b = token_counts(&c, 2 * b, m, ProcessingMode::ChannelIndependent);
            assert_eq!(double_m.total_tokens, 2 * base.total_tokens);
            assert_eq!(double_b.total_tokens, 2 * base.total_tokens);
            // patch-token totals are independent of M
            let t1 = token_counts(&c, b, m, ProcessingMode::PatchTokens);
            let t2 = token_counts(&c, b, 2 * m, ProcessingMode::PatchTokens);
            assert_eq!(t1.total_tokens, t2.total_tokens);
        }
    }

    #[test]
    fn identity_backbone_estimate_is_weight_free() {
        let c = cfg(48, 8, 1);
        let report = token_counts(&c, 2, 3, ProcessingMode::PatchTokens);
        let bb = BackboneConfig { kind: BackboneKind::Identity, ..Default::default() };
        let est = activation_estimate(report, &bb, 0, 4);
        assert_eq!(est.estimated_activation_bytes, Some(0));
    }

    #[test]
    fn estimate_scales_exactly_with_bytes_per_value() {
        let c = cfg(48, 8, 1);
        let bb = BackboneConfig::default();
        let r4 = activation_estimate(
            token_counts(&c, 2, 3, ProcessingMode::PatchTokens),
            &bb,
            41,
            4,
        );
        let r1 = activation_estimate(
            token_counts(&c, 2, 3, ProcessingMode::PatchTokens),
            &bb,
            41,
            1,
        );
        assert_eq!(r4.estimated_activation_bytes.unwrap(), 4 * r1.estimated_activation_bytes.unwrap());
    }

    #[test]
    fn measure_without_hook_is_unavailable() {
        // Unit-test binaries do not install the tracking allocator.
        if !alloc_track::hook_installed() {
            assert!(matches!(
                measure_peak(|| 1 + 1),
                Err(Error::MeasureUnavailable(_))
            ));
        }
    }

    #[test]
    fn ci_comparator_shapes() {
        let backbone = crate::model::backbone::build_backbone::<f32>(
            &BackboneConfig { kind: BackboneKind::AttentionOnly, d_model: 8, layers: 0, heads: 2, weights_path: None },
            0,
            3,
        )
        .unwrap();
        let comp = CiComparator::<f32>::new(4, 1, 8, 5);
        let windows = bench_windows::<f32>(2, 12, 3, 7);
        let shape = comp.forward(&backbone, &windows).unwrap();
        assert_eq!(shape, vec![2 * 3, 9, 8]);
    }
}
