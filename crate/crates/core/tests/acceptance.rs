//! Acceptance suite: one test per acceptance criterion, each printing a
//! PASS line (run with `cargo test --test acceptance -- --nocapture` to see
//! them). Tests serialize through a mutex so the peak-allocation criterion
//! measures an otherwise-quiet process.

use std::sync::{Mutex, MutexGuard, PoisonError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trip_core::alloc_track::TrackingAllocator;
use trip_core::bench::{measure_peak, token_counts, CiComparator, ProcessingMode};
use trip_core::data::{
    make_windows, synth_anomaly_series, zscore_normalize, ShiftSpec, SpikeSpec, SynthSpec,
};
use trip_core::eval::{auc, evaluate, label_events, pate, AucMode, PateConfig};
use trip_core::model::backbone::build_backbone;
use trip_core::model::config::{BackboneConfig, BackboneKind, ModelConfig, TrainConfig};
use trip_core::model::encoder_local::{
    multiscale_fuse, patch_branch_forward, register_patch_branch, register_selection_branch,
    segment_patches, selection_branch_forward, ScaleFeatures,
};
use trip_core::model::gate_fusion::{
    gate_fuse_forward, project_branches, register_gate_fusion, BranchSlot,
};
use trip_core::model::pipeline::{
    anomaly_score, build_model, checkpoint_load, checkpoint_save, forward_details,
    reconstruction_loss, train, AblationVariant, TrainedModel,
};
use trip_core::model::{Bound, ParamStore};
use trip_core::tensor::gradcheck::compare_gradients;
use trip_core::tensor::{Tape, Tensor};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(PoisonError::into_inner)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
}

// ---------------------------------------------------------------------------
// Criterion 1: shape/coverage over a randomized grid of valid configurations.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_shape_and_coverage() {
    let _g = serial();
    let patch_sets: [&[usize]; 7] =
        [&[4], &[8], &[16], &[4, 8], &[4, 16], &[8, 16], &[4, 8, 16]];
    let mut configs = 0usize;
    for &w in &[16usize, 32, 48] {
        for pset in patch_sets {
            for &s in &[1usize, 2] {
                for &m in &[1usize, 3, 25] {
                    let cfg = ModelConfig {
                        window: w,
                        stride: s,
                        patch_sizes: pset.to_vec(),
                        d: 4,
                        d_prime: 8,
                        global_hidden: 4,
                        backbone: BackboneConfig {
                            kind: BackboneKind::Identity,
                            d_model: 8,
                            layers: 0,
                            heads: 1,
                            weights_path: None,
                        },
                        train: TrainConfig { seed: 1, ..Default::default() },
                        ..Default::default()
                    };
                    cfg.validate().unwrap();
                    let p_min = *pset.iter().min().unwrap();
                    let expected_tokens = (w - p_min) / s + 1;
                    assert_eq!(cfg.l_max(), expected_tokens);

                    let model = build_model::<f32>(cfg, m).unwrap();
                    let tape = Tape::<f32>::new();
                    let pb = Bound::bind_frozen(&model.params, &tape);
                    let bb = Bound::bind_frozen(&model.backbone.params, &tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(configs as u64);
                    let window = tape.constant(Tensor::from_fn(&[2, w, m], |_| {
                        rng.gen::<f32>() - 0.5
                    }));

                    // Token count of every scale matches the segmentation formula.
                    for &p in pset {
                        let patches = segment_patches(&tape, window, p, s).unwrap();
                        assert_eq!(tape.shape(patches), vec![2, (w - p) / s + 1, p, m]);
                    }

                    let details = forward_details(&model, &pb, &bb, window).unwrap();
                    assert_eq!(
                        tape.shape(details.reconstruction),
                        vec![2, w, m],
                        "W={w} pset={pset:?} s={s} M={m}"
                    );
                    assert_eq!(details.coverage.len(), w);
                    assert!(details.coverage.iter().all(|&c| c >= 1));
                    let sw = details.scale_weights.unwrap();
                    assert_eq!(sw.shape(), &[2, pset.len()]);
                    configs += 1;
                }
            }
        }
    }
    assert_eq!(configs, 126);
    println!("ACCEPTANCE 1 PASS: shape/coverage over {configs} configurations (exact)");
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients vs central finite differences, micro config.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_correctness() {
    let _g = serial();
    // Micro configuration: W=16, p={4}, M=2, d=4, D'=8, identity backbone.
    let cfg = ModelConfig {
        window: 16,
        stride: 1,
        patch_sizes: vec![4],
        d: 4,
        d_prime: 8,
        global_hidden: 4,
        backbone: BackboneConfig {
            kind: BackboneKind::Identity,
            d_model: 8,
            layers: 0,
            heads: 1,
            weights_path: None,
        },
        train: TrainConfig { seed: 3, ..Default::default() },
        ..Default::default()
    };
    let model = build_model::<f64>(cfg, 2).unwrap();
    let names: Vec<String> =
        model.params.entries().iter().map(|e| e.name.clone()).collect();
    assert!(model.params.entries().iter().all(|e| e.trainable));

    let mut inputs: Vec<Tensor<f64>> =
        names.iter().map(|n| model.params.tensor(n).clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    inputs.push(rand_tensor(&mut rng, &[1, 16, 2])); // the window input
    let target = rand_tensor(&mut rng, &[1, 16, 2]);
    let param_count: usize = inputs.iter().map(|t| t.numel()).sum();

    let names2 = names.clone();
    let model2 = model.clone();
    let mismatches = compare_gradients(
        &inputs,
        move |tape, vars| {
            let pb = Bound::from_vars(
                tape,
                names2.iter().cloned().zip(vars[..names2.len()].iter().copied()),
            );
            let bb = Bound::bind(&model2.backbone.params, tape);
            let window = vars[names2.len()];
            let details = forward_details(&model2, &pb, &bb, window).unwrap();
            let target_v = tape.constant(target.clone());
            reconstruction_loss(tape, details.reconstruction, target_v).unwrap()
        },
        1e-4,
        1e-6,
    );
    assert!(
        mismatches.is_empty(),
        "gradient mismatches: {:?}",
        &mismatches[..mismatches.len().min(5)]
    );
    println!(
        "ACCEPTANCE 2 PASS: {param_count} parameter/input elements match finite differences (rel err < 1e-4, 64-bit)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: frozen backbone fingerprint across a 100+ step training run.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_frozen_backbone_contract() {
    let _g = serial();
    let cfg = ModelConfig {
        window: 12,
        stride: 1,
        patch_sizes: vec![4],
        d: 3,
        d_prime: 6,
        global_hidden: 4,
        backbone: BackboneConfig {
            kind: BackboneKind::PretrainedFrozen, // frozen random stand-in
            d_model: 8,
            layers: 1,
            heads: 2,
            weights_path: None,
        },
        train: TrainConfig { learning_rate: 1e-3, epochs: 4, batch_size: 4, seed: 5 },
        ..Default::default()
    };
    let spec = SynthSpec { length: 500, channels: 2, ..Default::default() };
    let series = synth_anomaly_series(&spec, 5).unwrap();
    let windows = make_windows(&series, 12, 4).unwrap();
    let steps = 4 * windows.count().div_ceil(4);
    assert!(steps >= 100, "need at least 100 optimizer steps, have {steps}");

    let model = build_model::<f32>(cfg, 2).unwrap();
    let before: Vec<(String, Tensor<f32>)> = model
        .backbone
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    let fp_before = model.backbone.fingerprint;

    let trained = train(model, &windows).unwrap();
    assert_eq!(trained.fingerprint_start, fp_before);
    assert_eq!(trained.fingerprint_end, fp_before, "fingerprint changed during training");
    for (name, tensor) in &before {
        let bits_before: Vec<u32> = tensor.data().iter().map(|v| v.to_bits()).collect();
        let after = trained.model.backbone.params.tensor(name);
        let bits_after: Vec<u32> = after.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_before, bits_after, "frozen tensor '{name}' changed");
    }
    println!("ACCEPTANCE 3 PASS: backbone fingerprint bit-identical across {steps} training steps");
}

// ---------------------------------------------------------------------------
// Criterion 4: convex-combination invariants over 1000 random instances.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_convex_combinations() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let tol = 1e-6;
    for iter in 0..1000u32 {
        // Gate fusion: beta rows sum to one, entries in [0,1], fused value
        // inside the elementwise convex hull of the branches.
        let mut store = ParamStore::<f64>::new();
        let mut prng = ChaCha8Rng::seed_from_u64(1000 + iter as u64);
        register_gate_fusion(
            &mut store,
            &mut prng,
            &[(BranchSlot::Patching, 5), (BranchSlot::Selection, 5), (BranchSlot::Global, 3)],
            4,
            4,
        );
        let tape = Tape::<f64>::new();
        let bound = Bound::bind_frozen(&store, &tape);
        let feats = [
            (BranchSlot::Patching, tape.constant(rand_tensor(&mut rng, &[2, 3, 5]))),
            (BranchSlot::Selection, tape.constant(rand_tensor(&mut rng, &[2, 3, 5]))),
            (BranchSlot::Global, tape.constant(rand_tensor(&mut rng, &[2, 3, 3]))),
        ];
        let projected = project_branches(&bound, &feats).unwrap();
        let fusion = gate_fuse_forward(&bound, &projected).unwrap();
        let beta = &fusion.weights.beta;
        for row in 0..6 {
            let mut sum = 0.0;
            for k in 0..3 {
                let b = beta.data()[row * 3 + k];
                assert!((-tol..=1.0 + tol).contains(&b), "beta out of range: {b}");
                sum += b;
            }
            assert!((sum - 1.0).abs() < tol, "beta row sums to {sum}");
        }
        let fused = tape.value(fusion.fused);
        let branches: Vec<Tensor<f64>> = projected.iter().map(|&(_, v)| tape.value(v)).collect();
        for e in 0..fused.numel() {
            let lo = branches.iter().map(|t| t.data()[e]).fold(f64::INFINITY, f64::min);
            let hi = branches.iter().map(|t| t.data()[e]).fold(f64::NEG_INFINITY, f64::max);
            let v = fused.data()[e];
            assert!(
                v >= lo - 1e-9 && v <= hi + 1e-9,
                "fused value {v} outside hull [{lo}, {hi}]"
            );
        }

        // Multiscale fusion: per-batch scale weights sum to one, and with
        // all scales already at l_max (weights the only variation) the fused
        // output stays in the elementwise convex hull of the scales.
        let scale_tensors: Vec<(Tensor<f64>, Tensor<f64>)> = (0..3)
            .map(|_| (rand_tensor(&mut rng, &[2, 4, 3]), rand_tensor(&mut rng, &[2, 4, 3])))
            .collect();
        let scales: Vec<ScaleFeatures> = scale_tensors
            .iter()
            .map(|(p, s)| ScaleFeatures {
                patching: Some(tape.constant(p.clone())),
                selection: Some(tape.constant(s.clone())),
            })
            .collect();
        let fusedms = multiscale_fuse(&tape, &scales, 4).unwrap();
        let w = tape.value(fusedms.scale_weights);
        for b in 0..2 {
            let sum: f64 = (0..3).map(|k| w.at(&[b, k])).sum();
            assert!((sum - 1.0).abs() < tol, "scale weights sum to {sum}");
        }
        let fused_p = tape.value(fusedms.patching.unwrap());
        for b in 0..2 {
            for t in 0..4 {
                for f in 0..3 {
                    let vals: Vec<f64> =
                        scale_tensors.iter().map(|(p, _)| p.at(&[b, t, f])).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = fused_p.at(&[b, t, f]);
                    assert!(
                        v >= lo - 1e-9 && v <= hi + 1e-9,
                        "fused scale value {v} outside hull [{lo}, {hi}]"
                    );
                }
            }
        }

        // Selection attention rows sum to one.
        let (p, m, d) = (3, 2, 2);
        let mut sel_store = ParamStore::<f64>::new();
        register_patch_branch(&mut sel_store, &mut prng, p, m, d);
        register_selection_branch(&mut sel_store, &mut prng, p, m, d, true);
        let sel_bound = Bound::bind_frozen(&sel_store, &tape);
        let win = tape.constant(rand_tensor(&mut rng, &[2, 6, m]));
        let patches = segment_patches(&tape, win, p, 1).unwrap();
        let f_p = patch_branch_forward(&sel_bound, p, patches).unwrap().feature;
        let (_, state) = selection_branch_forward(&sel_bound, p, patches, Some(f_p)).unwrap();
        for b in 0..2 {
            let sum: f64 = (0..4).map(|i| state.attention.at(&[b, i])).sum();
            assert!((sum - 1.0).abs() < tol, "attention row sums to {sum}");
        }
        assert!((0.0..=1.0).contains(&state.tau));
    }
    println!("ACCEPTANCE 4 PASS: beta/alpha/scale-weight convexity over 1000 random instances (1e-6)");
}

// ---------------------------------------------------------------------------
// Criterion 5: PATE equals a brute-force oracle; zero buffers equal AUC-PR.
// ---------------------------------------------------------------------------

/// Independent oracle: recompute the proximity weight from its definition at
/// each timestep and the weighted precision/recall from scratch at every
/// threshold.
mod pate_oracle {
    use super::label_events;

    fn weight_at(t: usize, labels: &[u8], pre: usize, post: usize) -> f64 {
        let mut w: f64 = 0.0;
        for (s, e) in label_events(labels) {
            if t >= s && t < e {
                return 1.0;
            }
            if t < s {
                let gap = s - t;
                if gap <= pre {
                    w = w.max((pre - gap + 1) as f64 / (pre + 1) as f64);
                }
            } else if t >= e {
                let gap = t - e + 1;
                if gap <= post {
                    w = w.max((post - gap + 1) as f64 / (post + 1) as f64);
                }
            }
        }
        w
    }

    fn area(scores: &[f64], labels: &[u8], pre: usize, post: usize) -> f64 {
        let w: Vec<f64> = (0..labels.len()).map(|t| weight_at(t, labels, pre, post)).collect();
        let total_pos: f64 = w.iter().sum();
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut out = 0.0;
        for &th in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (t, &s) in scores.iter().enumerate() {
                if s >= th {
                    tp += w[t];
                    fp += 1.0 - w[t];
                }
            }
            let recall = tp / total_pos;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
            out += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        out
    }

    pub fn pate(scores: &[f64], labels: &[u8], pre: &[usize], post: &[usize]) -> f64 {
        let mut total = 0.0;
        for &e in pre {
            for &d in post {
                total += area(scores, labels, e, d);
            }
        }
        total / (pre.len() * post.len()) as f64
    }
}

#[test]
fn criterion_5_pate_oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let grid = PateConfig::default();

    for _ in 0..500 {
        let n = rng.gen_range(3..=12);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 4.0).round() / 4.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.35) as u8).collect();
        labels[rng.gen_range(0..n)] = 1;
        let fast = pate(&scores, &labels, &grid).unwrap();
        let slow = pate_oracle::pate(&scores, &labels, &grid.pre_buffers, &grid.post_buffers);
        assert!((fast - slow).abs() < 1e-9, "pate {fast} vs oracle {slow}");
    }

    let zero = PateConfig { pre_buffers: vec![0], post_buffers: vec![0] };
    for _ in 0..500 {
        let n = rng.gen_range(10..=200);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let p = pate(&scores, &labels, &zero).unwrap();
        let a = auc(&scores, &labels, AucMode::Pr).unwrap();
        assert!((p - a).abs() < 1e-9, "pate(0,0) {p} vs auc_pr {a}");
    }
    println!("ACCEPTANCE 5 PASS: PATE matches brute-force oracle (500x) and AUC-PR at zero buffers (500x), 1e-9");
}

// ---------------------------------------------------------------------------
// Criterion 6: synthetic end-to-end detection quality at a fixed seed.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_synthetic_end_to_end_detection() {
    let _g = serial();
    let cfg = ModelConfig {
        window: 48,
        stride: 1,
        patch_sizes: vec![8, 16],
        d: 8,
        d_prime: 32,
        global_hidden: 16,
        backbone: BackboneConfig {
            kind: BackboneKind::PretrainedFrozen,
            d_model: 32,
            layers: 2,
            heads: 4,
            weights_path: None,
        },
        train: TrainConfig { learning_rate: 1e-3, epochs: 3, batch_size: 16, seed: 42 },
        infer_stride: Some(8),
        ..Default::default()
    };

    // Clean training series.
    let train_spec = SynthSpec { length: 4000, channels: 3, ..Default::default() };
    let train_series = synth_anomaly_series(&train_spec, 42).unwrap();
    let (train_norm, stats) = zscore_normalize(&train_series, None).unwrap();
    let windows = make_windows(&train_norm, 48, 4).unwrap();

    let model = build_model::<f32>(cfg, 3).unwrap();
    let trained = train(model, &windows).unwrap();

    // Test series with injected spikes and level shifts.
    let test_spec = SynthSpec {
        length: 1200,
        channels: 3,
        spikes: vec![SpikeSpec { at: 200, width: 6, magnitude_sigmas: 2.5 }],
        level_shifts: vec![
            ShiftSpec { start: 450, duration: 180, magnitude_sigmas: 1.5 },
            ShiftSpec { start: 900, duration: 150, magnitude_sigmas: 1.6 },
        ],
        ..Default::default()
    };
    let test_series = synth_anomaly_series(&test_spec, 43).unwrap();
    let (test_norm, _) = zscore_normalize(&test_series, Some(&stats)).unwrap();

    let scored = anomaly_score(&trained, &test_norm).unwrap();
    let labels = scored.labels.as_deref().unwrap();
    let report = evaluate(&scored.scores, labels, &PateConfig::default()).unwrap();

    assert!(
        report.auc_roc >= 0.90,
        "point-wise AUC-ROC {} below 0.90",
        report.auc_roc
    );
    assert!(
        report.pate >= report.auc_pr - 0.05,
        "PATE {} below AUC-PR {} - 0.05",
        report.pate,
        report.auc_pr
    );
    println!(
        "ACCEPTANCE 6 PASS: end-to-end detection auc_roc={:.4} (>=0.90), pate={:.4} >= auc_pr-{:.4}-0.05",
        report.auc_roc, report.pate, report.auc_pr
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: the eight ablation variants plus the full model all run and
// produce pairwise-distinct score vectors.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_ablation_plumbing() {
    let _g = serial();
    let base = ModelConfig {
        window: 12,
        stride: 1,
        patch_sizes: vec![4, 6],
        d: 3,
        d_prime: 6,
        global_hidden: 4,
        backbone: BackboneConfig {
            kind: BackboneKind::PretrainedFrozen,
            d_model: 8,
            layers: 1,
            heads: 2,
            weights_path: None,
        },
        train: TrainConfig { learning_rate: 2e-3, epochs: 1, batch_size: 4, seed: 9 },
        ..Default::default()
    };

    // 40 training windows with batch 4 and one epoch: exactly 10 steps.
    let train_spec = SynthSpec { length: 168, channels: 2, ..Default::default() };
    let train_series = synth_anomaly_series(&train_spec, 9).unwrap();
    let (train_norm, stats) = zscore_normalize(&train_series, None).unwrap();
    let windows = make_windows(&train_norm, 12, 4).unwrap();
    assert_eq!(windows.count(), 40);

    let test_spec = SynthSpec {
        length: 80,
        channels: 2,
        spikes: vec![SpikeSpec { at: 30, width: 2, magnitude_sigmas: 6.0 }],
        ..Default::default()
    };
    let test_series = synth_anomaly_series(&test_spec, 10).unwrap();
    let (test_norm, _) = zscore_normalize(&test_series, Some(&stats)).unwrap();

    let mut score_vectors: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for variant in AblationVariant::ALL {
        let cfg = variant.apply(&base);
        let model = build_model::<f32>(cfg, 2).unwrap();
        let trained = train(model, &windows).unwrap();
        let scored = anomaly_score(&trained, &test_norm).unwrap();
        assert!(scored.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
        score_vectors.push((variant.name(), scored.scores));
    }
    assert_eq!(score_vectors.len(), 9);
    for i in 0..score_vectors.len() {
        for j in i + 1..score_vectors.len() {
            assert_ne!(
                score_vectors[i].1, score_vectors[j].1,
                "variants '{}' and '{}' produced identical score vectors",
                score_vectors[i].0, score_vectors[j].0
            );
        }
    }
    println!("ACCEPTANCE 7 PASS: 9 variants trained 10 steps each; score vectors pairwise distinct");
}

// ---------------------------------------------------------------------------
// Criterion 8: memory-scaling trend, analytic (exact) and measured (ordinal).
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_memory_scaling_trend() {
    let _g = serial();
    // Analytic part: patch-token totals independent of M; CI = M x patch-token.
    for &w in &[16usize, 48] {
        for &p in &[4usize, 8] {
            for &s in &[1usize, 2] {
                let cfg = ModelConfig {
                    window: w,
                    stride: s,
                    patch_sizes: vec![p],
                    ..Default::default()
                };
                for &b in &[1usize, 2, 16] {
                    let baseline = token_counts(&cfg, b, 1, ProcessingMode::PatchTokens);
                    for &m in &[1usize, 3, 8, 55] {
                        let trip = token_counts(&cfg, b, m, ProcessingMode::PatchTokens);
                        let ci = token_counts(&cfg, b, m, ProcessingMode::ChannelIndependent);
                        assert_eq!(trip.total_tokens, baseline.total_tokens);
                        assert_eq!(ci.total_tokens, m * trip.total_tokens);
                    }
                }
            }
        }
    }

    // Measured part: CI peak strictly above patch-token peak at M=8 on a
    // tiny backbone, mirroring the reported direction.
    let m = 8;
    let batch = 2;
    let cfg = ModelConfig {
        window: 48,
        stride: 1,
        patch_sizes: vec![8],
        d: 8,
        d_prime: 32,
        global_hidden: 8,
        backbone: BackboneConfig {
            kind: BackboneKind::TransEncoder,
            d_model: 64,
            layers: 2,
            heads: 4,
            weights_path: None,
        },
        train: TrainConfig { seed: 11, ..Default::default() },
        ..Default::default()
    };
    let windows = trip_core::bench::bench_windows::<f32>(batch, 48, m, 77);

    let backbone = build_backbone::<f32>(&cfg.backbone, cfg.l_max(), 11).unwrap();
    let comparator = CiComparator::<f32>::new(8, 1, 64, 11);
    let model = build_model::<f32>(cfg, m).unwrap();

    let run_ci = || {
        let (out, peak) = measure_peak(|| comparator.forward(&backbone, &windows)).unwrap();
        out.unwrap();
        peak
    };
    let run_trip = || {
        let (out, peak) =
            measure_peak(|| trip_core::bench::trip_forward_no_decoder(&model, &windows)).unwrap();
        out.unwrap();
        peak
    };
    // An empty job peaks at the resident baseline.
    let baseline = trip_core::alloc_track::current_bytes() as i64;
    let (_, empty_peak) = measure_peak(|| ()).unwrap();
    assert!(
        (empty_peak as i64 - baseline).abs() < 16 * 1024,
        "empty job peak {empty_peak} far from baseline {baseline}"
    );

    let ci_a = run_ci();
    let trip_a = run_trip();
    let ci_b = run_ci();
    let trip_b = run_trip();

    // Repeatability within 5% on identical runs.
    let close = |a: u64, b: u64| (a as f64 - b as f64).abs() / (a as f64) < 0.05;
    assert!(close(ci_a, ci_b), "CI peaks not repeatable: {ci_a} vs {ci_b}");
    assert!(close(trip_a, trip_b), "patch-token peaks not repeatable: {trip_a} vs {trip_b}");
    assert!(
        ci_a > trip_a,
        "CI measured peak {ci_a} not above patch-token peak {trip_a} at M={m}"
    );
    println!(
        "ACCEPTANCE 8 PASS: token algebra exact; measured peaks CI={ci_a} > TriP={trip_a} bytes at M={m}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism of training and bit-exact persistence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_and_persistence() {
    let _g = serial();
    let cfg = ModelConfig {
        window: 12,
        stride: 1,
        patch_sizes: vec![4, 6],
        d: 3,
        d_prime: 6,
        global_hidden: 4,
        backbone: BackboneConfig {
            kind: BackboneKind::PretrainedFrozen,
            d_model: 8,
            layers: 1,
            heads: 2,
            weights_path: None,
        },
        train: TrainConfig { learning_rate: 1e-3, epochs: 2, batch_size: 4, seed: 77 },
        ..Default::default()
    };
    let spec = SynthSpec { length: 200, channels: 2, ..Default::default() };
    let series = synth_anomaly_series(&spec, 77).unwrap();
    let (norm, stats) = zscore_normalize(&series, None).unwrap();
    let windows = make_windows(&norm, 12, 3).unwrap();

    let run = || -> TrainedModel<f32> {
        let model = build_model::<f32>(cfg.clone(), 2).unwrap();
        train(model, &windows).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history, "training histories differ across reruns");
    for (ea, eb) in a.model.params.entries().iter().zip(b.model.params.entries().iter()) {
        let bits_a: Vec<u32> = ea.value.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = eb.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "parameter '{}' differs across reruns", ea.name);
    }

    // Persistence round-trip.
    let mut trained = a;
    trained.norm_stats = Some(stats);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint_save(&trained, &path).unwrap();
    let loaded = checkpoint_load(&path).unwrap();
    for (ea, eb) in trained
        .model
        .params
        .entries()
        .iter()
        .chain(trained.model.backbone.params.entries().iter())
        .zip(loaded.model.params.entries().iter().chain(loaded.model.backbone.params.entries().iter()))
    {
        let bits_a: Vec<u32> = ea.value.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = eb.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor '{}' not bit-exact after round-trip", ea.name);
    }

    let test_spec = SynthSpec { length: 60, channels: 2, ..Default::default() };
    let test = synth_anomaly_series(&test_spec, 78).unwrap();
    let (test_norm, _) = zscore_normalize(&test, Some(trained.norm_stats.as_ref().unwrap())).unwrap();
    let s1 = anomaly_score(&trained, &test_norm).unwrap();
    let s2 = anomaly_score(&loaded, &test_norm).unwrap();
    assert_eq!(s1.scores, s2.scores, "scores differ after checkpoint round-trip");
    println!("ACCEPTANCE 9 PASS: bit-identical reruns and bit-exact checkpoint round-trip");
}
