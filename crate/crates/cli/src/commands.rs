//! Command implementations. Each writes its result files into the output
//! directory after the manifest.

use std::path::Path;

use trip_core::bench::{
    activation_estimate, bench_csv_header, bench_csv_row, bench_windows, measure_peak,
    token_counts, BenchRow, CiComparator, ProcessingMode,
};
use trip_core::config::FlatConfig;
use trip_core::data::{
    load_csv_dataset, make_windows, save_series_csv, synth_anomaly_series, zscore_normalize,
    LabeledSeries,
};
use trip_core::eval::{evaluate, read_scores_csv, write_scores_csv, EvalReport, PateConfig};
use trip_core::model::backbone::build_backbone;
use trip_core::model::config::ModelConfig;
use trip_core::model::pipeline::{
    anomaly_score, build_model, checkpoint_load, checkpoint_save, train as train_model,
    AblationVariant, Model, TrainedModel,
};
use trip_core::{Error, Result};

use crate::runcfg;

pub fn synth(cfg: &FlatConfig, out: &Path) -> Result<()> {
    let spec = runcfg::synth_spec(cfg)?;
    let seed = runcfg::synth_seed(cfg)?;
    let series = synth_anomaly_series(&spec, seed)?;
    save_series_csv(&series, &out.join("values.csv"), Some(&out.join("labels.csv")))?;
    println!(
        "synth: wrote {} timesteps x {} channels ({} anomalous)",
        series.len(),
        series.channels(),
        series.labels.as_ref().map_or(0, |l| l.iter().filter(|&&v| v == 1).count())
    );
    Ok(())
}

fn load_train_series(cfg: &FlatConfig) -> Result<LabeledSeries> {
    let values = runcfg::required_path(cfg, "data.values_path")?;
    let labels = cfg.get("data.labels_path").filter(|s| !s.is_empty());
    load_csv_dataset(&values, labels.map(Path::new))
}

pub fn train(cfg: &FlatConfig, out: &Path) -> Result<()> {
    let series = load_train_series(cfg)?;
    let model_cfg = ModelConfig::from_flat(cfg)?;
    let window_stride = cfg.get_usize("data.window_stride")?.unwrap_or(1);

    let (normalized, stats) = zscore_normalize(&series, None)?;
    let windows = make_windows(&normalized, model_cfg.window, window_stride)?;
    let model: Model<f32> = build_model(model_cfg, series.channels())?;
    let mut trained = train_model(model, &windows)?;
    trained.norm_stats = Some(stats);

    checkpoint_save(&trained, &out.join("model.ckpt"))?;
    let mut history = String::from("epoch,loss\n");
    for (i, loss) in trained.history.iter().enumerate() {
        history.push_str(&format!("{i},{loss}\n"));
    }
    std::fs::write(out.join("loss_history.csv"), history)?;
    println!(
        "train: {} windows, {} epochs, final loss {}",
        windows.count(),
        trained.history.len(),
        trained.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn score_with_checkpoint(trained: &TrainedModel<f32>, series: &LabeledSeries) -> Result<trip_core::model::pipeline::AnomalyScoreSeries> {
    let stats = trained
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint carries no normalization statistics".into()))?;
    let (normalized, _) = zscore_normalize(series, Some(stats))?;
    anomaly_score(trained, &normalized)
}

pub fn detect(cfg: &FlatConfig, out: &Path) -> Result<()> {
    let ckpt_path = runcfg::required_path(cfg, "detect.checkpoint")?;
    let mut trained = checkpoint_load(&ckpt_path)?;
    // CLI overrides for inference stride / smoothing apply on top of the
    // checkpointed configuration.
    if let Some(stride) = cfg.get_usize("detect.stride")? {
        trained.model.config.infer_stride = Some(stride);
    }
    if let Some(sm) = cfg.get_usize("detect.smoothing")? {
        trained.model.config.smooth_window = sm;
    }
    let series = load_train_series(cfg)?;
    let scores = score_with_checkpoint(&trained, &series)?;
    write_scores_csv(&out.join("scores.csv"), &scores.scores, scores.labels.as_deref())?;
    println!("detect: scored {} timesteps", scores.scores.len());
    Ok(())
}

fn pate_config(cfg: &FlatConfig) -> Result<PateConfig> {
    let mut pc = PateConfig::default();
    if let Some(v) = cfg.get_usize_list("eval.pre_buffers")? {
        pc.pre_buffers = v;
    }
    if let Some(v) = cfg.get_usize_list("eval.post_buffers")? {
        pc.post_buffers = v;
    }
    Ok(pc)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let text = format!(
        "pate = {}\nauc_roc = {}\nauc_pr = {}\nbest_f1 = {}\nbest_f1_threshold = {}\n",
        report.pate, report.auc_roc, report.auc_pr, report.best_f1, report.best_f1_threshold
    );
    std::fs::write(out.join("report.txt"), text)?;
    let csv = format!(
        "pate,auc_roc,auc_pr,best_f1,best_f1_threshold\n{},{},{},{},{}\n",
        report.pate, report.auc_roc, report.auc_pr, report.best_f1, report.best_f1_threshold
    );
    std::fs::write(out.join("report.csv"), csv)?;
    Ok(())
}

pub fn eval(cfg: &FlatConfig, out: &Path) -> Result<()> {
    let scores_path = runcfg::required_path(cfg, "eval.scores_path")?;
    let (scores, embedded_labels) = read_scores_csv(&scores_path)?;
    let labels: Vec<u8> = match embedded_labels {
        Some(l) => l,
        None => {
            let labels_path = runcfg::required_path(cfg, "eval.labels_path").map_err(|_| {
                Error::Config(
                    "score file has no label column; provide eval.labels_path".into(),
                )
            })?;
            let raw = std::fs::read_to_string(&labels_path)?;
            let mut labels = Vec::new();
            for line in raw.lines() {
                match line.trim() {
                    "" => continue,
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => {
                        return Err(Error::Parse(format!("label '{other}' is not 0/1")))
                    }
                }
            }
            labels
        }
    };
    let report = evaluate(&scores, &labels, &pate_config(cfg)?)?;
    write_report(out, &report)?;
    println!(
        "eval: pate {} auc_roc {} auc_pr {} best_f1 {}",
        report.pate, report.auc_roc, report.auc_pr, report.best_f1
    );
    Ok(())
}

/// Train/test pair for the ablation table: CSV paths when configured,
/// otherwise a synthetic pair derived from the synth section (clean series
/// for training, injected series for testing).
fn ablation_data(cfg: &FlatConfig) -> Result<(LabeledSeries, LabeledSeries)> {
    if cfg.contains("data.values_path") {
        let train = load_train_series(cfg)?;
        let test_values = runcfg::required_path(cfg, "data.test_values_path")?;
        let test_labels = runcfg::required_path(cfg, "data.test_labels_path")?;
        let test = load_csv_dataset(&test_values, Some(&test_labels))?;
        return Ok((train, test));
    }
    let spec = runcfg::synth_spec(cfg)?;
    let seed = runcfg::synth_seed(cfg)?;
    let mut clean = spec.clone();
    clean.spikes.clear();
    clean.level_shifts.clear();
    let train = synth_anomaly_series(&clean, seed)?;
    let test = synth_anomaly_series(&spec, seed.wrapping_add(1))?;
    if test.labels.as_ref().is_none_or(|l| l.iter().all(|&v| v == 0)) {
        return Err(Error::Config(
            "ablation test series has no anomalies; configure synth.spikes / synth.shifts".into(),
        ));
    }
    Ok((train, test))
}

pub fn ablate(cfg: &FlatConfig, out: &Path) -> Result<()> {
    let base_cfg = ModelConfig::from_flat(cfg)?;
    let window_stride = cfg.get_usize("data.window_stride")?.unwrap_or(1);
    let (train_series, test_series) = ablation_data(cfg)?;
    let pc = pate_config(cfg)?;

    let (normalized, stats) = zscore_normalize(&train_series, None)?;
    let windows = make_windows(&normalized, base_cfg.window, window_stride)?;
    let (test_normalized, _) = zscore_normalize(&test_series, Some(&stats))?;

    let mut rows = String::from("variant,pate,auc_roc,auc_pr,best_f1,best_f1_threshold\n");
    for variant in AblationVariant::ALL {
        let vcfg = variant.apply(&base_cfg);
        let model: Model<f32> = build_model(vcfg, train_series.channels())?;
        let trained = train_model(model, &windows)?;
        let scored = anomaly_score(&trained, &test_normalized)?;
        let labels = scored
            .labels
            .as_deref()
            .ok_or_else(|| Error::Data("ablation test series has no labels".into()))?;
        let report = evaluate(&scored.scores, labels, &pc)?;
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            variant.name(),
            report.pate,
            report.auc_roc,
            report.auc_pr,
            report.best_f1,
            report.best_f1_threshold
        ));
        println!("ablate: {} pate {}", variant.name(), report.pate);
    }
    std::fs::write(out.join("ablation.csv"), rows)?;
    Ok(())
}

pub fn membench(cfg: &FlatConfig, out: &Path) -> Result<()> {
    let model_cfg = ModelConfig::from_flat(cfg)?;
    let batches = cfg.get_usize_list("bench.batch_sizes")?.unwrap_or_else(|| vec![2, 4, 8, 16]);
    let channel_grid = cfg.get_usize_list("bench.channels")?.unwrap_or_else(|| vec![25, 51, 55]);
    let patch_grid = cfg
        .get_usize_list("bench.patch_sizes")?
        .unwrap_or_else(|| model_cfg.patch_sizes.clone());
    let do_measure = cfg.get_bool("bench.measure")?.unwrap_or(true);

    let mut rows = String::from(bench_csv_header());
    rows.push('\n');
    for &patch in &patch_grid {
        let mut grid_cfg = model_cfg.clone();
        grid_cfg.patch_sizes = vec![patch];
        grid_cfg.p_dec = Some(patch);
        grid_cfg.validate()?;
        for &batch in &batches {
            for &channels in &channel_grid {
                for mode in [ProcessingMode::ChannelIndependent, ProcessingMode::PatchTokens] {
                    let mut report = token_counts(&grid_cfg, batch, channels, mode);
                    report = activation_estimate(
                        report,
                        &grid_cfg.backbone,
                        grid_cfg.l_max(),
                        4, // FP32
                    );
                    if do_measure {
                        report.measured_peak_bytes =
                            measure_forward(&grid_cfg, batch, channels, mode)?;
                    }
                    rows.push_str(&bench_csv_row(&BenchRow {
                        backbone: grid_cfg.backbone.kind.as_str().to_string(),
                        batch,
                        patch_size: patch,
                        channels,
                        mode,
                        report,
                    }));
                    rows.push('\n');
                }
            }
        }
    }
    std::fs::write(out.join("membench.csv"), rows)?;
    println!("membench: wrote grid for {} patch sizes x {} batches x {} channel counts",
        patch_grid.len(), batches.len(), channel_grid.len());
    Ok(())
}

/// Best-effort measured peak for one grid cell; None when no allocator hook
/// is installed.
fn measure_forward(
    cfg: &ModelConfig,
    batch: usize,
    channels: usize,
    mode: ProcessingMode,
) -> Result<Option<u64>> {
    let seed = cfg.train.seed;
    let windows = bench_windows::<f32>(batch, cfg.window, channels, seed ^ 0xbe9c);
    let result = match mode {
        ProcessingMode::ChannelIndependent => {
            let backbone = build_backbone::<f32>(&cfg.backbone, cfg.l_max(), seed)?;
            let comp = CiComparator::<f32>::new(cfg.p_min(), cfg.stride, cfg.backbone.d_model, seed);
            measure_peak(|| comp.forward(&backbone, &windows))
        }
        ProcessingMode::PatchTokens => {
            let model: Model<f32> = build_model(cfg.clone(), channels)?;
            measure_peak(|| trip_core::bench::trip_forward_no_decoder(&model, &windows))
        }
    };
    match result {
        Ok((inner, peak)) => {
            inner?;
            Ok(Some(peak))
        }
        Err(Error::MeasureUnavailable(_)) => Ok(None),
        Err(other) => Err(other),
    }
}
