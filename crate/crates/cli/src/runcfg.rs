//! Run-configuration resolution: file, overrides, seed, key validation,
//! and the run manifest.

use std::path::Path;

use trip_core::config::FlatConfig;
use trip_core::data::{ShiftSpec, Sinusoid, SpikeSpec, SynthSpec};
use trip_core::model::config::ModelConfig;
use trip_core::{Error, Result};

/// Keys owned by the CLI layers (data sources, synthetic generator,
/// evaluation, benchmark grid). Entries ending in '.' allow a whole section.
const CLI_KEYS: &[&str] = &[
    "data.values_path",
    "data.labels_path",
    "data.test_values_path",
    "data.test_labels_path",
    "data.window_stride",
    "detect.checkpoint",
    "synth.length",
    "synth.channels",
    "synth.noise_std",
    "synth.sinusoids",
    "synth.spikes",
    "synth.shifts",
    "synth.seed",
    "eval.scores_path",
    "eval.labels_path",
    "eval.pre_buffers",
    "eval.post_buffers",
    "bench.batch_sizes",
    "bench.channels",
    "bench.patch_sizes",
    "bench.measure",
];

/// Merge the config file with `--set` overrides and the `--seed` flag.
pub fn resolve(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<FlatConfig> {
    let mut cfg = match config {
        Some(path) => FlatConfig::from_file(path)?,
        None => FlatConfig::new(),
    };
    for pair in sets {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{pair}'")));
        };
        cfg.set(key.trim(), value.trim());
    }
    if let Some(s) = seed {
        cfg.set("train.seed", s.to_string());
        cfg.set("synth.seed", s.to_string());
    }
    Ok(cfg)
}

pub fn validate_known_keys(cfg: &FlatConfig) -> Result<()> {
    let mut allowed: Vec<&str> = ModelConfig::known_keys().to_vec();
    allowed.extend_from_slice(CLI_KEYS);
    cfg.validate_keys(&allowed)
}

/// The manifest is the resolved configuration plus run identity, written
/// before any result file.
pub fn write_manifest(cfg: &FlatConfig, command: &str, out_dir: &Path) -> Result<()> {
    let mut manifest = cfg.clone();
    manifest.set("run.command", command);
    manifest.set("run.code_version", trip_core::CODE_VERSION);
    let seed = cfg.get("train.seed").unwrap_or("0").to_string();
    manifest.set("run.seed", seed);
    std::fs::write(out_dir.join("manifest.txt"), manifest.to_text())?;
    Ok(())
}

/// Parse `period:amplitude` items separated by ';'.
fn parse_sinusoids(raw: &str) -> Result<Vec<Sinusoid>> {
    let mut out = Vec::new();
    for item in raw.split(';') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!(
                "synth.sinusoids: expected 'period:amplitude', got '{item}'"
            )));
        }
        let period: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("synth.sinusoids: bad period '{}'", parts[0])))?;
        let amplitude: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("synth.sinusoids: bad amplitude '{}'", parts[1])))?;
        out.push(Sinusoid { period, amplitude });
    }
    Ok(out)
}

/// Parse `a:b:c` integer/real triples separated by ';'.
fn parse_triples(key: &str, raw: &str) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for item in raw.split(';') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("{key}: expected 'a:b:c', got '{item}'")));
        }
        let a: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad integer '{}'", parts[0])))?;
        let b: usize = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad integer '{}'", parts[1])))?;
        let c: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad number '{}'", parts[2])))?;
        out.push((a, b, c));
    }
    Ok(out)
}

/// Build the synthetic-generator parameters from the resolved config.
pub fn synth_spec(cfg: &FlatConfig) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    if let Some(v) = cfg.get_usize("synth.length")? {
        spec.length = v;
    }
    if let Some(v) = cfg.get_usize("synth.channels")? {
        spec.channels = v;
    }
    if let Some(v) = cfg.get_f64("synth.noise_std")? {
        spec.noise_std = v;
    }
    if let Some(raw) = cfg.get("synth.sinusoids") {
        spec.sinusoids = parse_sinusoids(raw)?;
    }
    if let Some(raw) = cfg.get("synth.spikes") {
        spec.spikes = parse_triples("synth.spikes", raw)?
            .into_iter()
            .map(|(at, width, magnitude_sigmas)| SpikeSpec { at, width, magnitude_sigmas })
            .collect();
    }
    if let Some(raw) = cfg.get("synth.shifts") {
        spec.level_shifts = parse_triples("synth.shifts", raw)?
            .into_iter()
            .map(|(start, duration, magnitude_sigmas)| ShiftSpec {
                start,
                duration,
                magnitude_sigmas,
            })
            .collect();
    }
    Ok(spec)
}

pub fn synth_seed(cfg: &FlatConfig) -> Result<u64> {
    if let Some(s) = cfg.get_u64("synth.seed")? {
        return Ok(s);
    }
    Ok(cfg.get_u64("train.seed")?.unwrap_or(0))
}

pub fn required_path(cfg: &FlatConfig, key: &str) -> Result<std::path::PathBuf> {
    match cfg.get(key) {
        Some(v) if !v.is_empty() => Ok(std::path::PathBuf::from(v)),
        _ => Err(Error::Config(format!("missing required key '{key}'"))),
    }
}
