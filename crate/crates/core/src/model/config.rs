//! Architecture and training hyperparameters, plus the flat-config mapping.

use std::path::PathBuf;

use crate::config::FlatConfig;
use crate::error::{Error, Result};

/// Which module sits between gate fusion and the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// GPT-2-family decoder stack, every tensor frozen. Loaded from a weight
    /// archive when a path is configured, otherwise a deterministic random
    /// stand-in (still frozen).
    PretrainedFrozen,
    /// Trainable bidirectional transformer encoder substitute.
    TransEncoder,
    /// Trainable single multi-head self-attention block substitute.
    AttentionOnly,
    /// Pass-through.
    Identity,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::PretrainedFrozen => "pretrained_frozen",
            BackboneKind::TransEncoder => "trans_encoder",
            BackboneKind::AttentionOnly => "attention_only",
            BackboneKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained_frozen" => Ok(BackboneKind::PretrainedFrozen),
            "trans_encoder" => Ok(BackboneKind::TransEncoder),
            "attention_only" => Ok(BackboneKind::AttentionOnly),
            "identity" => Ok(BackboneKind::Identity),
            other => Err(Error::Config(format!("unknown backbone kind '{other}'"))),
        }
    }

    /// Whether this backbone's parameters receive gradient updates.
    pub fn trainable(self) -> bool {
        matches!(self, BackboneKind::TransEncoder | BackboneKind::AttentionOnly)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub weights_path: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::PretrainedFrozen,
            d_model: 64,
            layers: 2,
            heads: 4,
            weights_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Shared per-token MLP + overlap averaging.
    Patchwise,
    /// Single linear map from all flattened tokens to the window.
    Flat,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Patchwise => "patchwise",
            DecoderKind::Flat => "flat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patchwise" => Ok(DecoderKind::Patchwise),
            "flat" => Ok(DecoderKind::Flat),
            other => Err(Error::Config(format!("unknown decoder kind '{other}'"))),
        }
    }
}

/// Branch toggles for the ablation variants. With `base_llm_mode` the three
/// branch flags are ignored and a single linear layer embeds raw patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchFlags {
    pub use_patching: bool,
    pub use_selection: bool,
    pub use_global: bool,
    pub base_llm_mode: bool,
}

impl Default for BranchFlags {
    fn default() -> Self {
        Self { use_patching: true, use_selection: true, use_global: true, base_llm_mode: false }
    }
}

impl BranchFlags {
    pub fn active_count(&self) -> usize {
        if self.base_llm_mode {
            return 0;
        }
        [self.use_patching, self.use_selection, self.use_global]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 10, batch_size: 16, seed: 0 }
    }
}

/// Every architecture hyperparameter of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Window length W fed to one forward pass.
    pub window: usize,
    /// Patch stride s (shared by all scales and the decoder placement).
    pub stride: usize,
    /// Strictly increasing patch sizes, all <= window.
    pub patch_sizes: Vec<usize>,
    /// Per-channel embedding width d of the local branches.
    pub d: usize,
    /// Unified latent width D' of gate fusion.
    pub d_prime: usize,
    /// Hidden channel count of the global-branch convolution stack.
    pub global_hidden: usize,
    pub backbone: BackboneConfig,
    /// Decoded patch length; defaults to the smallest patch size.
    pub p_dec: Option<usize>,
    pub decoder_kind: DecoderKind,
    pub branches: BranchFlags,
    pub train: TrainConfig,
    /// Window stride at inference; defaults to the window length.
    pub infer_stride: Option<usize>,
    /// Moving-average width for score smoothing; 0 disables.
    pub smooth_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 48,
            stride: 1,
            patch_sizes: vec![8, 16],
            d: 16,
            d_prime: 64,
            global_hidden: 32,
            backbone: BackboneConfig::default(),
            p_dec: None,
            decoder_kind: DecoderKind::Patchwise,
            branches: BranchFlags::default(),
            train: TrainConfig::default(),
            infer_stride: None,
            smooth_window: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest patch size.
    pub fn p_min(&self) -> usize {
        *self.patch_sizes.iter().min().expect("non-empty patch sizes")
    }

    /// Common token count: the count of the smallest patch size.
    pub fn l_max(&self) -> usize {
        (self.window - self.p_min()) / self.stride + 1
    }

    /// Token count of one patch size.
    pub fn tokens_for_patch(&self, p: usize) -> usize {
        (self.window - p) / self.stride + 1
    }

    /// Resolved decoded patch length.
    pub fn p_dec(&self) -> usize {
        self.p_dec.unwrap_or_else(|| self.p_min())
    }

    pub fn infer_stride(&self) -> usize {
        self.infer_stride.unwrap_or(self.window)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::Config("patch_sizes must be non-empty".into()));
        }
        for pair in self.patch_sizes.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "patch_sizes must be strictly increasing, got {:?}",
                    self.patch_sizes
                )));
            }
        }
        if let Some(&p) = self.patch_sizes.iter().find(|&&p| p == 0 || p > self.window) {
            return Err(Error::Config(format!(
                "patch size {p} invalid for window {}",
                self.window
            )));
        }
        if self.d == 0 || self.d_prime == 0 || self.global_hidden == 0 {
            return Err(Error::Config("d, d_prime and global_hidden must be >= 1".into()));
        }
        if self.backbone.d_model == 0 {
            return Err(Error::Config("backbone.d_model must be >= 1".into()));
        }
        if self.backbone.kind != BackboneKind::Identity
            && (self.backbone.heads == 0 || !self.backbone.d_model.is_multiple_of(self.backbone.heads))
        {
            return Err(Error::Config(format!(
                "backbone.heads {} must divide backbone.d_model {}",
                self.backbone.heads, self.backbone.d_model
            )));
        }
        if !self.branches.base_llm_mode && self.branches.active_count() == 0 {
            return Err(Error::Config(
                "at least one branch must be active unless base_llm_mode is set".into(),
            ));
        }
        let p_dec = self.p_dec();
        if p_dec == 0 || p_dec > self.window {
            return Err(Error::Config(format!("p_dec {p_dec} invalid for window {}", self.window)));
        }
        // Full decoder coverage: consecutive token spans must not leave gaps
        // and the last span must reach the window end.
        if self.stride > p_dec {
            return Err(Error::Config(format!(
                "coverage gap: stride {} exceeds decoded patch length {p_dec}",
                self.stride
            )));
        }
        if (self.l_max() - 1) * self.stride + p_dec < self.window {
            return Err(Error::Config(format!(
                "coverage gap: {} tokens of span {p_dec} at stride {} end before window {}",
                self.l_max(),
                self.stride,
                self.window
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.infer_stride() == 0 {
            return Err(Error::Config("detect.stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Keys understood by [`ModelConfig::from_flat`]; used by the CLI to
    /// reject unknown configuration.
    pub fn known_keys() -> &'static [&'static str] {
        &[
            "model.window",
            "model.stride",
            "model.patch_sizes",
            "model.d",
            "model.d_prime",
            "model.global_hidden",
            "model.p_dec",
            "model.decoder",
            "model.use_patching",
            "model.use_selection",
            "model.use_global",
            "model.base_llm",
            "backbone.kind",
            "backbone.d_model",
            "backbone.layers",
            "backbone.heads",
            "backbone.weights_path",
            "train.lr",
            "train.epochs",
            "train.batch_size",
            "train.seed",
            "detect.stride",
            "detect.smoothing",
        ]
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let mut out = Self::default();
        if let Some(v) = cfg.get_usize("model.window")? {
            out.window = v;
        }
        if let Some(v) = cfg.get_usize("model.stride")? {
            out.stride = v;
        }
        if let Some(v) = cfg.get_usize_list("model.patch_sizes")? {
            out.patch_sizes = v;
        }
        if let Some(v) = cfg.get_usize("model.d")? {
            out.d = v;
        }
        if let Some(v) = cfg.get_usize("model.d_prime")? {
            out.d_prime = v;
        }
        if let Some(v) = cfg.get_usize("model.global_hidden")? {
            out.global_hidden = v;
        }
        if let Some(v) = cfg.get_usize("model.p_dec")? {
            out.p_dec = Some(v);
        }
        if let Some(v) = cfg.get("model.decoder") {
            out.decoder_kind = DecoderKind::parse(v)?;
        }
        if let Some(v) = cfg.get_bool("model.use_patching")? {
            out.branches.use_patching = v;
        }
        if let Some(v) = cfg.get_bool("model.use_selection")? {
            out.branches.use_selection = v;
        }
        if let Some(v) = cfg.get_bool("model.use_global")? {
            out.branches.use_global = v;
        }
        if let Some(v) = cfg.get_bool("model.base_llm")? {
            out.branches.base_llm_mode = v;
        }
        if let Some(v) = cfg.get("backbone.kind") {
            out.backbone.kind = BackboneKind::parse(v)?;
        }
        if let Some(v) = cfg.get_usize("backbone.d_model")? {
            out.backbone.d_model = v;
        }
        if let Some(v) = cfg.get_usize("backbone.layers")? {
            out.backbone.layers = v;
        }
        if let Some(v) = cfg.get_usize("backbone.heads")? {
            out.backbone.heads = v;
        }
        if let Some(v) = cfg.get("backbone.weights_path") {
            if !v.is_empty() {
                out.backbone.weights_path = Some(PathBuf::from(v));
            }
        }
        if let Some(v) = cfg.get_f64("train.lr")? {
            out.train.learning_rate = v;
        }
        if let Some(v) = cfg.get_usize("train.epochs")? {
            out.train.epochs = v;
        }
        if let Some(v) = cfg.get_usize("train.batch_size")? {
            out.train.batch_size = v;
        }
        if let Some(v) = cfg.get_u64("train.seed")? {
            out.train.seed = v;
        }
        if let Some(v) = cfg.get_usize("detect.stride")? {
            out.infer_stride = Some(v);
        }
        if let Some(v) = cfg.get_usize("detect.smoothing")? {
            out.smooth_window = v;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut cfg = FlatConfig::new();
        cfg.set("model.window", self.window.to_string());
        cfg.set("model.stride", self.stride.to_string());
        cfg.set(
            "model.patch_sizes",
            self.patch_sizes.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","),
        );
        cfg.set("model.d", self.d.to_string());
        cfg.set("model.d_prime", self.d_prime.to_string());
        cfg.set("model.global_hidden", self.global_hidden.to_string());
        if let Some(p) = self.p_dec {
            cfg.set("model.p_dec", p.to_string());
        }
        cfg.set("model.decoder", self.decoder_kind.as_str());
        cfg.set("model.use_patching", self.branches.use_patching.to_string());
        cfg.set("model.use_selection", self.branches.use_selection.to_string());
        cfg.set("model.use_global", self.branches.use_global.to_string());
        cfg.set("model.base_llm", self.branches.base_llm_mode.to_string());
        cfg.set("backbone.kind", self.backbone.kind.as_str());
        cfg.set("backbone.d_model", self.backbone.d_model.to_string());
        cfg.set("backbone.layers", self.backbone.layers.to_string());
        cfg.set("backbone.heads", self.backbone.heads.to_string());
        if let Some(p) = &self.backbone.weights_path {
            cfg.set("backbone.weights_path", p.to_string_lossy());
        }
        cfg.set("train.lr", format!("{}", self.train.learning_rate));
        cfg.set("train.epochs", self.train.epochs.to_string());
        cfg.set("train.batch_size", self.train.batch_size.to_string());
        cfg.set("train.seed", self.train.seed.to_string());
        if let Some(s) = self.infer_stride {
            cfg.set("detect.stride", s.to_string());
        }
        if self.smooth_window > 0 {
            cfg.set("detect.smoothing", self.smooth_window.to_string());
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.p_min(), 8);
        assert_eq!(cfg.l_max(), 41);
        assert_eq!(cfg.p_dec(), 8);
    }

    #[test]
    fn flat_roundtrip() {
        let mut cfg = ModelConfig {
            patch_sizes: vec![4, 8, 16],
            infer_stride: Some(1),
            ..Default::default()
        };
        cfg.backbone.kind = BackboneKind::TransEncoder;
        cfg.train.seed = 99;
        let flat = cfg.to_flat();
        let back = ModelConfig::from_flat(&flat).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_oversized_patch() {
        let cfg = ModelConfig { patch_sizes: vec![8, 64], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_non_increasing_patches() {
        let cfg = ModelConfig { patch_sizes: vec![16, 8], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_coverage_gap() {
        // stride 3 with p_dec 2 leaves uncovered timesteps.
        let cfg = ModelConfig {
            window: 12,
            stride: 3,
            patch_sizes: vec![2],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_all_branches_off() {
        let cfg = ModelConfig {
            branches: BranchFlags {
                use_patching: false,
                use_selection: false,
                use_global: false,
                base_llm_mode: false,
            },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.d_model = 30;
        cfg.backbone.heads = 4;
        assert!(cfg.validate().is_err());
    }
}
