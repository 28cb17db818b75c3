//! Run configuration with documented defaults, loadable from partial JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TransformerConfig;

/// Model wiring for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Skip Top-K: per-scale means of all valid patches, concatenated with `T`.
    NoAlignPatches,
    /// Skip Top-K: the pooled global image vector, concatenated with `T`.
    NoAlignGlobal,
    /// Skip fusion weighting: selected patches concatenated with `T` as they are.
    NoFusionConcat,
    /// Skip fusion weighting: each selected patch linearly reduced, then concatenated.
    NoFusionProject,
    /// Cosine similarity in place of the dot product for relevance.
    CosineRelevance,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoAlignPatches,
        Variant::NoAlignGlobal,
        Variant::NoFusionConcat,
        Variant::NoFusionProject,
        Variant::CosineRelevance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAlignPatches => "no-align-patches",
            Variant::NoAlignGlobal => "no-align-global",
            Variant::NoFusionConcat => "no-fusion-concat",
            Variant::NoFusionProject => "no-fusion-project",
            Variant::CosineRelevance => "cosine-relevance",
        }
    }

    pub fn uses_top_k(self) -> bool {
        !matches!(self, Variant::NoAlignPatches | Variant::NoAlignGlobal)
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::Full | Variant::CosineRelevance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Receptive-field sizes of the patchify scales.
    pub scales: Vec<usize>,
    pub patch_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    /// Projection output width `d'`.
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub tau: f64,
    pub symmetric_nce: bool,
    pub top_k: usize,
    pub global_topk: bool,
    pub fusion_layers: usize,
    pub fusion_hidden: usize,
    pub lambda: f64,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub per_scale_visual: bool,
    pub variant: Variant,
    pub pretrain: StageConfig,
    pub train: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 192,
            scales: vec![32, 64],
            patch_channels: 64,
            d_model: 128,
            heads: 4,
            layers: 2,
            ffn_width: 512,
            max_len: 64,
            proj_dim: 128,
            proj_hidden: 256,
            tau: 0.07,
            symmetric_nce: false,
            top_k: 2,
            global_topk: false,
            fusion_layers: 2,
            fusion_hidden: 256,
            lambda: 0.7,
            classifier_hidden: 256,
            dropout: 0.3,
            per_scale_visual: false,
            variant: Variant::Full,
            pretrain: StageConfig { learning_rate: 5e-4, batch_size: 64, epochs: 5 },
            train: StageConfig { learning_rate: 2e-4, batch_size: 32, epochs: 20 },
        }
    }
}

/// Fusion weight that worked best on the Weibo-style data.
pub const LAMBDA_WEIBO: f64 = 0.65;
/// Fusion weight that worked best on the PHEME-style data.
pub const LAMBDA_PHEME: f64 = 0.70;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig { d_model: self.d_model, heads: self.heads, layers: self.layers, ffn_width: self.ffn_width }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even and positive", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        for (name, v) in [
            ("patch_channels", self.patch_channels),
            ("ffn_width", self.ffn_width),
            ("proj_dim", self.proj_dim),
            ("proj_hidden", self.proj_hidden),
            ("fusion_layers", self.fusion_layers),
            ("fusion_hidden", self.fusion_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("train.batch_size", self.train.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, lr) in [("pretrain", self.pretrain.learning_rate), ("train", self.train.learning_rate)] {
            if !(lr > 0.0) {
                return fail(format!("{name}.learning_rate must be positive"));
            }
        }
        crate::visual::ScaleConfig { kernels: self.scales.clone(), channels: self.patch_channels }
            .validate(self.image_size, self.image_size)
    }
}
