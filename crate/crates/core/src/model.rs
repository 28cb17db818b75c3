//! The full detector: contrastive encoders, alignment, fusion and the rumor head.

use crate::alignment::{relevance, top_k_select, RelevanceMatrix, SelectedRegions};
use crate::classifier::ClassifierHead;
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::fusion::{blend_scores, fuse, FusionNetwork};
use crate::nn::Linear;
use crate::numerics::{ParamStore, Rng, Tape, Var};
use crate::sclip::{pool_blocks, Sclip, SclipConfig, SclipOutput};
use crate::text::{TextEncoderConfig, TokenSequence};
use crate::visual::{ImageTensor, ScaleConfig, VisualEncoderConfig};

#[derive(Debug, Clone)]
pub struct Micc {
    pub sclip: Sclip,
    pub fusion: Option<FusionNetwork>,
    pub reduce: Option<Linear>,
    pub classifier: ClassifierHead,
    pub config: RunConfig,
}

/// Everything a forward pass produces that callers may inspect.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Rumor probabilities `[batch, 1]`.
    pub probs: Var,
    pub encoded: SclipOutput,
    pub relevance: Option<RelevanceMatrix>,
    pub selected: Option<SelectedRegions>,
    /// Fusion weights `[batch, width]` aligned with `selected`.
    pub alpha: Option<Var>,
    /// Classifier input.
    pub fused: Var,
}

impl Micc {
    pub fn sclip_config(cfg: &RunConfig, vocab_size: usize) -> SclipConfig {
        SclipConfig {
            text: TextEncoderConfig { vocab_size, max_len: cfg.max_len, transformer: cfg.transformer() },
            visual: VisualEncoderConfig {
                height: cfg.image_size,
                width: cfg.image_size,
                scales: ScaleConfig { kernels: cfg.scales.clone(), channels: cfg.patch_channels },
                transformer: cfg.transformer(),
                per_scale: cfg.per_scale_visual,
            },
            proj_hidden: cfg.proj_hidden,
            proj_dim: cfg.proj_dim,
            tau: cfg.tau,
            symmetric: cfg.symmetric_nce,
        }
    }

    /// Width of each selected patch after the linear reduction of the projected variant.
    pub fn reduced_width(cfg: &RunConfig) -> usize {
        (cfg.proj_dim / Self::selected_slots(cfg)).max(1)
    }

    fn selected_slots(cfg: &RunConfig) -> usize {
        if cfg.global_topk {
            cfg.top_k
        } else {
            cfg.top_k * cfg.scales.len()
        }
    }

    /// Classifier input width for the configured variant.
    pub fn fused_width(cfg: &RunConfig) -> usize {
        let d = cfg.proj_dim;
        match cfg.variant {
            Variant::Full | Variant::CosineRelevance | Variant::NoAlignGlobal => 2 * d,
            Variant::NoAlignPatches => (cfg.scales.len() + 1) * d,
            Variant::NoFusionConcat => (1 + Self::selected_slots(cfg)) * d,
            Variant::NoFusionProject => d + Self::selected_slots(cfg) * Self::reduced_width(cfg),
        }
    }

    /// Registers every parameter the configured variant uses. Initial values depend only on
    /// `cfg.seed`.
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).fork(0x1417);
        let sclip = Sclip::new(store, Self::sclip_config(cfg, vocab_size), &mut rng)?;
        let fusion = if cfg.variant.uses_fusion() {
            Some(FusionNetwork::new(store, "fusion", cfg.proj_dim, cfg.fusion_hidden, cfg.fusion_layers, &mut rng)?)
        } else {
            None
        };
        let reduce = if cfg.variant == Variant::NoFusionProject {
            let w = Self::reduced_width(cfg);
            Some(Linear::new(store, "reduce", cfg.proj_dim, w, true, 1.0 / (cfg.proj_dim as f64).sqrt(), &mut rng)?)
        } else {
            None
        };
        let classifier =
            ClassifierHead::new(store, "classifier", Self::fused_width(cfg), cfg.classifier_hidden, cfg.dropout, &mut rng)?;
        Ok(Self { sclip, fusion, reduce, classifier, config: cfg.clone() })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, texts: &[&TokenSequence], images: &[&ImageTensor]) -> Result<Forward> {
        let encoded = self.sclip.encode_batch(tape, texts, images)?;
        self.forward_encoded(tape, encoded)
    }

    pub fn forward_encoded(&self, tape: &mut Tape<'_>, encoded: SclipOutput) -> Result<Forward> {
        let cfg = &self.config;
        let batch = encoded.batch;
        let mut relevance_matrix = None;
        let mut selected = None;
        let mut alpha = None;
        let fused = match cfg.variant {
            Variant::NoAlignGlobal => tape.concat_cols(&[encoded.text, encoded.image])?,
            Variant::NoAlignPatches => {
                let per_scale = pool_blocks(tape, encoded.patches, encoded.slots, &encoded.mask)?;
                let flat = tape.reshape(per_scale, &[batch, encoded.scales * cfg.proj_dim])?;
                tape.concat_cols(&[encoded.text, flat])?
            }
            variant => {
                let (dots, d) = relevance(tape, &encoded, variant == Variant::CosineRelevance)?;
                let sel = top_k_select(&d, cfg.top_k, cfg.global_topk)?;
                let patches = tape.gather_rows(encoded.patches, &sel.rows)?;
                let fused = match variant {
                    Variant::NoFusionConcat => {
                        let flat = tape.reshape(patches, &[batch, sel.width * cfg.proj_dim])?;
                        tape.concat_cols(&[encoded.text, flat])?
                    }
                    Variant::NoFusionProject => {
                        let reduce = self.reduce.as_ref().ok_or_else(|| Error::invalid("missing reduction layer"))?;
                        let small = reduce.forward(tape, patches)?;
                        // shortfall slots stay zero after the bias
                        let small = tape.gather_rows(
                            small,
                            &sel.mask.iter().enumerate().map(|(i, &m)| m.then_some(i)).collect::<Vec<_>>(),
                        )?;
                        let flat = tape.reshape(small, &[batch, sel.width * reduce.out_dim])?;
                        tape.concat_cols(&[encoded.text, flat])?
                    }
                    _ => {
                        let net = self.fusion.as_ref().ok_or_else(|| Error::invalid("missing fusion network"))?;
                        let r = tape.gather_rows(dots, &sel.rows)?;
                        let fc = net.ffn_scores(tape, patches)?;
                        let scores = blend_scores(tape, fc, r, cfg.lambda)?;
                        let f = fuse(tape, scores, &sel.mask, patches, encoded.text, batch)?;
                        alpha = Some(f.alpha);
                        f.fused
                    }
                };
                relevance_matrix = Some(d);
                selected = Some(sel);
                fused
            }
        };
        let probs = self.classifier.forward(tape, fused)?;
        Ok(Forward { probs, encoded, relevance: relevance_matrix, selected, alpha, fused })
    }
}
