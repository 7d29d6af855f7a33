//! Model geometry, input preparation and the assembled network.

mod data;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossNorm, LossWeights};
use crate::masking::{mask_text_sentences, sample_mask_plan, MaskPlan, Modality, SentenceSpans};
use crate::tensor::Rng;

pub use data::{
    depth_truncated_normalize, patchify, tokenize_text, unpatchify, DepthStats, ModalityBatch, Sample, PAD_ID,
};
pub use network::{interpolation_matrix, DecoderOutput, Encoded, Forward, LossParts, M3et, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Transformer,
    Mamba,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Visible visual tokens per sample, shared by rgb, depth and semseg.
    pub budget: usize,
    /// Symmetric Dirichlet concentration.
    pub alpha: f64,
    /// Probability that a caption sentence is hidden.
    pub sentence_mask_prob: f64,
}

/// Every field defaults to the desk preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_encoder: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    /// Encoder indices holding a Mamba block.
    pub mamba_layers: Vec<usize>,
    pub d_decoder: usize,
    pub decoder_heads: usize,
    pub decoder_layout: Vec<LayerKind>,
    pub mamba_inner: usize,
    /// Adds the selective SSM mixer inside every Mamba block.
    pub mamba_inner_ssm: bool,
    pub ssm_state: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Width of the per-modality embedding table; decoders use it directly.
    pub d_modality: usize,
    /// Key width of the fusion cross-attention.
    pub d_fusion: usize,
    /// Number of encoder layers before the fusion stage.
    pub fusion_after: usize,
    /// Query, key and value modalities of the fusion stage.
    pub fusion_qkv: [Modality; 3],
    pub text_len: usize,
    pub vocab: usize,
    pub num_classes: usize,
    /// Per-pixel class embedding width of the semseg adapter.
    pub semseg_embed_dim: usize,
    pub use_text: bool,
    pub use_mamba: bool,
    pub use_cross_attention: bool,
    /// Train one uniformly chosen task per step instead of all of them.
    pub task_sampling: bool,
    pub mask: MaskConfig,
    pub loss_weights: LossWeights,
    pub loss_norm: LossNorm,
}

impl Default for MaskConfig {
    fn default() -> Self {
        ModelConfig::desk().mask
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoText,
    NoMamba,
    NoCrossAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoText, Ablation::NoMamba, Ablation::NoCrossAttention];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoText => "no_text",
            Ablation::NoMamba => "no_mamba",
            Ablation::NoCrossAttention => "no_cross_attention",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation `{s}`")))
    }
}

const SIX_LAYER_DECODER: [LayerKind; 6] = [
    LayerKind::Transformer,
    LayerKind::Transformer,
    LayerKind::Transformer,
    LayerKind::Mamba,
    LayerKind::Transformer,
    LayerKind::Transformer,
];

impl ModelConfig {
    /// Full-size geometry: 224² images, 768-wide encoder, 256-wide decoders.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            patch: 16,
            d_encoder: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            mamba_layers: vec![1, 3, 5, 7, 9, 11],
            d_decoder: 256,
            decoder_heads: 4,
            decoder_layout: SIX_LAYER_DECODER.to_vec(),
            mamba_inner: 64,
            mamba_inner_ssm: false,
            ssm_state: 16,
            mlp_ratio: 4,
            dropout: 0.1,
            d_modality: 256,
            d_fusion: 256,
            fusion_after: 6,
            fusion_qkv: [Modality::Rgb, Modality::Depth, Modality::Text],
            text_len: 128,
            vocab: 256,
            num_classes: 40,
            semseg_embed_dim: 23,
            use_text: true,
            use_mamba: true,
            use_cross_attention: true,
            task_sampling: false,
            mask: MaskConfig {
                budget: 98,
                alpha: 1.0,
                sentence_mask_prob: 0.8,
            },
            loss_weights: LossWeights::default(),
            loss_norm: LossNorm::MaskedCount,
        }
    }

    /// Small geometry for single-core training runs: 64² images, 16 tokens per modality.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            d_encoder: 64,
            encoder_heads: 4,
            d_decoder: 32,
            decoder_heads: 2,
            mamba_inner: 16,
            ssm_state: 4,
            d_modality: 32,
            d_fusion: 32,
            text_len: 64,
            num_classes: 4,
            semseg_embed_dim: 4,
            mask: MaskConfig {
                budget: 16,
                alpha: 1.0,
                sentence_mask_prob: 0.8,
            },
            ..Self::full_scale()
        }
    }

    /// Tiny geometry for finite-difference checks: 16² images, 8 text tokens.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            patch: 8,
            d_encoder: 8,
            encoder_depth: 4,
            encoder_heads: 2,
            mamba_layers: vec![1, 3],
            d_decoder: 8,
            decoder_heads: 2,
            mamba_inner: 4,
            ssm_state: 2,
            d_modality: 8,
            d_fusion: 4,
            fusion_after: 2,
            text_len: 8,
            vocab: 256,
            num_classes: 4,
            semseg_embed_dim: 2,
            mask: MaskConfig {
                budget: 6,
                alpha: 1.0,
                sentence_mask_prob: 0.5,
            },
            ..Self::full_scale()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Tokens per visual modality.
    pub fn tokens_per_modality(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn visual_modalities(&self) -> [Modality; 3] {
        Modality::VISUAL
    }

    /// Modalities the decoders reconstruct, in order.
    pub fn decoder_targets(&self) -> Vec<Modality> {
        let mut v = vec![Modality::Rgb, Modality::Depth];
        if self.use_text {
            v.push(Modality::Text);
        }
        v
    }

    /// Modalities with an entry in the modality-embedding table.
    pub fn active_modalities(&self) -> Vec<Modality> {
        let mut v = Modality::VISUAL.to_vec();
        if self.use_text {
            v.push(Modality::Text);
        }
        v
    }

    pub fn encoder_kinds(&self) -> Vec<LayerKind> {
        (0..self.encoder_depth)
            .map(|i| {
                if self.use_mamba && self.mamba_layers.contains(&i) {
                    LayerKind::Mamba
                } else {
                    LayerKind::Transformer
                }
            })
            .collect()
    }

    pub fn decoder_kinds(&self) -> Vec<LayerKind> {
        self.decoder_layout
            .iter()
            .map(|&k| if self.use_mamba { k } else { LayerKind::Transformer })
            .collect()
    }

    /// The three-layer decoder reading: one Transformer, one Mamba, one Transformer.
    pub fn with_compact_decoder(mut self) -> Self {
        self.decoder_layout = vec![LayerKind::Transformer, LayerKind::Mamba, LayerKind::Transformer];
        self
    }

    pub fn fusion_enabled(&self) -> bool {
        self.use_cross_attention && self.fusion_after <= self.encoder_depth
    }

    pub fn ablate(&self, which: Ablation) -> Self {
        let mut c = self.clone();
        match which {
            Ablation::Full => {}
            Ablation::NoText => {
                c.use_text = false;
                c.loss_weights.text = 0.0;
            }
            Ablation::NoMamba => c.use_mamba = false,
            Ablation::NoCrossAttention => c.use_cross_attention = false,
        }
        c
    }

    /// Dirichlet split of the visual budget plus sentence masking of the caption.
    pub fn sample_plan(&self, spans: &SentenceSpans, rng: &mut Rng) -> Result<MaskPlan> {
        let n = self.tokens_per_modality();
        let counts = Modality::VISUAL.map(|m| (m, n));
        let mut plan = sample_mask_plan(&counts, self.mask.budget, &[self.mask.alpha; 3], rng)?;
        if self.use_text {
            plan.text = Some(mask_text_sentences(spans, self.text_len, self.mask.sentence_mask_prob, rng)?);
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!("patch {} must divide image size {}", self.patch, self.image_size));
        }
        if [self.d_encoder, self.d_decoder, self.d_fusion, self.semseg_embed_dim].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.d_encoder % 4 != 0 || self.d_decoder % 4 != 0 {
            return bad("encoder and decoder widths must be multiples of 4 for 2-D positions".into());
        }
        if self.encoder_heads == 0 || self.d_encoder % self.encoder_heads != 0 {
            return bad(format!("{} heads do not divide width {}", self.encoder_heads, self.d_encoder));
        }
        if self.decoder_heads == 0 || self.d_decoder % self.decoder_heads != 0 {
            return bad(format!("{} heads do not divide width {}", self.decoder_heads, self.d_decoder));
        }
        if let Some(i) = self.mamba_layers.iter().find(|&&i| i >= self.encoder_depth) {
            return bad(format!("mamba layer index {i} outside encoder depth {}", self.encoder_depth));
        }
        if self.decoder_layout.is_empty() {
            return bad("decoder layout is empty".into());
        }
        if self.d_modality != self.d_decoder {
            return bad(format!(
                "modality embedding width {} must equal decoder width {}",
                self.d_modality, self.d_decoder
            ));
        }
        if self.fusion_after == 0 || self.fusion_after > self.encoder_depth {
            return bad(format!("fusion position {} outside 1..={}", self.fusion_after, self.encoder_depth));
        }
        if self.fusion_qkv[0] == Modality::Text || self.fusion_qkv[1] == Modality::Text {
            return bad("fusion queries and keys must be visual modalities".into());
        }
        if self.vocab < 2 || self.vocab > 256 {
            return bad(format!("byte vocabulary must be in 2..=256, got {}", self.vocab));
        }
        if self.num_classes < 2 {
            return bad("at least two semantic classes are required".into());
        }
        if self.text_len == 0 || self.mamba_inner == 0 || self.ssm_state == 0 || self.mlp_ratio == 0 {
            return bad("text length, mamba width, state size and mlp ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let capacity = 3 * self.tokens_per_modality();
        if self.mask.budget > capacity {
            return bad(format!("mask budget {} exceeds {capacity} visual tokens", self.mask.budget));
        }
        if !(self.mask.alpha > 0.0) || !(0.0..=1.0).contains(&self.mask.sentence_mask_prob) {
            return bad("dirichlet alpha must be positive and sentence mask probability in [0, 1]".into());
        }
        let mut w = self.loss_weights;
        if !self.use_text {
            w.text = 0.0;
        }
        w.validate()
    }
}
