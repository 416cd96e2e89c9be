use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placement of the visual block relative to the text block in a composed
/// sequence. The class token always stays at position 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenOrder {
    #[default]
    VisualFirst,
    TextFirst,
}

impl TokenOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenOrder::VisualFirst => "visual_first",
            TokenOrder::TextFirst => "text_first",
        }
    }
}

impl std::str::FromStr for TokenOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual_first" => Ok(TokenOrder::VisualFirst),
            "text_first" => Ok(TokenOrder::TextFirst),
            other => Err(Error::Config(format!("unknown token_order `{other}`"))),
        }
    }
}

/// Shape of the model: a text encoder stack plus a ViT image tokenizer of the
/// same width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_text_layers: usize,
    pub n_vit_layers: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    /// Longest token sequence produced by the tokenizer.
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub token_order: TokenOrder,
    pub mask_ratio: f64,
    /// Adds a trainable d×d linear map after the ViT.
    pub vision_projector: bool,
    /// Number of linear layers in the image-to-pseudo-token map.
    pub pseudo_map_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_text_layers: 2,
            n_vit_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_seq_len: 128,
            max_text_len: 64,
            vocab_size: 512,
            image_size: 32,
            patch_size: 8,
            channels: 3,
            token_order: TokenOrder::VisualFirst,
            mask_ratio: 0.5,
            vision_projector: false,
            pseudo_map_depth: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_text_layers", self.n_text_layers),
            ("n_vit_layers", self.n_vit_layers),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("max_seq_len", self.max_seq_len),
            ("max_text_len", self.max_text_len),
            ("vocab_size", self.vocab_size),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("pseudo_map_depth", self.pseudo_map_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        let need = 1 + self.n_patches() + self.max_text_len;
        if need > self.max_seq_len {
            return Err(Error::Config(format!(
                "1 + n_patches ({}) + max_text_len ({}) = {need} exceeds max_seq_len {}",
                self.n_patches(),
                self.max_text_len,
                self.max_seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} not in [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}
