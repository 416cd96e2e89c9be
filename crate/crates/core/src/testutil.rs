//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::image::ImageGrid;
use crate::model::Model;
use crate::tensor::Real;
use crate::tokenizer::{TokenSequence, Vocab};

/// d=8, 8×8 images cut into four 4×4 patches.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_text_layers: 2,
        n_vit_layers: 1,
        n_heads: 2,
        max_seq_len: 24,
        max_text_len: 8,
        vocab_size: 16,
        image_size: 8,
        patch_size: 4,
        seed: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_vocab() -> Vocab {
    Vocab::from_tokens(["red", "blue", "circle", "square", "left", "make", "it"])
}

pub fn tiny_model<F: Real>(seed: u64) -> Model<F> {
    Model::<f32>::init(ModelConfig { seed, ..tiny_config() }, tiny_vocab()).unwrap().cast()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(size: usize, rng: &mut ChaCha8Rng) -> ImageGrid {
    ImageGrid::new(size, 3, (0..size * size * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

pub fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec()).unwrap()
}
