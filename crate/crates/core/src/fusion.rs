//! Baseline ways of combining an image and a text into one embedding:
//! summed independent embeddings, and a single pseudo word token made from
//! the image embedding.

use crate::backprop::{encode_batch, EncodeBatch, Item};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::model::{Embedding, Model, Segment};
use crate::tensor::Real;
use crate::tokenizer::TokenSequence;
use crate::train::{CaptionPair, Stage, TrainConfig, TrainData, Trainer};

/// Element-wise sum of two embeddings, renormalised unless `raw_sum`.
pub fn fuse_scores(text: &Embedding, image: &Embedding, raw_sum: bool) -> Result<Embedding> {
    if text.dim() != image.dim() {
        return Err(Error::shape(text.dim().to_string(), image.dim().to_string()));
    }
    let sum: Vec<f32> = text.as_slice().iter().zip(image.as_slice()).map(|(a, b)| a + b).collect();
    if raw_sum {
        Ok(Embedding::raw(sum))
    } else {
        Embedding::normalize(&sum)
    }
}

pub fn score_fusion_encode<F: Real>(
    model: &Model<F>,
    text: &TokenSequence,
    image: &ImageGrid,
    raw_sum: bool,
) -> Result<Embedding> {
    fuse_scores(&model.encode_text(text)?, &model.encode_image(image)?, raw_sum)
}

/// The pseudo token `[*]`: the image embedding pushed through the map.
pub fn pseudo_token<F: Real>(model: &Model<F>, image: &ImageGrid) -> Result<Vec<F>> {
    let e = model.encode_image(image)?;
    let e: Vec<F> = e.as_slice().iter().map(|&v| F::from_f64(v as f64)).collect();
    Ok(model.map_forward(&e).0)
}

/// Positions consumed by `[CLS; "a photo of"; [*]; text]`.
pub fn pseudo_sequence_len<F: Real>(model: &Model<F>, text: Option<&TokenSequence>) -> usize {
    1 + model.vocab.prompt().len() + 1 + text.map_or(0, TokenSequence::len)
}

/// Embeds `[CLS; "a photo of"; [*]; text]`.
pub fn pseudo_token_encode<F: Real>(model: &Model<F>, text: &TokenSequence, image: &ImageGrid) -> Result<Embedding> {
    let tok = pseudo_token(model, image)?;
    if tok.len() != model.config.d_model {
        return Err(Error::shape(model.config.d_model.to_string(), tok.len().to_string()));
    }
    let prompt = model.vocab.prompt();
    let (h, _) = model.text_forward(&[Segment::Tokens(&prompt), Segment::Vectors { data: &tok, rows: 1 }, Segment::Tokens(text)])?;
    Embedding::normalize(&h)
}

/// Trains only the pseudo-token map on caption pairs: the prompt with the
/// image's pseudo token is pulled towards the caption embedding. Every
/// other array stays bit-identical.
pub fn train_pseudo_token_map(model: Model<f32>, pairs: Vec<CaptionPair>, cfg: &TrainConfig) -> Result<Model<f32>> {
    let cfg = TrainConfig { stage: Stage::PseudoMap, ..cfg.clone() };
    let data = TrainData { pairs, ..TrainData::default() };
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(&data, |_, _| Ok(()))?;
    Ok(trainer.model)
}

/// Pseudo-token embeddings for a batch, through the same path the trainer uses.
pub fn pseudo_token_batch<F: Real>(model: &Model<F>, items: &[(ImageGrid, Option<TokenSequence>)]) -> Result<Vec<Vec<F>>> {
    let mut b = EncodeBatch::new();
    for (img, text) in items {
        let i = b.add_image(img.clone());
        b.add(Item::PseudoToken { image: i, text: text.clone() });
    }
    let kept = vec![(0..model.config.n_patches()).collect(); items.len()];
    encode_batch(model, &b, &kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::{batch_loss, forward_with_gradients};
    use crate::params::Partition;
    use crate::testutil::{random_image, rng, seq, tiny_model};
    use crate::train::pseudo_map_batch;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::normalize(v).unwrap()
    }

    #[test]
    fn collinear_sum_keeps_direction_and_opposites_fail() {
        let v = emb(&[0.6, 0.8, 0.0]);
        let f = fuse_scores(&v, &v, false).unwrap();
        for (a, b) in f.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-7);
        }
        let w = emb(&[-0.6, -0.8, 0.0]);
        assert!(matches!(fuse_scores(&v, &w, false), Err(Error::ZeroVector)));
        assert_eq!(fuse_scores(&v, &v, true).unwrap().as_slice(), &[1.2, 1.6, 0.0]);
    }

    #[test]
    fn fused_vector_lies_in_the_spanned_plane_and_commutes() {
        let mut r = rng(3);
        use rand::Rng;
        for _ in 0..50 {
            let a = emb(&(0..16).map(|_| r.gen::<f32>() - 0.5).collect::<Vec<_>>());
            let b = emb(&(0..16).map(|_| r.gen::<f32>() - 0.5).collect::<Vec<_>>());
            let f = fuse_scores(&a, &b, false).unwrap();
            assert_eq!(f, fuse_scores(&b, &a, false).unwrap());
            // Gram-Schmidt residual of f against span{a, b}, all in f64
            let x: Vec<f64> = a.as_slice().iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = b.as_slice().iter().map(|&v| v as f64).collect();
            let z: Vec<f64> = f.as_slice().iter().map(|&v| v as f64).collect();
            let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| s * t).sum::<f64>();
            let xn = dot(&x, &x).sqrt();
            let u: Vec<f64> = x.iter().map(|v| v / xn).collect();
            let yo: Vec<f64> = y.iter().zip(&u).map(|(v, w)| v - dot(&y, &u) * w).collect();
            let yn = dot(&yo, &yo).sqrt();
            let w: Vec<f64> = yo.iter().map(|v| v / yn).collect();
            let res: Vec<f64> = z.iter().zip(&u).zip(&w).map(|((s, p), q)| s - dot(&z, &u) * p - dot(&z, &w) * q).collect();
            assert!(dot(&res, &res).sqrt() < 1e-6);
        }
    }

    fn identity_map(model: &mut Model<f64>) {
        let d = model.config.d_model;
        let (w, b) = model.layout().map.layers[0];
        let wm = model.params.get_mut(w);
        wm.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            wm[i * d + i] = 1.0;
        }
        model.params.get_mut(b).iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn identity_map_reproduces_the_image_embedding() {
        let mut model = tiny_model::<f64>(1);
        identity_map(&mut model);
        let img = random_image(8, &mut rng(1));
        let e = model.encode_image(&img).unwrap();
        let tok = pseudo_token(&model, &img).unwrap();
        for (a, b) in tok.iter().zip(e.as_slice()) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn pseudo_sequence_has_prompt_token_and_text() {
        let model = tiny_model::<f32>(1);
        let text = seq(&[1, 2, 3]);
        assert_eq!(pseudo_sequence_len(&model, Some(&text)), 1 + 3 + 1 + 3);
        let mut r = rng(2);
        let (a, b) = (random_image(8, &mut r), random_image(8, &mut r));
        let ea = pseudo_token_encode(&model, &text, &a).unwrap();
        let eb = pseudo_token_encode(&model, &text, &b).unwrap();
        assert!(ea.cosine(&eb) < 1.0 - 1e-8);
        assert!((ea.norm() - 1.0).abs() < 1e-6);
        let batch = pseudo_token_batch(&model, &[(a.clone(), Some(text.clone()))]).unwrap();
        assert_eq!(batch[0], ea.as_slice());
    }

    #[test]
    fn map_gradient_matches_finite_differences() {
        let mut model = tiny_model::<f64>(2);
        model.params.train_only(&[Partition::PseudoMap]);
        let mut r = rng(5);
        let pairs: Vec<CaptionPair> =
            (0..3).map(|i| CaptionPair { image: random_image(8, &mut r), caption: seq(&[1 + i, 3]) }).collect();
        let refs: Vec<&CaptionPair> = pairs.iter().collect();
        let cfg = TrainConfig { stage: Stage::PseudoMap, ..TrainConfig::default() };
        let (b, spec) = pseudo_map_batch::<f64>(&refs, &cfg).unwrap();
        let kept = vec![(0..4).collect::<Vec<_>>(); b.images.len()];
        let out = forward_with_gradients(&model, &b, &spec, &kept).unwrap();
        let h = 1e-3;
        for (id, _, g) in out.grads.entries() {
            let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
            for (k, &a) in g.iter().enumerate() {
                let mut m = model.clone();
                m.params.get_mut(id)[k] += h;
                let up = batch_loss(&m, &b, &spec, &kept).unwrap();
                m.params.get_mut(id)[k] -= 2.0 * h;
                let fd = (up - batch_loss(&m, &b, &spec, &kept).unwrap()) / (2.0 * h);
                diff += (fd - a).powi(2);
                na += a * a;
                nf += fd * fd;
            }
            assert!(diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn map_training_touches_only_the_map() {
        let model = tiny_model::<f32>(3);
        let mut r = rng(6);
        let pairs: Vec<CaptionPair> =
            (0..4).map(|i| CaptionPair { image: random_image(8, &mut r), caption: seq(&[1 + i, 2]) }).collect();
        let cfg = TrainConfig { total_steps: 3, batch_size: 3, lr_init: 1e-2, ..TrainConfig::default() };
        let trained = train_pseudo_token_map(model.clone(), pairs.clone(), &cfg).unwrap();
        for p in [Partition::Text, Partition::Vision] {
            let before: Vec<u32> = model.params.partition_values(p).iter().map(|v| v.to_bits()).collect();
            let after: Vec<u32> = trained.params.partition_values(p).iter().map(|v| v.to_bits()).collect();
            assert_eq!(before, after);
        }
        assert_ne!(model.params.partition_values(Partition::PseudoMap), trained.params.partition_values(Partition::PseudoMap));
        let zero = TrainConfig { total_steps: 1, ..cfg };
        let mut t = Trainer::new(model.clone(), TrainConfig { stage: Stage::PseudoMap, ..zero }).unwrap();
        assert_eq!(t.step, 0);
        assert_eq!(t.model.params.data(), model.params.data());
        t.step_once(&TrainData { pairs, ..TrainData::default() }).unwrap();
    }
}
