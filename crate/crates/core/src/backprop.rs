//! Batched forward pass, contrastive loss and reverse-mode gradients.
//!
//! A batch is a set of distinct images plus a list of items that reference
//! them. Each image runs through the ViT once; every item that uses it adds
//! into the same visual-state gradient before the single ViT backward.
//! Per-item and per-image gradients are reduced in index order, so the
//! result does not depend on how many threads ran the pass.

use rayon::prelude::*;

use crate::config::TokenOrder;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::loss::{pooled_contrastive_loss, LossForm, LossOutput};
use crate::model::{sample_kept, Model, Segment, TextCache, VitCache};
use crate::params::{Gradients, Partition};
use crate::tensor::{gelu, gelu_grad, l2_norm, linear, linear_backward, Real};
use crate::tokenizer::TokenSequence;
use rand::Rng;

/// One encodable input of a batch.
#[derive(Debug, Clone)]
pub enum Item<F> {
    Text(TokenSequence),
    /// Index into [`EncodeBatch::images`].
    Image(usize),
    Composed { image: usize, text: TokenSequence, order: TokenOrder },
    /// `[CLS; "a photo of"; map(e_image); text]`.
    PseudoToken { image: usize, text: Option<TokenSequence> },
    /// A precomputed embedding that takes no gradient.
    Fixed(Vec<F>),
}

impl<F> Item<F> {
    fn image(&self) -> Option<usize> {
        match self {
            Item::Image(i) | Item::Composed { image: i, .. } | Item::PseudoToken { image: i, .. } => Some(*i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncodeBatch<F> {
    pub images: Vec<ImageGrid>,
    pub items: Vec<Item<F>>,
}

impl<F> EncodeBatch<F> {
    pub fn new() -> Self {
        EncodeBatch { images: Vec::new(), items: Vec::new() }
    }

    pub fn add_image(&mut self, image: ImageGrid) -> usize {
        self.images.push(image);
        self.images.len() - 1
    }

    pub fn add(&mut self, item: Item<F>) -> usize {
        self.items.push(item);
        self.items.len() - 1
    }
}

/// How item embeddings are combined into a scalar objective.
#[derive(Debug, Clone, PartialEq)]
pub enum LossHead {
    /// `L(left, right) + L(right, left)` over index-aligned pairs.
    Symmetric { left: Vec<usize>, right: Vec<usize> },
    /// Each query against the whole pool; optionally adds the reverse
    /// positive-to-query direction over the aligned positives.
    Pooled { queries: Vec<usize>, pool: Vec<usize>, positives: Vec<usize>, bidirectional: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub head: LossHead,
    pub tau: f64,
    pub form: LossForm,
}

impl LossSpec {
    /// Loss value and the gradient for every item embedding.
    pub fn evaluate(&self, emb: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let dim = emb.first().map_or(0, Vec::len);
        let mut grads = vec![vec![0.0; dim]; emb.len()];
        let pick = |ix: &[usize]| -> Result<Vec<Vec<f64>>> {
            ix.iter()
                .map(|&i| {
                    emb.get(i).cloned().ok_or_else(|| Error::InvalidArgument(format!("loss refers to missing item {i}")))
                })
                .collect()
        };
        let mut scatter = |ix: &[usize], g: &[Vec<f64>]| {
            for (&i, gi) in ix.iter().zip(g) {
                for (a, b) in grads[i].iter_mut().zip(gi) {
                    *a += b;
                }
            }
        };
        let mut total = 0.0;
        let run = |q: &[usize], p: &[usize], pos: &[usize]| -> Result<LossOutput> {
            pooled_contrastive_loss(&pick(q)?, &pick(p)?, pos, self.tau, self.form)
        };
        match &self.head {
            LossHead::Symmetric { left, right } => {
                if left.len() != right.len() {
                    return Err(Error::InvalidArgument("symmetric loss sides differ in length".into()));
                }
                let aligned: Vec<usize> = (0..left.len()).collect();
                let a = run(left, right, &aligned)?;
                let b = run(right, left, &aligned)?;
                total += a.loss + b.loss;
                scatter(left, &a.grad_queries);
                scatter(right, &a.grad_pool);
                scatter(right, &b.grad_queries);
                scatter(left, &b.grad_pool);
            }
            LossHead::Pooled { queries, pool, positives, bidirectional } => {
                let a = run(queries, pool, positives)?;
                total += a.loss;
                scatter(queries, &a.grad_queries);
                scatter(pool, &a.grad_pool);
                if *bidirectional {
                    let pos_items: Vec<usize> = positives.iter().map(|&p| pool[p]).collect();
                    let aligned: Vec<usize> = (0..queries.len()).collect();
                    let b = run(&pos_items, queries, &aligned)?;
                    total += b.loss;
                    scatter(&pos_items, &b.grad_queries);
                    scatter(queries, &b.grad_pool);
                }
            }
        }
        Ok((total, grads))
    }
}

/// Kept patch indices for every image of a batch, drawn in image order.
pub fn sample_masks<R: Rng>(n_images: usize, n_patches: usize, mask_ratio: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    (0..n_images).map(|_| sample_kept(n_patches, mask_ratio, rng)).collect()
}

pub(crate) struct MapCache<F> {
    inputs: Vec<Vec<F>>,
    pre: Vec<Vec<F>>,
}

enum ItemCache<F> {
    Fixed,
    Text(TextCache<F>),
    /// Text cache plus the segment index holding the visual states.
    Visual(TextCache<F>, usize),
    Pseudo { image: TextCache<F>, map: MapCache<F>, text: TextCache<F> },
}

struct Forward<F> {
    embedding: Vec<F>,
    cache: ItemCache<F>,
}

fn normalized<F: Real>(h: &[F]) -> Result<Vec<F>> {
    let n = l2_norm(h);
    if !n.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    if n < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(h.iter().map(|v| F::from_f64(v.to_f64() / n)).collect())
}

impl<F: Real> Model<F> {
    /// Image-to-pseudo-token map: linear layers with GELU in between.
    pub(crate) fn map_forward(&self, e: &[F]) -> (Vec<F>, MapCache<F>) {
        let d = self.config.d_model;
        let layers = &self.layout().map.layers;
        let mut x = e.to_vec();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        for (i, &(w, b)) in layers.iter().enumerate() {
            let y = linear(&x, 1, d, self.params.get(w), Some(self.params.get(b)), d);
            inputs.push(std::mem::take(&mut x));
            x = if i + 1 < layers.len() { y.iter().map(|&v| gelu(v)).collect() } else { y.clone() };
            pre.push(y);
        }
        (x, MapCache { inputs, pre })
    }

    fn map_backward(&self, cache: &MapCache<F>, dy: &[F], grads: &mut Gradients<F>) -> Vec<F> {
        let d = self.config.d_model;
        let layers = &self.layout().map.layers;
        let mut g = dy.to_vec();
        for (i, &(w, b)) in layers.iter().enumerate().rev() {
            if i + 1 < layers.len() {
                for (gv, &p) in g.iter_mut().zip(&cache.pre[i]) {
                    *gv = *gv * gelu_grad(p);
                }
            }
            let (dw, db) = grads.pair_mut(w, b);
            g = linear_backward(&cache.inputs[i], 1, d, self.params.get(w), d, &g, dw, db, true).expect("dx requested");
        }
        g
    }

    fn item_forward(&self, item: &Item<F>, states: &[Vec<F>]) -> Result<Forward<F>> {
        let d = self.config.d_model;
        let vis = |i: usize| Segment::Vectors { data: &states[i], rows: states[i].len() / d };
        let (hidden, cache) = match item {
            Item::Fixed(v) => return Ok(Forward { embedding: v.clone(), cache: ItemCache::Fixed }),
            Item::Text(t) => {
                let (h, c) = self.text_forward(&[Segment::Tokens(t)])?;
                (h, ItemCache::Text(c))
            }
            Item::Image(i) => {
                let (h, c) = self.text_forward(&[vis(*i)])?;
                (h, ItemCache::Visual(c, 0))
            }
            Item::Composed { image, text, order } => {
                let (segs, at) = match order {
                    TokenOrder::VisualFirst => ([vis(*image), Segment::Tokens(text)], 0),
                    TokenOrder::TextFirst => ([Segment::Tokens(text), vis(*image)], 1),
                };
                let (h, c) = self.text_forward(&segs)?;
                (h, ItemCache::Visual(c, at))
            }
            Item::PseudoToken { image, text } => {
                let (hi, ci) = self.text_forward(&[vis(*image)])?;
                let e = normalized(&hi)?;
                let (tok, mc) = self.map_forward(&e);
                let prompt = self.vocab.prompt();
                let mut segs = vec![Segment::Tokens(&prompt), Segment::Vectors { data: &tok, rows: 1 }];
                if let Some(t) = text {
                    segs.push(Segment::Tokens(t));
                }
                let (h, ct) = self.text_forward(&segs)?;
                (h, ItemCache::Pseudo { image: ci, map: mc, text: ct })
            }
        };
        Ok(Forward { embedding: normalized(&hidden)?, cache })
    }

    /// Backward of one item. Returns gradient contributions to the
    /// visual states of the item's image, if any.
    fn item_backward(&self, cache: &ItemCache<F>, d_emb: &[F], grads: &mut Gradients<F>) -> Option<Vec<F>> {
        match cache {
            ItemCache::Fixed => None,
            ItemCache::Text(c) => {
                self.text_backward(c, d_emb, grads);
                None
            }
            ItemCache::Visual(c, seg) => self
                .text_backward(c, d_emb, grads)
                .into_iter()
                .find(|(s, _)| s == seg)
                .map(|(_, g)| g),
            ItemCache::Pseudo { image, map, text } => {
                let dtok = self.text_backward(text, d_emb, grads).into_iter().find(|(s, _)| *s == 1)?.1;
                let de = self.map_backward(map, &dtok, grads);
                self.text_backward(image, &de, grads).into_iter().next().map(|(_, g)| g)
            }
        }
    }
}

/// Result of [`forward_with_gradients`].
#[derive(Debug, Clone)]
pub struct BackwardOutput<F> {
    pub loss: f64,
    pub grads: Gradients<F>,
    pub embeddings: Vec<Vec<F>>,
}

fn vit_all<F: Real>(
    model: &Model<F>,
    images: &[ImageGrid],
    kept: &[Vec<usize>],
) -> Result<Vec<(Vec<F>, VitCache<F>)>> {
    if kept.len() != images.len() {
        return Err(Error::InvalidArgument(format!("{} masks for {} images", kept.len(), images.len())));
    }
    images
        .par_iter()
        .zip(kept.par_iter())
        .map(|(img, k)| model.vit_forward(img, k))
        .collect()
}

fn check_items<F>(batch: &EncodeBatch<F>) -> Result<()> {
    for it in &batch.items {
        if let Some(i) = it.image() {
            if i >= batch.images.len() {
                return Err(Error::InvalidArgument(format!("item refers to missing image {i}")));
            }
        }
    }
    Ok(())
}

/// Embeddings of every item (no gradient bookkeeping kept).
pub fn encode_batch<F: Real>(model: &Model<F>, batch: &EncodeBatch<F>, kept: &[Vec<usize>]) -> Result<Vec<Vec<F>>> {
    check_items(batch)?;
    let states: Vec<Vec<F>> = vit_all(model, &batch.images, kept)?.into_iter().map(|(s, _)| s).collect();
    batch
        .items
        .par_iter()
        .map(|it| model.item_forward(it, &states).map(|f| f.embedding))
        .collect()
}

/// Loss value only, for line searches and finite-difference checks.
pub fn batch_loss<F: Real>(model: &Model<F>, batch: &EncodeBatch<F>, loss: &LossSpec, kept: &[Vec<usize>]) -> Result<f64> {
    let emb = encode_batch(model, batch, kept)?;
    let emb64: Vec<Vec<f64>> = emb.iter().map(|e| e.iter().map(|v| v.to_f64()).collect()).collect();
    Ok(loss.evaluate(&emb64)?.0)
}

/// Forward pass, loss, and gradients for every trainable array.
///
/// Frozen arrays get no gradient storage at all; non-finite values in the
/// loss or any gradient are reported with the array name.
pub fn forward_with_gradients<F: Real>(
    model: &Model<F>,
    batch: &EncodeBatch<F>,
    loss: &LossSpec,
    kept: &[Vec<usize>],
) -> Result<BackwardOutput<F>> {
    check_items(batch)?;
    let p = &model.params;
    let vision_tr = p.partition_trainable(Partition::Vision);
    let layout = model.layout().clone();

    let vit = vit_all(model, &batch.images, kept)?;
    let states: Vec<Vec<F>> = vit.iter().map(|(s, _)| s.clone()).collect();
    let fwd: Vec<Forward<F>> =
        batch.items.par_iter().map(|it| model.item_forward(it, &states)).collect::<Result<_>>()?;

    let emb64: Vec<Vec<f64>> = fwd.iter().map(|f| f.embedding.iter().map(|v| v.to_f64()).collect()).collect();
    let (loss_value, d_emb) = loss.evaluate(&emb64)?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    // Item-level gradients cover the text encoder and the pseudo-token map.
    let item_mask: Vec<bool> = layout
        .arrays()
        .iter()
        .zip(p.trainable_mask())
        .map(|(a, &t)| t && a.partition != Partition::Vision)
        .collect();
    let any_item_params = item_mask.iter().any(|&t| t);

    let per_item: Vec<(Option<Gradients<F>>, Option<Vec<F>>)> = fwd
        .par_iter()
        .zip(d_emb.par_iter())
        .map(|(f, g)| {
            if matches!(f.cache, ItemCache::Fixed) || g.iter().all(|v| *v == 0.0) {
                return (None, None);
            }
            let wants_states = vision_tr && !matches!(f.cache, ItemCache::Text(_));
            if !any_item_params && !wants_states {
                return (None, None);
            }
            let g: Vec<F> = g.iter().map(|&v| F::from_f64(v)).collect();
            let mut local = Gradients::for_mask(layout.clone(), &item_mask);
            let ds = model.item_backward(&f.cache, &g, &mut local);
            (any_item_params.then_some(local), ds)
        })
        .collect();

    let mut grads = Gradients::for_params(p);
    let mut d_states: Vec<Option<Vec<F>>> = vec![None; batch.images.len()];
    for ((local, ds), item) in per_item.into_iter().zip(&batch.items) {
        if let Some(local) = local {
            grads.add_subset(&local);
        }
        if let (Some(ds), Some(img)) = (ds, item.image()) {
            match &mut d_states[img] {
                Some(acc) => crate::tensor::add_into(acc, &ds),
                slot => *slot = Some(ds),
            }
        }
    }

    if vision_tr {
        let vision_mask: Vec<bool> = layout
            .arrays()
            .iter()
            .zip(p.trainable_mask())
            .map(|(a, &t)| t && a.partition == Partition::Vision)
            .collect();
        let per_image: Vec<Option<Gradients<F>>> = vit
            .par_iter()
            .zip(d_states.par_iter())
            .map(|((_, cache), ds)| {
                ds.as_ref().map(|ds| {
                    let mut local = Gradients::for_mask(layout.clone(), &vision_mask);
                    model.vit_backward(cache, ds, &mut local);
                    local
                })
            })
            .collect();
        for local in per_image.into_iter().flatten() {
            grads.add_subset(&local);
        }
    }

    grads.check_finite()?;
    Ok(BackwardOutput { loss: loss_value, grads, embeddings: fwd.into_iter().map(|f| f.embedding).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Partition;
    use crate::testutil::{random_image, rng, seq, tiny_model};
    use rand_chacha::ChaCha8Rng;

    fn all_trainable() -> Model<f64> {
        let mut m = tiny_model(3);
        m.params.train_only(&[Partition::Text, Partition::Vision, Partition::PseudoMap]);
        m
    }

    fn batch(rng: &mut ChaCha8Rng) -> EncodeBatch<f64> {
        let mut b = EncodeBatch::new();
        let i0 = b.add_image(random_image(8, rng));
        let i1 = b.add_image(random_image(8, rng));
        let i2 = b.add_image(random_image(8, rng));
        b.add(Item::Composed { image: i0, text: seq(&[6, 7, 2]), order: TokenOrder::VisualFirst });
        b.add(Item::Composed { image: i1, text: seq(&[6, 3]), order: TokenOrder::TextFirst });
        b.add(Item::Image(i1));
        b.add(Item::Image(i2));
        b.add(Item::Text(seq(&[1, 3])));
        b.add(Item::PseudoToken { image: i0, text: Some(seq(&[2, 5])) });
        b.add(Item::PseudoToken { image: i2, text: None });
        b.add(Item::Fixed(vec![0.5, -0.5, 0.5, -0.5, 0.0, 0.0, 0.0, 0.0]));
        b
    }

    /// Largest per-array `|g - fd| / max(|g|, |fd|, 1e-6)` over all trainable arrays.
    fn fd_check(model: &Model<f64>, b: &EncodeBatch<f64>, spec: &LossSpec, kept: &[Vec<usize>]) -> f64 {
        let out = forward_with_gradients(model, b, spec, kept).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for (id, _, g) in out.grads.entries() {
            let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
            for (k, &a) in g.iter().enumerate() {
                let mut m = model.clone();
                m.params.get_mut(id)[k] += h;
                let up = batch_loss(&m, b, spec, kept).unwrap();
                m.params.get_mut(id)[k] -= 2.0 * h;
                let down = batch_loss(&m, b, spec, kept).unwrap();
                let fd = (up - down) / (2.0 * h);
                diff += (fd - a).powi(2);
                na += a * a;
                nf += fd * fd;
            }
            worst = worst.max(diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-6));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = all_trainable();
        let mut rng = rng(1);
        let b = batch(&mut rng);
        let kept = vec![vec![0, 2, 3], (0..4).collect(), vec![1, 2]];
        let sym = LossSpec {
            head: LossHead::Symmetric { left: vec![0, 1, 4], right: vec![2, 3, 5] },
            tau: 0.02,
            form: LossForm::Log,
        };
        let pooled = LossSpec {
            head: LossHead::Pooled { queries: vec![0, 1], pool: vec![2, 3, 6, 5, 7], positives: vec![1, 0], bidirectional: true },
            tau: 0.02,
            form: LossForm::Log,
        };
        assert!(fd_check(&model, &b, &sym, &kept) < 1e-4);
        assert!(fd_check(&model, &b, &pooled, &kept) < 1e-4);
    }

    #[test]
    fn frozen_arrays_get_no_gradient_storage() {
        let mut model = all_trainable();
        model.params.train_only(&[Partition::Vision]);
        let mut rng = rng(2);
        let b = batch(&mut rng);
        let kept = vec![(0..4).collect(); 3];
        let spec = LossSpec {
            head: LossHead::Symmetric { left: vec![0, 1], right: vec![2, 3] },
            tau: 0.02,
            form: LossForm::Log,
        };
        let out = forward_with_gradients(&model, &b, &spec, &kept).unwrap();
        assert!(out.grads.entries().all(|(_, s, _)| s.partition == Partition::Vision));
        assert!(out.grads.global_norm() > 0.0);
    }

    #[test]
    fn non_finite_parameters_are_named() {
        let mut model = all_trainable();
        let id = model.layout().find("vision.patch.weight").unwrap();
        model.params.get_mut(id)[0] = f64::NAN;
        let mut rng = rng(2);
        let b = batch(&mut rng);
        let kept = vec![(0..4).collect(); 3];
        let spec = LossSpec {
            head: LossHead::Symmetric { left: vec![0], right: vec![2] },
            tau: 0.02,
            form: LossForm::Log,
        };
        let err = forward_with_gradients(&model, &b, &spec, &kept).unwrap_err().to_string();
        assert!(err.contains("vision"), "{err}");
    }

    #[test]
    fn result_is_independent_of_thread_count() {
        let model = all_trainable();
        let mut rng = rng(5);
        let b = batch(&mut rng);
        let kept = vec![(0..4).collect(); 3];
        let spec = LossSpec {
            head: LossHead::Symmetric { left: vec![0, 1, 4], right: vec![2, 3, 5] },
            tau: 0.02,
            form: LossForm::Log,
        };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| forward_with_gradients(&model, &b, &spec, &kept).unwrap())
        };
        let (a, c) = (run(1), run(3));
        assert_eq!(a.loss.to_bits(), c.loss.to_bits());
        let bits = |g: &Gradients<f64>| g.entries().flat_map(|(_, _, v)| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a.grads), bits(&c.grads));
    }
}
